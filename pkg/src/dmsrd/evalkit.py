"""Evaluation: per-demo policy metrics, task-reward correlation, strategy heatmaps and exports.

This is the only module that reads ground-truth strategy labels or mixture
weights.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import envsim, mixture
from .errors import ContractError, LookupFailure, NumericalError, PreconditionError
from .lifelong import assigned_policy
from .policy import log_likelihood
from .rewardlearn import normalized_return


@dataclass
class DemoMetrics:
    index: int
    env_return: float
    log_likelihood: float
    kl: float


def policy_metrics(registry, demos, env, n_eval_rollouts=5, rng=None):
    """Return, demo log-likelihood and trajectory KL of each demo's assigned policy."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    for d in demos:
        traj = getattr(d, "trajectory", d)
        i = d.arrival_index
        if i not in registry.weights:
            raise LookupFailure(f"demonstration {i} has not been ingested")
        pol = assigned_policy(registry, i)
        rollouts = envsim.rollout(env, pol, len(traj), rng, n=n_eval_rollouts)
        ret = float(np.mean([r.env_return for r in rollouts]))
        kl = mixture.trajectory_kl(traj, pol, env, n_eval_rollouts, rollouts=rollouts)
        rows.append(DemoMetrics(i, ret, log_likelihood(pol, traj), kl))
    return rows


def oracle_kl(registry, demos, env, strategies, n_eval_rollouts=10, seed=0):
    """``(kl of assigned policy, kl of the generating scripted policy)`` per demo.

    Both sides use the same rollout seed so the comparison shares start
    states and noise.
    """
    from . import demogen

    rows = []
    for d in demos:
        pol = assigned_policy(registry, d.arrival_index)
        orc = demogen.oracle_policy(env, d, strategies)
        a = mixture.trajectory_kl(d.trajectory, pol, env, n_eval_rollouts, np.random.default_rng(seed))
        b = mixture.trajectory_kl(d.trajectory, orc, env, n_eval_rollouts, np.random.default_rng(seed))
        rows.append((a, b))
    return rows


def is_mixture_demo(demo):
    w = demo.true_weights
    return w is not None and np.count_nonzero(np.asarray(w)) > 1


def mixture_explained(registry, demos):
    """Fraction of executed-mixture demos that were absorbed without a new strategy."""
    branch = {d.index: d.branch for d in registry.decisions}
    mix = [d for d in demos if is_mixture_demo(d)]
    if not mix:
        return None
    return sum(branch.get(d.arrival_index) in ("mixture", "mixture-over-new") for d in mix) / len(mix)


# ----------------------------------------------------------------------
# correlation


def pearson(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("pearson needs two equal-length vectors")
    if len(x) < 3:
        raise ContractError("correlation needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx <= 0 or syy <= 0:
        raise NumericalError("correlation undefined: zero variance")
    return float(np.clip(np.dot(dx, dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def task_reward_correlation(task_reward, trajectories, ground_truth=None):
    """Pearson r between discounted learned-task returns and ground-truth env returns."""
    trajectories = list(trajectories)
    est = [envsim.discounted_return(t, task_reward) for t in trajectories]
    gt = [t.env_return for t in trajectories] if ground_truth is None else ground_truth
    return pearson(est, gt)


def fisher_z_test(r1, n1, r2, n2):
    """Two-sided z-test for a difference of independent correlations."""
    for r in (r1, r2):
        if not abs(r) < 1:
            raise NumericalError(f"Fisher transform undefined for r={r}")
    if n1 <= 3 or n2 <= 3:
        raise ContractError("each sample needs more than 3 points")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    return z, float(2.0 * norm.sf(abs(z)))


# ----------------------------------------------------------------------
# strategy heatmap


def normalize_columns(matrix):
    """Affinely map each column onto [0, 1]; constant columns become zeros."""
    m = np.array(matrix, dtype=float)
    lo, hi = m.min(axis=0), m.max(axis=0)
    span = hi - lo
    flat = span <= 0
    if np.any(flat):
        warnings.warn(f"constant heatmap column(s) {np.flatnonzero(flat).tolist()} set to 0", RuntimeWarning)
    out = np.zeros_like(m)
    ok = ~flat
    out[:, ok] = (m[:, ok] - lo[ok]) / span[ok]
    return out


def strategy_heatmap(registry, pure_demos=None, normalize=True):
    """Entry (j, k): strategy j's normalized return on strategy k's founding demo."""
    M = registry.n_strategies
    if M < 2:
        raise PreconditionError("a heatmap needs at least two strategies")
    if pure_demos is None:
        pure_demos = [registry.demos[s.pure_index] for s in registry.strategies]
    raw = np.array([[normalized_return(s.reward, d, registry.env.gamma) for d in pure_demos]
                    for s in registry.strategies])
    return normalize_columns(raw) if normalize else raw


def strategies_identified(heatmap):
    """Fraction of columns whose unique maximum lies on the diagonal."""
    h = np.asarray(heatmap, dtype=float)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ContractError(f"heatmap must be square, got shape {h.shape}")
    hits = 0
    for k in range(h.shape[1]):
        col = h[:, k]
        if col[k] == col.max() and np.sum(col == col.max()) == 1:
            hits += 1
    return hits / h.shape[1]


# ----------------------------------------------------------------------
# staged test set

# (exploration std, gain scale): full, noisy, degraded, heavily noised
COMPETENCE_STAGES = ((0.05, 1.0), (0.3, 1.0), (0.6, 0.8), (1.0, 0.6))


@dataclass
class TestSet:
    trajectories: list
    returns: np.ndarray
    strategies: list
    stages: list


def build_test_set(env, seed, strategies=None, stages=COMPETENCE_STAGES, per_snapshot=10):
    """Scripted strategies at staged competence levels, with ground-truth env returns."""
    from . import demogen

    strategies = strategies or demogen.builtin_strategies(env.id)
    trajs, labels, stage_ids = [], [], []
    for j, strat in enumerate(strategies):
        for k, (std, gain) in enumerate(stages):
            pol = demogen.ScriptedPolicy(env, lambda s, r=strat.rule, g=gain: g * r(s), std)
            rng = np.random.default_rng([seed, j, k])
            batch = envsim.rollout(env, pol, env.horizon, rng, n=per_snapshot)
            trajs += batch
            labels += [strat.id] * len(batch)
            stage_ids += [k] * len(batch)
    returns = np.array([t.env_return for t in trajs])
    if not np.all(np.isfinite(returns)):
        raise NumericalError("non-finite ground-truth return in test set")
    return TestSet(trajs, returns, labels, stage_ids)


def save_test_set(directory, env, test_set):
    from . import demogen

    demos = [demogen.Demonstration(t, i + 1, None, None, f"{s}/stage{k}")
             for i, (t, s, k) in enumerate(zip(test_set.trajectories, test_set.strategies, test_set.stages))]
    return demogen.save_demo_set(directory, env, demos, {"kind": "test-set"})


def load_test_set(directory):
    from . import demogen

    env, demos, _ = demogen.load_demo_set(directory)
    trajs = [d.trajectory for d in demos]
    src = [d.source.rsplit("/stage", 1) for d in demos]
    return env, TestSet(trajs, np.array([t.env_return for t in trajs]),
                        [s[0] for s in src], [int(s[1]) if len(s) > 1 else 0 for s in src])


# ----------------------------------------------------------------------
# report


THRESHOLD_KEYS = ("min_strategies", "max_strategies", "min_identified", "min_correlation",
                  "min_mixture_explained", "min_mixture_branch", "kl_oracle_factor", "min_kl_within_oracle")


def check_thresholds(summary, thresholds):
    """``{name: passed}`` for every configured threshold; a missing measurement fails."""
    t = dict(thresholds or {})
    unknown = set(t) - set(THRESHOLD_KEYS)
    if unknown:
        raise ContractError(f"unknown threshold(s): {sorted(unknown)}")

    def ge(value, bound):
        return value is not None and value >= bound

    out = {}
    if t.get("min_strategies") is not None:
        out["min_strategies"] = ge(summary.get("strategies"), t["min_strategies"])
    if t.get("max_strategies") is not None:
        v = summary.get("strategies")
        out["max_strategies"] = v is not None and v <= t["max_strategies"]
    if t.get("min_identified") is not None:
        out["min_identified"] = ge(summary.get("strategies_identified"), t["min_identified"])
    if t.get("min_correlation") is not None:
        out["min_correlation"] = ge(summary.get("task_reward_correlation"), t["min_correlation"])
    if t.get("min_mixture_explained") is not None:
        out["min_mixture_explained"] = ge(summary.get("mixture_explained"), t["min_mixture_explained"])
    if t.get("min_mixture_branch") is not None:
        out["min_mixture_branch"] = ge(summary.get("mixture_branch_count"), t["min_mixture_branch"])
    if t.get("min_kl_within_oracle") is not None:
        out["min_kl_within_oracle"] = ge(summary.get("kl_within_oracle"), t["min_kl_within_oracle"])
    return out


@dataclass
class EvalReport:
    metrics: list
    correlation: float | None
    heatmap: np.ndarray | None
    identified: float | None
    meta: dict = field(default_factory=dict)
    scatter: tuple | None = None  # (estimated, ground truth)
    oracle: list | None = None  # per-demo (kl, oracle kl)
    extra: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    require_correlation: bool = False  # a missing test set then fails the report

    def _kl_within(self):
        if not self.oracle:
            return None
        f = self.thresholds.get("kl_oracle_factor", 1.5)
        return sum(a <= f * b for a, b in self.oracle) / len(self.oracle)

    def summary(self):
        kl = [m.kl for m in self.metrics]
        out = {
            "demos": len(self.metrics),
            "mean_env_return": float(np.mean([m.env_return for m in self.metrics])) if self.metrics else None,
            "mean_log_likelihood": float(np.mean([m.log_likelihood for m in self.metrics])) if self.metrics else None,
            "mean_kl": float(np.mean(kl)) if kl else None,
            "task_reward_correlation": self.correlation,
            "strategies_identified": self.identified,
            "heatmap": None if self.heatmap is None else np.asarray(self.heatmap).tolist(),
            "kl_within_oracle": self._kl_within(),
            **self.extra,
            "meta": self.meta,
        }
        out["checks"] = check_thresholds(out, self.thresholds)
        if self.require_correlation:
            out["checks"]["test_set_present"] = self.correlation is not None
        out["passed"] = all(out["checks"].values())
        return out

    @property
    def passed(self):
        return self.summary()["passed"]

    def metrics_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arrival_index", "env_return", "log_likelihood", "kl", "oracle_kl"])
        for k, m in enumerate(self.metrics):
            orc = repr(float(self.oracle[k][1])) if self.oracle else ""
            w.writerow([m.index, repr(m.env_return), repr(m.log_likelihood), repr(m.kl), orc])
        return buf.getvalue()

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def digest(self):
        h = hashlib.sha256()
        h.update(self.metrics_csv().encode())
        h.update(self.summary_json().encode())
        return h.hexdigest()

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {"metrics.csv": self.metrics_csv(), "summary.json": self.summary_json()}
        if self.scatter is not None:
            files["task_reward.svg"] = scatter_svg(*self.scatter)
        for name, text in files.items():
            tmp = directory / (name + ".tmp")
            tmp.write_text(text)
            tmp.replace(directory / name)
        return [directory / n for n in files]


def scatter_svg(estimated, ground_truth, width=480, height=360, margin=48):
    """Estimated vs ground-truth task return, one dot per trajectory."""
    x = np.asarray(ground_truth, dtype=float)
    y = np.asarray(estimated, dtype=float)

    def scale(v, lo, hi, a, b):
        return a + (v - lo) / (hi - lo) * (b - a) if hi > lo else (a + b) / 2 + 0 * v

    px = scale(x, x.min(), x.max(), margin, width - margin / 2)
    py = scale(y, y.min(), y.max(), height - margin, margin / 2)
    dots = "\n".join(f'  <circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="#1f77b4" fill-opacity="0.6"/>'
                     for a, b in zip(px, py))
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n'
            f'  <rect width="{width}" height="{height}" fill="white"/>\n'
            f'  <line x1="{margin}" y1="{height - margin}" x2="{width - margin / 2}" y2="{height - margin}" stroke="black"/>\n'
            f'  <line x1="{margin}" y1="{height - margin}" x2="{margin}" y2="{margin / 2}" stroke="black"/>\n'
            f'  <text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">ground-truth return</text>\n'
            f'  <text x="14" y="{height / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 14 {height / 2})">estimated task return</text>\n'
            f'{dots}\n</svg>\n')


def evaluate(registry, demos, env, test_set=None, n_eval_rollouts=5, seed=0, meta=None,
             strategies=None, thresholds=None, require_correlation=False):
    """Everything the report needs. ``strategies`` (the generating scripted
    controllers, in demo-label order) enables the oracle KL comparison."""
    rng = np.random.default_rng(seed)
    metrics = policy_metrics(registry, demos, env, n_eval_rollouts, rng)
    oracle = oracle_kl(registry, demos, env, strategies, n_eval_rollouts, seed) if strategies else None
    branches = [d.branch for d in registry.decisions]
    by_index = {d.index: d.branch for d in registry.decisions}
    extra = {
        "strategies": registry.n_strategies,
        "branches": branches,
        "mixture_branch_count": sum(by_index.get(d.arrival_index) in ("mixture", "mixture-over-new")
                                    for d in demos if is_mixture_demo(d)),
        "mixture_explained": mixture_explained(registry, demos),
    }
    heatmap = identified = None
    if registry.n_strategies >= 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            heatmap = strategy_heatmap(registry)
        identified = strategies_identified(heatmap)
    elif registry.n_strategies == 1:
        heatmap, identified = np.ones((1, 1)), 1.0
    corr = scatter = None
    if test_set is not None:
        est = [envsim.discounted_return(t, registry.task) for t in test_set.trajectories]
        corr = pearson(est, test_set.returns)
        scatter = (est, test_set.returns)
    return EvalReport(metrics, corr, heatmap, identified, dict(meta or {}), scatter, oracle, extra,
                      dict(thresholds or {}), require_correlation)
