"""Scripted heterogeneous demonstrators and demonstration-set generation.

Every strategy is a deterministic state-feedback rule plus Gaussian
exploration noise. Pendulum strategies are LQR balancers around different
cart set-points, or balancers tracking a relay velocity command that makes
the cart shuttle back and forth. Lander strategies are PD rules on a
descent-rate profile and a lateral set-point that both depend on altitude.

The balancing gains come from a continuous-time LQR on the linearized
cart-pole (Q = diag(1, 10, 1, 1), R = 1 for position hold; Q = diag(10, 1, 1),
R = 1 on (theta, x_dot, theta_dot) for velocity tracking).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envsim
from .errors import ConfigError, ContractError, IntegrityError

EXPLORATION_STD = 0.05

# u = K . (x - x_ref, theta, x_dot, theta_dot)
HOLD_GAINS = np.array([1.0, 10.683, 1.721, 2.824])
# u = K . (theta, x_dot - v_cmd, theta_dot)
VELOCITY_GAINS = np.array([8.556, 1.0, 2.283])


@dataclass(frozen=True, eq=False)
class Demonstration:
    trajectory: envsim.Trajectory
    arrival_index: int
    true_strategy_label: int | None = None
    true_weights: tuple | None = None
    source: str = ""


@dataclass(frozen=True, eq=False)
class ScriptedPolicy:
    """A scripted controller viewed as a Gaussian policy (clamped mean, fixed std)."""

    env: envsim.EnvSpec
    rule: object
    explore_std: float = EXPLORATION_STD

    @property
    def action_dim(self):
        return self.env.action_dim

    @property
    def std(self):
        return np.full(self.env.action_dim, self.explore_std)

    def mean(self, states):
        s = np.asarray(states, dtype=float)
        out = self.rule(np.atleast_2d(s))
        out = self.env.clip_action(out)
        return out if s.ndim > 1 else out[0]


@dataclass(frozen=True)
class ScriptedStrategy:
    id: str
    env_id: str
    rule: object = field(repr=False)
    explore_std: float = EXPLORATION_STD
    description: str = ""

    def policy(self, env, explore_std=None):
        if env.id != self.env_id:
            raise ContractError(f"strategy {self.id} is for {self.env_id}, not {env.id}")
        std = self.explore_std if explore_std is None else explore_std
        return ScriptedPolicy(env, self.rule, std)


# ----------------------------------------------------------------------
# pendulum-lite rules


def _hold(x_ref):
    def rule(s):
        err = s.copy()
        err[:, 0] -= x_ref
        return (err @ HOLD_GAINS)[:, None]
    return rule


def _shuttle(amplitude, speed):
    def rule(s):
        x, xd = s[:, 0], s[:, 2]
        # start rightward; only a clear leftward motion flips the heading
        heading = np.where(xd > -0.2 * speed, 1.0, -1.0)
        v_cmd = np.where(np.abs(x) > amplitude, -np.sign(x), heading) * speed
        feat = np.stack([s[:, 1], xd - v_cmd, s[:, 3]], axis=1)
        return (feat @ VELOCITY_GAINS)[:, None]
    return rule


# ----------------------------------------------------------------------
# lander-lite rules

HOVER_THRUST = envsim.LANDER_GRAVITY / envsim.MAIN_ACCEL


def _lander_pd(descent_rate, x_target, k_vy=3.0, k_x=1.5, k_vx=2.0):
    """``descent_rate(y)`` and ``x_target(y)`` give the per-altitude set-points."""
    def rule(s):
        x, y, vx, vy = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
        main = HOVER_THRUST + k_vy * (descent_rate(y) - vy)
        lateral = k_x * (x_target(y) - x) - k_vx * vx
        return np.stack([main, lateral], axis=1)
    return rule


def _two_burn(s):
    y, vy = s[:, 1], s[:, 3]
    first = (y < 0.75) & (y > 0.45) & (vy < -0.25)
    second = (y < 0.25) & (vy < -0.12)
    main = np.where(first | second, 1.0, 0.0)
    lateral = -1.5 * s[:, 0] - 2.0 * s[:, 2]
    return np.stack([main, lateral], axis=1)


def _const(v):
    return lambda y: np.full_like(y, v)


_CATALOG = {
    "pendulum-lite": [
        ScriptedStrategy("hold-center", "pendulum-lite", _hold(0.0),
                         description="LQR balance at x = 0"),
        ScriptedStrategy("hold-left", "pendulum-lite", _hold(-1.0),
                         description="LQR balance at x = -1"),
        ScriptedStrategy("hold-right", "pendulum-lite", _hold(1.0),
                         description="LQR balance at x = +1"),
        ScriptedStrategy("slow-oscillate", "pendulum-lite", _shuttle(0.6, 0.5),
                         description="balance while shuttling over |x| <= 0.6 at 0.5 m/s"),
        ScriptedStrategy("fast-oscillate", "pendulum-lite", _shuttle(0.25, 1.2),
                         description="balance while shuttling over |x| <= 0.25 at 1.2 m/s"),
    ],
    "lander-lite": [
        ScriptedStrategy("steep-descent", "lander-lite",
                         _lander_pd(lambda y: np.where(y > 0.3, -0.8, -0.15), _const(0.0)),
                         description="fast vertical drop, late brake"),
        ScriptedStrategy("left-arc", "lander-lite",
                         _lander_pd(_const(-0.15), lambda y: np.where(y > 0.4, -0.6, 0.0)),
                         description="drift left while high, return to pad"),
        ScriptedStrategy("right-arc", "lander-lite",
                         _lander_pd(_const(-0.15), lambda y: np.where(y > 0.4, 0.6, 0.0)),
                         description="drift right while high, return to pad"),
        ScriptedStrategy("hover-then-drop", "lander-lite",
                         _lander_pd(lambda y: np.where(y > 0.6, -0.4, np.where(y > 0.4, -0.04, -0.2)),
                                    _const(0.0)),
                         description="quick drop to 0.6, near-hover band, then settle"),
        ScriptedStrategy("two-burn", "lander-lite", _two_burn,
                         description="free fall with two full-thrust braking burns"),
    ],
}


def builtin_strategies(env_id):
    try:
        return list(_CATALOG[env_id])
    except KeyError:
        raise ConfigError(f"no scripted strategies for environment {env_id!r}") from None


def strategy_by_id(env_id, strategy_id):
    for s in builtin_strategies(env_id):
        if s.id == strategy_id:
            return s
    raise ConfigError(f"unknown strategy {strategy_id!r} for {env_id}")


def mixture_rule(rules, weights):
    """Eq.-2 style executed mixture of scripted rules: weighted sum of clamped means."""
    weights = np.asarray(weights, dtype=float)

    def rule(s):
        return sum(w * r(s) for w, r in zip(weights, rules) if w != 0.0)

    return rule


# ----------------------------------------------------------------------
# demo sets


def _spawn(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_demo_set(env, strategies, per_strategy, seed, shuffle=False):
    """``per_strategy`` rollouts of each strategy, labelled by strategy position.

    Arrival order is strategy-major unless ``shuffle``.
    """
    if per_strategy < 1:
        raise ContractError("per_strategy must be >= 1")
    rngs = _spawn(seed, len(strategies) * per_strategy + 1)
    items = []
    for label, strat in enumerate(strategies):
        pol = strat.policy(env)
        for r in range(per_strategy):
            traj = envsim.rollout(env, pol, rng=rngs[label * per_strategy + r],
                                  seed=[seed, label, r])
            one_hot = tuple(float(k == label) for k in range(len(strategies)))
            items.append((traj, label, one_hot, strat.id))
    if shuffle:
        order = rngs[-1].permutation(len(items))
        items = [items[i] for i in order]
    return [Demonstration(t, i + 1, lab, w, src) for i, (t, lab, w, src) in enumerate(items)]


def generate_mixture_demos(env, base, n_mixtures, seed, weights=None, start_index=1,
                           include_base=True):
    """Base-strategy demos first, then ``n_mixtures`` executed controller mixtures.

    Mixture weights are flat-Dirichlet unless given explicitly in ``weights``.
    Mixture demos carry ``true_strategy_label=None`` and their weights as
    ``true_weights``.
    """
    if len(base) < 2:
        raise ContractError("mixture demos need at least two base strategies")
    rngs = _spawn(seed, len(base) + 2 * n_mixtures)
    demos = []
    k = len(base)
    if include_base:
        for j, strat in enumerate(base):
            traj = envsim.rollout(env, strat.policy(env), rng=rngs[j], seed=[seed, "base", j])
            w = tuple(float(i == j) for i in range(k))
            demos.append(Demonstration(traj, start_index + len(demos), j, w, strat.id))
    for m in range(n_mixtures):
        if weights is not None:
            w = np.asarray(weights[m], dtype=float)
        else:
            w = rngs[k + 2 * m].dirichlet(np.ones(k))
        rules = [lambda s, r=strat.rule, e=env: e.clip_action(r(s)) for strat in base]
        std = float(np.exp(np.mean([np.log(s.explore_std) for s in base])))
        pol = ScriptedPolicy(env, mixture_rule(rules, w), std)
        traj = envsim.rollout(env, pol, rng=rngs[k + 2 * m + 1], seed=[seed, "mix", m])
        label = int(np.argmax(w)) if np.max(w) == 1.0 else None
        demos.append(Demonstration(traj, start_index + len(demos), label, tuple(float(v) for v in w),
                                   "mix(" + ",".join(s.id for s in base) + ")"))
    return demos


def oracle_policy(env, demo, strategies):
    """The scripted policy (or executed mixture) that generated ``demo``."""
    if demo.true_weights is None:
        raise ContractError("demo has no generator metadata")
    w = np.asarray(demo.true_weights, dtype=float)
    if len(w) != len(strategies):
        raise ContractError("true_weights length does not match the strategy list")
    nz = np.flatnonzero(w)
    if len(nz) == 1:
        return strategies[nz[0]].policy(env)
    rules = [lambda s, r=strat.rule: env.clip_action(r(s)) for strat in strategies]
    std = float(np.exp(np.mean([np.log(s.explore_std) for s in strategies])))
    return ScriptedPolicy(env, mixture_rule(rules, w), std)


# ----------------------------------------------------------------------
# persistence
#
# <dir>/manifest.json   {"format": "dmsrd-demoset", "env": ..., "seed": ..., "strategies": [...],
#                        "demos": [{"file", "arrival_index", "label", "true_weights", "source"}]}
# <dir>/demo_XXXX.jsonl  trajectory files (envsim format)

DEMOSET_FORMAT = "dmsrd-demoset"


def save_demo_set(directory, env, demos, meta=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for d in demos:
        name = f"demo_{d.arrival_index:04d}.jsonl"
        envsim.write_trajectory(directory / name, d.trajectory,
                                {"arrival_index": d.arrival_index})
        entries.append({"file": name, "arrival_index": d.arrival_index,
                        "label": d.true_strategy_label,
                        "true_weights": None if d.true_weights is None else list(d.true_weights),
                        "source": d.source})
    manifest = {"format": DEMOSET_FORMAT, "env": env.to_dict(), "demos": entries, **(meta or {})}
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    tmp.replace(directory / "manifest.json")
    return directory / "manifest.json"


def load_demo_set(directory):
    """Returns ``(env, demos, manifest)``."""
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise IntegrityError(f"unreadable demo-set manifest ({exc})", path) from exc
    if manifest.get("format") != DEMOSET_FORMAT:
        raise IntegrityError("not a demo-set manifest", path)
    e = manifest["env"]
    env = envsim.make_env(e["id"], horizon=e["horizon"], gamma=e["gamma"])
    demos = []
    for entry in manifest["demos"]:
        traj, _ = envsim.read_trajectory(directory / entry["file"])
        tw = entry.get("true_weights")
        demos.append(Demonstration(traj, entry["arrival_index"], entry.get("label"),
                                   None if tw is None else tuple(tw), entry.get("source", "")))
    return env, demos, manifest
