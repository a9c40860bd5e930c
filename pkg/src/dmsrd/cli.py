"""Command-line entry point: ``dmsrd {demogen,run,eval,report}``.

Layout of an experiment directory (``--out``)::

    config.yaml        resolved configuration and its hash
    demos/             demonstration set
    test_set/          staged test set for the task-reward correlation
    registry/          registry checkpoint, rewritten after every ingestion
    decisions.jsonl    one branch decision per ingested demonstration
    eval/              metrics.csv, summary.json, task_reward.svg
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import shutil
import sys
import tempfile
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import demogen, envsim, evalkit, lifelong
from .errors import ConfigError, DMSRDError, IntegrityError, LookupFailure, NumericalError

log = logging.getLogger("dmsrd")

EXIT_OK = 0
EXIT_FAILED = 1  # thresholds not met, or an I/O problem
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INTEGRITY = 4

TEST_SET_SEED_OFFSET = 10_000
DEMO_ORDERS = ("strategy-major", "interleaved", "shuffled")


# ----------------------------------------------------------------------
# configuration


@dataclass
class EnvConfig:
    id: str = "pendulum-lite"
    horizon: int | None = None
    gamma: float | None = None


@dataclass
class DemoConfig:
    strategies: list = field(default_factory=list)  # builtin strategy ids; empty means all
    per_strategy: int = 1
    order: str = "interleaved"
    mixtures: int = 0
    mixture_weights: list | None = None  # None: flat Dirichlet


@dataclass
class TestSetConfig:
    enabled: bool = True
    per_snapshot: int = 10
    all_strategies: bool = True  # False: only the strategies that appear in the demos


@dataclass
class EvalConfig:
    n_eval_rollouts: int = 10
    test_set: TestSetConfig = field(default_factory=TestSetConfig)
    thresholds: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    out: str = "runs/experiment"
    env: EnvConfig = field(default_factory=EnvConfig)
    demos: DemoConfig = field(default_factory=DemoConfig)
    lifelong: lifelong.LifelongConfig = field(default_factory=lifelong.LifelongConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def hash(self):
        """Stable digest of everything that affects results (``out`` excluded)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_yaml(self):
        head = f"# dmsrd experiment config\n# hash: {self.hash()}\n"
        return head + yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    def validate(self):
        env = make_env(self)
        known = {s.id for s in demogen.builtin_strategies(env.id)}
        missing = [s for s in self.demos.strategies if s not in known]
        if missing:
            raise ConfigError(f"unknown strategy id(s) {missing} for {env.id}")
        if self.demos.order not in DEMO_ORDERS:
            raise ConfigError(f"demos.order must be one of {DEMO_ORDERS}")
        if self.demos.per_strategy < 1 or self.demos.mixtures < 0:
            raise ConfigError("demos.per_strategy must be >= 1 and demos.mixtures >= 0")
        n_base = len(self.demos.strategies) or len(known)
        if self.demos.mixtures and n_base < 2:
            raise ConfigError("mixture demos need at least two base strategies")
        w = self.demos.mixture_weights
        if w is not None:
            w = np.asarray(w, dtype=float)
            if w.shape != (self.demos.mixtures, n_base):
                raise ConfigError(f"demos.mixture_weights must have shape ({self.demos.mixtures}, {n_base})")
            if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1) > 1e-9):
                raise ConfigError("each mixture weight vector must lie on the simplex")
        unknown = set(self.eval.thresholds) - set(evalkit.THRESHOLD_KEYS)
        if unknown:
            raise ConfigError(f"unknown threshold(s) {sorted(unknown)}")
        if self.lifelong.search_budget < 1 or self.lifelong.n_rollouts < 1:
            raise ConfigError("search_budget and n_rollouts must be positive")
        return self


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def _build(cls, data, where):
    """Strictly build dataclass ``cls`` from a mapping; unknown keys are errors."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(data) - {f.name for f in dataclasses.fields(cls)})
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}")
    kw = {}
    for name, value in data.items():
        hint = hints[name]
        path = f"{where}.{name}" if where else name
        kw[name] = _build(hint, value, path) if dataclasses.is_dataclass(hint) else _coerce(value, hint, path)
    return cls(**kw)


def _coerce(value, hint, path):
    args = typing.get_args(hint)
    optional = type(None) in args
    base = next(a for a in args if a is not type(None)) if optional else hint
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path} may not be null")
    if base is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if base in (int, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        if base is int:
            if float(value) != int(value):
                raise ConfigError(f"{path} must be an integer, got {value!r}")
            return int(value)
        return float(value)
    if base is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        return tuple(value)
    if base in (list, dict, str) and not isinstance(value, base):
        raise ConfigError(f"{path} must be a {base.__name__}")
    return value


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


PRESETS = {
    "benchmark-pendulum": {
        "name": "benchmark-pendulum",
        "seed": 0,
        "out": "runs/benchmark-pendulum",
        "env": {"id": "pendulum-lite"},
        "demos": {"strategies": ["hold-center", "hold-left", "hold-right"], "per_strategy": 2,
                  "order": "interleaved", "mixtures": 2,
                  "mixture_weights": [[0.5, 0.5, 0.0], [0.5, 0.0, 0.5]]},
        "lifelong": {"search_budget": 1024, "bcd_steps": 5},
        "eval": {"n_eval_rollouts": 10,
                 "thresholds": {"min_strategies": 3, "max_strategies": 4, "min_identified": 1.0,
                                "min_mixture_branch": 1, "min_correlation": 0.6,
                                "kl_oracle_factor": 1.5, "min_kl_within_oracle": 0.75}},
    },
    "benchmark-lander": {
        "name": "benchmark-lander",
        "seed": 0,
        "out": "runs/benchmark-lander",
        "env": {"id": "lander-lite"},
        "demos": {"strategies": [], "per_strategy": 3, "order": "interleaved"},
        "lifelong": {"search_budget": 1024},
        "eval": {"n_eval_rollouts": 10, "thresholds": {"min_identified": 1.0}},
    },
    "lifelong-desk": {
        "name": "lifelong-desk",
        "seed": 0,
        "out": "runs/lifelong-desk",
        "env": {"id": "pendulum-lite"},
        "demos": {"strategies": ["hold-left", "hold-right", "slow-oscillate"], "per_strategy": 1,
                  "order": "strategy-major", "mixtures": 17},
        "lifelong": {"search_budget": 1024, "epsilon_factor": 2.17, "bcd_steps": 5},
        "eval": {"n_eval_rollouts": 10,
                 "thresholds": {"max_strategies": 6, "min_identified": 1.0, "min_mixture_explained": 0.6}},
    },
}


def config_from_dict(data):
    data = dict(data or {})
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        data = _merge(PRESETS[preset], data)
    try:
        cfg = _build(ExperimentConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(source, seed=None, out=None):
    """``source`` is a preset name or a YAML path. ``seed``/``out`` override the file."""
    if source in PRESETS:
        data = {"preset": source}
    else:
        path = Path(source)
        try:
            data = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found (presets: {sorted(PRESETS)})") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if seed is not None:
        data = {**(data or {}), "seed": seed}
    if out is not None:
        data = {**(data or {}), "out": str(out)}
    return config_from_dict(data)


def make_env(cfg):
    return envsim.make_env(cfg.env.id, horizon=cfg.env.horizon, gamma=cfg.env.gamma)


def demo_strategies(cfg, env):
    ids = cfg.demos.strategies or [s.id for s in demogen.builtin_strategies(env.id)]
    return [demogen.strategy_by_id(env.id, s) for s in ids]


# ----------------------------------------------------------------------
# helpers


def _replace_dir(tmp, target):
    target = Path(target)
    if target.exists():
        old = target.with_name(target.name + ".old")
        shutil.rmtree(old, ignore_errors=True)
        target.replace(old)
        Path(tmp).replace(target)
        shutil.rmtree(old)
    else:
        Path(tmp).replace(target)


def _tmp_dir(target):
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise LookupFailure(f"{path} does not exist") from None
    except ValueError as exc:
        raise IntegrityError(f"unreadable JSON ({exc})", path) from None


def build_demos(cfg, env):
    """The configured demo sequence, renumbered 1..N in arrival order."""
    strategies = demo_strategies(cfg, env)
    d = cfg.demos
    base = demogen.generate_demo_set(env, strategies, d.per_strategy, cfg.seed, shuffle=d.order == "shuffled")
    if d.order == "interleaved":
        per = d.per_strategy
        base = [base[j * per + r] for r in range(per) for j in range(len(strategies))]
    mixes = []
    if d.mixtures:
        mixes = demogen.generate_mixture_demos(env, strategies, d.mixtures, cfg.seed + 1,
                                               weights=d.mixture_weights, include_base=False)
    return [dataclasses.replace(x, arrival_index=k + 1) for k, x in enumerate(base + mixes)]


# ----------------------------------------------------------------------
# commands


def cmd_demogen(cfg, out=None):
    """Write the demo set (and the staged test set) under ``out``."""
    out = Path(out or cfg.out)
    env = make_env(cfg)
    demos = build_demos(cfg, env)
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "strategies": [s.id for s in demo_strategies(cfg, env)]}
    tmp = _tmp_dir(out / "demos")
    try:
        demogen.save_demo_set(tmp, env, demos, meta)
        _replace_dir(tmp, out / "demos")
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if cfg.eval.test_set.enabled:
        strategies = None if cfg.eval.test_set.all_strategies else demo_strategies(cfg, env)
        ts = evalkit.build_test_set(env, cfg.seed + TEST_SET_SEED_OFFSET, strategies,
                                    per_snapshot=cfg.eval.test_set.per_snapshot)
        tmp = _tmp_dir(out / "test_set")
        try:
            evalkit.save_test_set(tmp, env, ts)
            _replace_dir(tmp, out / "test_set")
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise
    _write_text(out / "config.yaml", cfg.to_yaml())
    log.info("wrote %d demonstrations to %s", len(demos), out / "demos")
    return out / "demos"


def _load_demos(cfg, path):
    env, demos, manifest = demogen.load_demo_set(path)
    if manifest.get("config_hash") != cfg.hash():
        raise IntegrityError(f"demo set was generated for config {manifest.get('config_hash')}, "
                             f"not {cfg.hash()}", Path(path) / "manifest.json")
    return env, demos, manifest


def _write_decisions(path, registry):
    _write_text(path, "".join(json.dumps(d.to_dict(), sort_keys=True) + "\n" for d in registry.decisions))


def cmd_run(cfg, out=None, demos_dir=None, resume=False, max_demos=None):
    """Sequential ingestion with a checkpoint after every demonstration.

    ``max_demos`` stops after that many new ingestions (the run can be
    resumed later).
    """
    out = Path(out or cfg.out)
    env, demos, _ = _load_demos(cfg, demos_dir or out / "demos")
    reg_dir = out / "registry"
    registry = None
    if resume and (reg_dir / lifelong.MANIFEST).exists():
        man = _read_json(reg_dir / lifelong.MANIFEST)
        got = man.get("extra", {}).get("config_hash")
        if got != cfg.hash():
            raise IntegrityError(f"checkpoint belongs to config {got}, not {cfg.hash()}", reg_dir / lifelong.MANIFEST)
        registry = lifelong.load_registry(reg_dir)
        log.info("resuming after %d ingested demonstrations", len(registry.weights))
    if registry is None:
        lc = cfg.lifelong
        eps = lc.epsilon
        if eps is None:
            eps, floors = lifelong.calibrate_epsilon(env, cfg.seed, lc.epsilon_factor, lc.n_rollouts)
            log.info("calibrated epsilon %.4g from noise floors %s", eps, np.round(floors, 3).tolist())
        registry = lifelong.Registry.create(env, np.random.default_rng([cfg.seed, 0]), eps, lc)
    done = 0
    for demo in demos:
        if demo.arrival_index in registry.weights:
            continue
        if max_demos is not None and done >= max_demos:
            break
        rng = np.random.default_rng([cfg.seed, demo.arrival_index])
        registry, dec = lifelong.process_demonstration(registry, demo, env, rng)
        lifelong.save_registry(reg_dir, registry, {"config_hash": cfg.hash(), "completed": demo.arrival_index})
        _write_decisions(out / "decisions.jsonl", registry)
        done += 1
        log.info("demo %d: %s, M=%d", dec.index, dec.branch, dec.strategies_after)
    return registry


def cmd_eval(cfg, out=None, registry_dir=None, demos_dir=None, test_set_dir=None):
    """Evaluate a finished run; returns the EvalReport (also written to ``out/eval``)."""
    out = Path(out or cfg.out)
    reg_dir = Path(registry_dir or out / "registry")
    man = _read_json(reg_dir / lifelong.MANIFEST)
    env, demos, demo_man = _load_demos(cfg, demos_dir or out / "demos")
    if man.get("extra", {}).get("config_hash") != demo_man.get("config_hash"):
        raise IntegrityError("registry and demo set come from different configs", reg_dir / lifelong.MANIFEST)
    registry = lifelong.load_registry(reg_dir)
    missing = [d.arrival_index for d in demos if d.arrival_index not in registry.weights]
    if missing:
        raise LookupFailure(f"registry is incomplete; demonstrations {missing} not ingested")
    ts_dir = Path(test_set_dir) if test_set_dir is not None else out / "test_set"
    test_set = None
    if (ts_dir / "manifest.json").exists():
        _, test_set = evalkit.load_test_set(ts_dir)
    else:
        log.warning("no test set at %s; correlation marked absent", ts_dir)
    strategies = [demogen.strategy_by_id(env.id, s) for s in demo_man["strategies"]]
    report = evalkit.evaluate(registry, demos, env, test_set, cfg.eval.n_eval_rollouts, cfg.seed,
                              {"config_hash": cfg.hash(), "name": cfg.name, "seed": cfg.seed},
                              strategies, cfg.eval.thresholds, require_correlation=cfg.eval.test_set.enabled)
    report.write(out / "eval")
    return report


def format_report(summary, decisions=None):
    lines = [f"experiment {summary['meta'].get('name')} (config {summary['meta'].get('config_hash')}, "
             f"seed {summary['meta'].get('seed')})"]
    for d in decisions or []:
        w = " ".join(f"{v:.2f}" for v in d["weights"])
        kl_new = "-" if d["kl_new"] is None else f"{d['kl_new']:.3f}"
        kl_mix = "-" if d["kl_mix"] is None else f"{d['kl_mix']:.3f}"
        lines.append(f"  demo {d['index']:3d}  {d['branch']:<17s} M={d['strategies_after']}  "
                     f"kl_mix={kl_mix}  kl_new={kl_new}  w=[{w}]")

    def fmt(v):
        return "absent" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

    for key in ("strategies", "strategies_identified", "task_reward_correlation", "mixture_explained",
                "mixture_branch_count", "kl_within_oracle", "mean_kl", "mean_env_return"):
        lines.append(f"{key:>24s}: {fmt(summary.get(key))}")
    if summary.get("heatmap") is not None:
        lines.append("heatmap (row: strategy reward, column: founding demo)")
        lines += ["  " + " ".join(f"{v:5.2f}" for v in row) for row in summary["heatmap"]]
    for name, ok in sorted(summary.get("checks", {}).items()):
        lines.append(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg, out=None):
    out = Path(out or cfg.out)
    summary = _read_json(out / "eval" / "summary.json")
    decisions = []
    path = out / "decisions.jsonl"
    if path.exists():
        decisions = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return format_report(summary, decisions)


# ----------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="dmsrd", description="Lifelong multi-strategy reward distillation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help=f"YAML file or preset ({', '.join(sorted(PRESETS))})")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="experiment directory (overrides the config)")
        sp.add_argument("--workers", type=int, default=1, help="cap on numerical library threads")

    common(sub.add_parser("demogen", help="generate the demonstration and test sets"))
    run = sub.add_parser("run", help="ingest demonstrations")
    common(run)
    run.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    run.add_argument("--demos", help="demo-set directory (default OUT/demos)")
    run.add_argument("--max-demos", type=int, help="stop after this many new ingestions")
    ev = sub.add_parser("eval", help="evaluate a finished run")
    common(ev)
    ev.add_argument("--registry", help="registry checkpoint (default OUT/registry)")
    ev.add_argument("--demos", help="demo-set directory (default OUT/demos)")
    ev.add_argument("--test-set", help="test-set directory (default OUT/test_set)")
    common(sub.add_parser("report", help="print the evaluation summary"))
    return p


def _dispatch(args):
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    if args.command == "demogen":
        print(cmd_demogen(cfg))
        return EXIT_OK
    if args.command == "run":
        reg = cmd_run(cfg, demos_dir=args.demos, resume=args.resume, max_demos=args.max_demos)
        print(f"{len(reg.weights)} demonstrations ingested, {reg.n_strategies} strategies")
        return EXIT_OK
    if args.command == "eval":
        report = cmd_eval(cfg, registry_dir=args.registry, demos_dir=args.demos, test_set_dir=args.test_set)
        summary = report.summary()
        print(format_report(summary), end="")
        return EXIT_OK if summary["passed"] else EXIT_FAILED
    print(cmd_report(cfg), end="")
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=max(1, args.workers)):
            return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (IntegrityError, LookupFailure) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DMSRDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
