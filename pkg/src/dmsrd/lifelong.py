"""Lifelong ingestion loop: mixture-vs-new-strategy arbitration and joint reward training.

A :class:`Registry` is treated as a value. ``process_demonstration`` and
``joint_update`` work on a deep copy and return it, so a failure anywhere
leaves the caller's registry untouched.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import envsim, mixture
from .errors import (ContractError, IntegrityError, LookupFailure, NumericalError, PreconditionError,
                     RegistryIntegrityError, TrainingError)
from .policy import GaussianPolicy, PPOConfig, PolicyTrainer, policy_from_tensors, policy_tensors
from .rewardlearn import (AIRLConfig, BCDData, RewardDecomposition, RewardNet, StrategyModel, bcd_loss_t,
                          combined_reward, msrd_loss_t, train_new_strategy_airl, transitions)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CHECKPOINT_FORMAT = "dmsrd-registry"
CHECKPOINT_VERSION = 1


@dataclass
class LifelongConfig:
    epsilon: float | None = None  # None: calibrate from scripted self-KL
    epsilon_factor: float = 2.0
    alpha: float = 0.01
    hidden: tuple = (32, 32)
    search_budget: int = 64
    n_rollouts: int = 5
    joint_epochs: int = 10
    reward_lr: float = 1e-3
    bcd_lr: float = 1e-3
    bcd_steps: int = 1
    msrd_minibatches: int = 4
    generator_std: float | None = None  # None: generators sample at each policy's own stddev
    airl: AIRLConfig = field(default_factory=AIRLConfig)
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(policy_lr=1e-6))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["airl"]["hidden"] = list(self.airl.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        airl = dict(d.pop("airl", {}))
        airl_ppo = PPOConfig(**airl.pop("ppo", {}))
        if "hidden" in airl:
            airl["hidden"] = tuple(airl["hidden"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        ppo = PPOConfig(**d.pop("ppo", {}))
        return cls(**d, airl=AIRLConfig(**airl, ppo=airl_ppo), ppo=ppo)


@dataclass
class StrategyRecord:
    """Strategy reward head, policy, shaping head and value baseline of one strategy."""

    reward: RewardNet
    policy: GaussianPolicy
    shaping: dc.ParamSet
    value_params: dc.ParamSet
    pure_index: int


@dataclass
class Decision:
    index: int
    branch: str  # "first", "mixture", "mixture-over-new", "new"
    weights: list
    kl_mix: float | None
    kl_new: float | None
    epsilon: float
    strategies_before: int
    strategies_after: int

    def to_dict(self):
        return asdict(self)


@dataclass
class Registry:
    env: envsim.EnvSpec
    task: RewardNet
    h_spec: dc.MLPSpec
    epsilon: float
    config: LifelongConfig = field(default_factory=LifelongConfig)
    strategies: list = field(default_factory=list)
    weights: dict = field(default_factory=dict)
    demos: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    discarded: list = field(default_factory=list)

    @classmethod
    def create(cls, env, rng, epsilon, config=None):
        config = config or LifelongConfig()
        task = RewardNet.create(env, rng, config.hidden, bounded=False)
        return cls(env, task, dc.mlp(env.state_dim, 1, config.hidden), float(epsilon), config)

    @property
    def n_strategies(self):
        return len(self.strategies)

    @property
    def policies(self):
        return [s.policy for s in self.strategies]

    @property
    def pure_indices(self):
        return [s.pure_index for s in self.strategies]

    def decomposition(self):
        return RewardDecomposition(self.task, tuple(s.reward for s in self.strategies), self.config.alpha)

    def padded_weights(self, index):
        w = np.asarray(self.weights[index], dtype=float)
        return np.concatenate([w, np.zeros(self.n_strategies - len(w))])

    def copy(self):
        return copy.deepcopy(self)

    def check(self):
        """Raise RegistryIntegrityError if a structural invariant is broken."""
        M = self.n_strategies
        prev = 0
        for k, m in enumerate(self.history):
            if m < prev or m > prev + 1 or m > k + 1:
                raise RegistryIntegrityError(f"strategy-count history broken at step {k}: {self.history}")
            prev = m
        for i, w in self.weights.items():
            w = np.asarray(w)
            if np.any(w < 0) or abs(w.sum() - 1.0) > mixture.SIMPLEX_TOL or len(w) > M:
                raise RegistryIntegrityError(f"weight vector of demo {i} is not on the simplex: {w}")
        for j, s in enumerate(self.strategies):
            if s.pure_index not in self.weights:
                raise RegistryIntegrityError(f"pure demo {s.pure_index} of strategy {j} missing")
            w = self.padded_weights(s.pure_index)
            if w[j] != 1.0:
                raise RegistryIntegrityError(f"pure demo {s.pure_index} is not one-hot on strategy {j}")
        return True


# ----------------------------------------------------------------------
# epsilon


def calibrate_epsilon(env, seed=0, factor=2.0, n_rollouts=5, strategies=None, n_demos=3):
    """``factor`` times the largest scripted same-distribution KL of the env.

    Each builtin controller generates ``n_demos`` demonstrations and is
    scored against each with ``trajectory_kl``; the mean is what estimator
    noise alone produces when the policy is exactly right. Returns
    ``(epsilon, per-strategy floors)``.
    """
    from . import demogen

    strategies = strategies or demogen.builtin_strategies(env.id)
    floors = []
    for k, strat in enumerate(strategies):
        pol = strat.policy(env)
        vals = []
        for r in range(n_demos):
            rng = np.random.default_rng([seed, k, r])
            demo = envsim.rollout(env, pol, env.horizon, rng)
            vals.append(mixture.trajectory_kl(demo, pol, env, n_rollouts, rng))
        floors.append(float(np.mean(vals)))
    return factor * max(max(floors), 0.0), floors


# ----------------------------------------------------------------------
# the arbitration step


@dataclass
class Operations:
    """The learning primitives the arbitration step calls; tests swap in stubs."""

    config: LifelongConfig

    def train_new(self, traj, env, rng):
        cfg = self.config
        kl_fn = (lambda p, r: mixture.trajectory_kl(traj, p, env, cfg.n_rollouts, r))
        return train_new_strategy_airl(traj, env, rng=rng, config=cfg.airl, kl_fn=kl_fn)

    def search(self, traj, policies, env, rng):
        cfg = self.config
        return mixture.optimize_mixture_weights(traj, policies, env, cfg.search_budget, rng, cfg.n_rollouts)

    def kl(self, traj, policy, env, rng):
        return mixture.trajectory_kl(traj, policy, env, self.config.n_rollouts, rng)

    def joint_update(self, registry, env, rng):
        return joint_update(registry, env, rng, self.config.joint_epochs)


def _as_demo(demo):
    traj = getattr(demo, "trajectory", demo)
    index = getattr(demo, "arrival_index", None)
    if index is None:
        raise ContractError("demonstration needs an arrival index")
    return traj, int(index)


def _new_record(model, index):
    return StrategyRecord(model.reward, model.policy, model.shaping, model.value_params, index)


def process_demonstration(registry, demo, env, rng, ops=None):
    """Explain one arriving demonstration; returns ``(registry', Decision)``.

    ``demo`` is anything with ``trajectory`` and ``arrival_index``; no other
    field is read.
    """
    traj, i = _as_demo(demo)
    if env.id != registry.env.id or (traj.env_id and traj.env_id != env.id):
        raise ContractError(f"demonstration from {traj.env_id or env.id} cannot join a {registry.env.id} registry")
    if i in registry.weights:
        raise ContractError(f"demonstration {i} was already ingested")
    ops = ops or Operations(registry.config)
    reg = registry.copy()
    M = reg.n_strategies
    kl_mix = kl_new = None
    if M == 0:
        model = ops.train_new(traj, env, rng)
        reg.strategies.append(_new_record(model, i))
        w, branch = np.ones(1), "first"
    else:
        found, _ = ops.search(traj, reg.policies, env, rng)
        w = np.asarray(getattr(found, "w", found), dtype=float)
        sigma = getattr(found, "sigma", None)
        kl_mix = float(ops.kl(traj, mixture.mixture_policy(w, reg.policies, sigma), env, rng))
        if kl_mix < reg.epsilon:
            branch = "mixture"
        else:
            model = ops.train_new(traj, env, rng)
            kl_new = float(ops.kl(traj, model.policy, env, rng))
            if kl_mix < kl_new:
                branch = "mixture-over-new"
                reg.discarded.append({"index": i, "kl_new": kl_new})
            else:
                reg.strategies.append(_new_record(model, i))
                w, branch = np.eye(M + 1)[M], "new"
    reg.weights[i] = w
    reg.demos[i] = traj
    reg.history.append(reg.n_strategies)
    if reg.n_strategies >= 2:
        reg = ops.joint_update(reg, env, rng)
    decision = Decision(i, branch, [float(v) for v in w], kl_mix, kl_new, reg.epsilon, M, reg.n_strategies)
    reg.decisions.append(decision)
    reg.check()
    log.info("demo %d: %s (M %d -> %d, kl_mix=%s, kl_new=%s)", i, branch, M, reg.n_strategies, kl_mix, kl_new)
    return reg, decision


# ----------------------------------------------------------------------
# joint reward / policy training


def msrd_demo_sets(registry):
    """Arrival indices whose stored weights are one-hot on each strategy.

    Demos explained by a genuine mixture have no policy of their own and
    only enter the between-class term.
    """
    sets = [[] for _ in range(registry.n_strategies)]
    for i in sorted(registry.weights):
        w = registry.padded_weights(i)
        hot = np.flatnonzero(w == 1.0)
        if len(hot) == 1:
            sets[hot[0]].append(i)
    return sets


def bcd_batch(registry):
    """Stacked data for the between-class term over every stored demo."""
    order = sorted(registry.weights)
    data = BCDData.build(registry.env, [registry.demos[i] for i in order], registry.env.gamma)
    rows = {i: r for r, i in enumerate(order)}
    W = np.stack([registry.padded_weights(i) for i in order])
    pure = [rows[s.pure_index] for s in registry.strategies]
    return data, list(range(len(order))), pure, W


def _subset_transitions(batch, idx):
    from .rewardlearn import _subset
    return _subset(batch, idx)


def _generator(policy, std):
    """The exploring generator of a strategy: its mean network at a fixed stddev."""
    if std is None:
        return policy
    return policy.with_params(log_std=np.full(policy.action_dim, np.log(std)))


def joint_update(registry, env, rng, epochs):
    """``epochs`` rounds of: generator rollouts, an MSRD step, a BCD step and a policy step per strategy.

    Generators share each strategy's mean network but sample at
    ``config.generator_std``; the policy step updates the mean only, the
    strategy keeps its own stddev.
    """
    M = registry.n_strategies
    if M < 2:
        raise PreconditionError("joint reward training needs at least two strategies")
    reg = registry.copy()
    if epochs == 0:
        return reg
    cfg = reg.config
    decomp = reg.decomposition()
    theta = {"theta": decomp.theta(), "shaping": {str(j): s.shaping for j, s in enumerate(reg.strategies)}}
    demo_sets = msrd_demo_sets(reg)
    bcd_data, bcd_rows, bcd_pure, bcd_w = bcd_batch(reg)
    value_spec = dc.mlp(env.state_dim, 1, cfg.airl.hidden)
    trainers = [PolicyTrainer(_generator(s.policy, cfg.generator_std), value_spec, s.value_params, cfg.ppo)
                for s in reg.strategies]
    msrd_opt, bcd_opt = dc.AdamState(), dc.AdamState()
    trace = []
    try:
        for epoch in range(epochs):
            gens = [t.collect(rng, env.horizon) for t in trainers]
            demo_b = [transitions([reg.demos[i] for i in demo_sets[j]], trainers[j].policy, env)
                      for j in range(M)]
            gen_b = [transitions(gens[j], trainers[j].policy, env) for j in range(M)]
            msrd_val = np.nan
            n_mb = max(1, cfg.msrd_minibatches)
            orders = [rng.permutation(len(g)) for g in gen_b]
            for k in range(n_mb):
                gsub = [_subset_transitions(g, o[k::n_mb]) for g, o in zip(gen_b, orders)]
                msrd_val, grads = dc.gradient(
                    lambda p: msrd_loss_t(decomp, p["theta"], p["shaping"], reg.h_spec, demo_b, gsub, env.gamma),
                    theta)
                theta, msrd_opt = dc.optimizer_step(theta, grads, msrd_opt, cfg.reward_lr)
            bcd_val = np.nan
            for _ in range(cfg.bcd_steps):
                strat = theta["theta"]["strategies"]
                bcd_val, g_s = dc.gradient(
                    lambda p: bcd_loss_t(decomp, p, bcd_data, bcd_rows, bcd_pure, bcd_w), strat)
                strat, bcd_opt = dc.optimizer_step(strat, g_s, bcd_opt, cfg.bcd_lr)
                theta["theta"]["strategies"] = strat
            decomp = decomp.with_theta(theta["theta"])
            scores = [trainers[j].update(gens[j], combined_reward(decomp, j), rng) for j in range(M)]
            trace.append({"epoch": epoch, "msrd": msrd_val, "bcd": bcd_val, "policy": scores})
    except NumericalError as exc:
        raise TrainingError(f"joint update diverged: {exc}", trace) from exc
    reg.task = decomp.task
    for j, s in enumerate(reg.strategies):
        s.reward = decomp.strategies[j]
        s.shaping = dc.ParamSet(theta["shaping"][str(j)])
        s.policy = s.policy.with_params(params=trainers[j].policy.params)
        s.value_params = trainers[j].value_params
    return reg


def explain(registry, arrival_index):
    """Stored weights zero-padded to the current strategy count, and the branch that produced them."""
    if arrival_index not in registry.weights:
        raise LookupFailure(f"demonstration {arrival_index} has not been ingested")
    decision = next((d for d in registry.decisions if d.index == arrival_index), None)
    return registry.padded_weights(arrival_index), decision.branch if decision else None


def assigned_policy(registry, arrival_index):
    """The policy that explains a demo: its own strategy's policy, or the stored mixture."""
    w, _ = explain(registry, arrival_index)
    hot = np.flatnonzero(w == 1.0)
    if len(hot) == 1:
        return registry.strategies[hot[0]].policy
    return mixture.mixture_policy(w, registry.policies)


def run_lifelong(registry, demos, env, seed, ops=None, on_step=None):
    """Ingest ``demos`` in order; ingestion ``i`` uses the stream ``SeedSequence([seed, i])``."""
    for demo in demos:
        _, i = _as_demo(demo)
        registry, _ = process_demonstration(registry, demo, env, np.random.default_rng([seed, i]), ops)
        if on_step is not None:
            on_step(registry, demo)
    return registry


# ----------------------------------------------------------------------
# checkpoints


def _atomic_dir(target):
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))


def _json_float(x):
    return None if x is None else float(x)


def manifest(registry):
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "env": registry.env.to_dict(),
        "epsilon": registry.epsilon,
        "config": registry.config.to_dict(),
        "strategy_count": registry.n_strategies,
        "pure_indices": registry.pure_indices,
        "weights": {str(i): [float(v) for v in registry.weights[i]] for i in sorted(registry.weights)},
        "history": list(registry.history),
        "decisions": [d.to_dict() for d in registry.decisions],
        "discarded": registry.discarded,
        "task_spec": registry.task.spec.to_dict(),
        "h_spec": registry.h_spec.to_dict(),
        "strategies": [{"reward_spec": s.reward.spec.to_dict(), "policy_spec": s.policy.spec.to_dict(),
                        "pure_index": s.pure_index} for s in registry.strategies],
    }


def save_registry(directory, registry, extra=None):
    """Write a checkpoint directory atomically (temp directory, then rename)."""
    directory = Path(directory)
    tmp = _atomic_dir(directory)
    try:
        dc.save_tensors(tmp / "task.tensors", dc.params_to_tensors("task", registry.task.params),
                        {"kind": "task-reward"})
        for j, s in enumerate(registry.strategies):
            t = {**dc.params_to_tensors("reward", s.reward.params), **policy_tensors("policy", s.policy),
                 **dc.params_to_tensors("shaping", s.shaping), **dc.params_to_tensors("value", s.value_params)}
            dc.save_tensors(tmp / f"strategy_{j:03d}.tensors", t, {"kind": "strategy", "index": j})
        demo_t, demo_meta = {}, {}
        for i in sorted(registry.demos):
            d = registry.demos[i]
            for name in ("states", "actions", "env_rewards", "final_state"):
                demo_t[f"demo/{i}/{name}"] = getattr(d, name)
            demo_meta[str(i)] = {"gamma": d.gamma, "env_id": d.env_id,
                                 "seed": d.seed if isinstance(d.seed, (int, str, type(None))) else str(d.seed)}
        dc.save_tensors(tmp / "demos.tensors", demo_t, {"kind": "demos", "demos": demo_meta})
        man = manifest(registry)
        if extra:
            man["extra"] = extra
        with open(tmp / MANIFEST, "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if directory.exists():
            old = directory.with_name(directory.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(directory, old)
            os.replace(tmp, directory)
            shutil.rmtree(old)
        else:
            os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_registry(directory):
    directory = Path(directory)
    path = directory / MANIFEST
    try:
        with open(path) as fh:
            man = json.load(fh)
    except FileNotFoundError:
        raise LookupFailure(f"no registry checkpoint at {directory}") from None
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"unreadable manifest: {exc}", path) from None
    if man.get("format") != CHECKPOINT_FORMAT or man.get("version") != CHECKPOINT_VERSION:
        raise IntegrityError("not a registry checkpoint", path)
    try:
        e = man["env"]
        env = envsim.make_env(e["id"], horizon=e["horizon"], gamma=e["gamma"], dt=e["dt"])
        config = LifelongConfig.from_dict(man["config"])
        task_t, _ = dc.load_tensors(directory / "task.tensors")
        task = RewardNet(env, dc.MLPSpec.from_dict(man["task_spec"]), dc.params_from_tensors("task", task_t))
        reg = Registry(env, task, dc.MLPSpec.from_dict(man["h_spec"]), man["epsilon"], config)
        for j, s in enumerate(man["strategies"]):
            t, _ = dc.load_tensors(directory / f"strategy_{j:03d}.tensors")
            pick = lambda pre: {k: v for k, v in t.items() if k.startswith(pre + "/")}
            reward = RewardNet(env, dc.MLPSpec.from_dict(s["reward_spec"]), dc.params_from_tensors("reward", pick("reward")))
            pol = policy_from_tensors("policy", pick("policy"), env, dc.MLPSpec.from_dict(s["policy_spec"]))
            reg.strategies.append(StrategyRecord(reward, pol, dc.params_from_tensors("shaping", pick("shaping")),
                                                 dc.params_from_tensors("value", pick("value")), s["pure_index"]))
        demo_t, demo_meta = dc.load_tensors(directory / "demos.tensors")
        for key, m in demo_meta["demos"].items():
            i = int(key)
            reg.demos[i] = envsim.Trajectory(*(demo_t[f"demo/{i}/{n}"] for n in ("states", "actions", "env_rewards")),
                                             m["gamma"], demo_t[f"demo/{i}/final_state"], m["env_id"], m["seed"])
        reg.weights = {int(i): np.asarray(w) for i, w in man["weights"].items()}
        reg.history = list(man["history"])
        reg.decisions = [Decision(**d) for d in man["decisions"]]
        reg.discarded = list(man["discarded"])
    except (KeyError, TypeError, ValueError) as exc:
        raise IntegrityError(f"inconsistent registry checkpoint: {exc}", path) from None
    if set(reg.weights) != set(reg.demos):
        raise RegistryIntegrityError("demo table and weight table disagree", path)
    reg.check()
    return reg
