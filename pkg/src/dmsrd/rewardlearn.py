"""AIRL discriminators, the shared-task/strategy reward decomposition and its losses.

Losses come in two forms: a ``*_t`` builder that takes parameter tensors and
returns a taped scalar (used for gradients), and a plain wrapper returning a
float for the current parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import envsim
from .errors import ContractError, NumericalError, PreconditionError, RegistryIntegrityError, TrainingError
from .policy import GaussianPolicy, PPOConfig, PolicyTrainer, behavior_clone, log_prob

log = logging.getLogger(__name__)

LOGIT_CLIP = 20.0
DEFAULT_ALPHA = 0.01


@dataclass(frozen=True, eq=False)
class RewardNet:
    """State-only reward ``R(s)``; batch-evaluates a (N, state_dim) matrix."""

    env: envsim.EnvSpec
    spec: dc.MLPSpec
    params: dc.ParamSet

    @classmethod
    def create(cls, env, rng, hidden=(32, 32), bounded=False):
        spec = dc.mlp(env.state_dim, 1, hidden, "tanh" if bounded else "identity")
        return cls(env, spec, dc.init_params(spec, rng, out_scale=0.1))

    @property
    def bounded(self):
        return self.spec.output_activation == "tanh"

    def __call__(self, states):
        return dc.forward(self.spec, self.params, envsim.normalize(self.env, states))[..., 0]

    def forward_t(self, params, states_n):
        return dc.forward_t(self.spec, params, states_n)[:, 0]

    def with_params(self, params):
        return replace(self, params=params)


def _value_forward_t(spec, params, states_n):
    return dc.forward_t(spec, params, states_n)[:, 0]


@dataclass(frozen=True, eq=False)
class AIRLDiscriminator:
    """``D = exp(f) / (exp(f) + pi(a|s))`` with ``f = g(s) + gamma h(s') - h(s)``."""

    g: RewardNet
    h_spec: dc.MLPSpec
    h_params: dc.ParamSet
    gamma: float

    @classmethod
    def create(cls, env, rng, hidden=(32, 32), bounded_reward=True):
        g = RewardNet.create(env, rng, hidden, bounded=bounded_reward)
        h_spec = dc.mlp(env.state_dim, 1, hidden)
        return cls(g, h_spec, dc.init_params(h_spec, rng, out_scale=0.1), env.gamma)

    def h(self, states):
        return dc.forward(self.h_spec, self.h_params, envsim.normalize(self.g.env, states))[..., 0]

    def f(self, s, s_next):
        return self.g(s) + self.gamma * self.h(s_next) - self.h(s)


@dataclass(frozen=True, eq=False)
class Transitions:
    """(s, a, s') rows, their normalized states, and ``log pi(a|s)`` under a fixed policy."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    states_n: np.ndarray
    next_states_n: np.ndarray
    logp: np.ndarray

    def __len__(self):
        return len(self.states)


def transitions(trajs, policy, env=None):
    trajs = [trajs] if isinstance(trajs, envsim.Trajectory) else list(trajs)
    if not trajs:
        raise ContractError("empty transition batch")
    env = env or policy.env
    S = np.vstack([t.states for t in trajs])
    A = np.vstack([t.actions for t in trajs])
    S2 = np.vstack([t.next_states for t in trajs])
    logp = log_prob(policy, S, A)
    if not np.all(np.isfinite(logp)):
        raise NumericalError("pi(a|s) = 0 for some transition")
    return Transitions(S, A, S2, envsim.normalize(env, S), envsim.normalize(env, S2), logp)


def _logit_t(g_values, h_spec, h_params, batch, gamma):
    h_s = _value_forward_t(h_spec, h_params, batch.states_n)
    h_next = _value_forward_t(h_spec, h_params, batch.next_states_n)
    f = g_values + gamma * h_next - h_s
    return dc.clip(f - batch.logp, -LOGIT_CLIP, LOGIT_CLIP)


def discriminator_prob(disc, policy, s, a, s_next):
    s, a, s_next = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (s, a, s_next))
    logp = log_prob(policy, s, a)
    if not np.all(np.isfinite(logp)):
        raise NumericalError("pi(a|s) = 0: discriminator undefined")
    logit = np.clip(disc.f(s, s_next) - logp, -LOGIT_CLIP, LOGIT_CLIP)
    prob = np.exp(-np.logaddexp(0.0, -logit))
    return prob if len(prob) > 1 else float(prob[0])


def airl_loss_t(g, g_params, h_spec, h_params, demo, gen, gamma):
    """``-mean_demo log D - mean_gen log(1 - D)`` as a taped scalar."""
    if len(demo) == 0 or len(gen) == 0:
        raise ContractError("AIRL loss needs non-empty demo and generator batches")
    logit_d = _logit_t(g.forward_t(g_params, demo.states_n), h_spec, h_params, demo, gamma)
    logit_g = _logit_t(g.forward_t(g_params, gen.states_n), h_spec, h_params, gen, gamma)
    return -dc.log_sigmoid(logit_d).mean() - dc.log_sigmoid(-logit_g).mean()


def airl_discriminator_loss(disc, demos, rollouts, policy):
    demo = demos if isinstance(demos, Transitions) else transitions(demos, policy)
    gen = rollouts if isinstance(rollouts, Transitions) else transitions(rollouts, policy)
    loss = airl_loss_t(disc.g, disc.g.params, disc.h_spec, disc.h_params, demo, gen, disc.gamma)
    return float(loss.value)


# ----------------------------------------------------------------------
# reward decomposition


@dataclass(frozen=True, eq=False)
class RewardDecomposition:
    """``R_j(s) = task(s) + alpha * strategy_j(s)``."""

    task: RewardNet
    strategies: tuple = ()
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        object.__setattr__(self, "strategies", tuple(self.strategies))

    @property
    def n_strategies(self):
        return len(self.strategies)

    def theta(self):
        return {"task": self.task.params,
                "strategies": {str(j): s.params for j, s in enumerate(self.strategies)}}

    def with_theta(self, theta):
        strategies = tuple(s.with_params(dc.ParamSet(theta["strategies"][str(j)]))
                           for j, s in enumerate(self.strategies))
        return replace(self, task=self.task.with_params(dc.ParamSet(theta["task"])),
                       strategies=strategies)


@dataclass(frozen=True, eq=False)
class CombinedReward:
    task: RewardNet
    strategy: RewardNet
    alpha: float

    def __call__(self, states):
        return self.task(states) + self.alpha * self.strategy(states)


def combined_reward(decomp, j):
    if not 0 <= j < decomp.n_strategies:
        raise ContractError(f"unknown strategy index {j}")
    return CombinedReward(decomp.task, decomp.strategies[j], decomp.alpha)


def msrd_loss_t(decomp, theta, shaping, h_spec, demo_batches, gen_batches, gamma):
    """Eq.-1 style loss summed over strategies.

    ``theta`` holds tensors for ``task`` and ``strategies[str(j)]``;
    ``shaping[str(j)]`` the per-strategy shaping-head tensors. Strategy ``j``'s
    discriminator uses ``g = task + alpha * strategy_j``; its generator states
    also pay ``alpha * mean |strategy_j(s)|``.
    """
    M = decomp.n_strategies
    if M < 2:
        raise PreconditionError("MSRD training needs at least two strategies")
    if len(demo_batches) != M or len(gen_batches) != M:
        raise ContractError("one demo batch and one generator batch per strategy required")
    total = None
    for j in range(M):
        demo, gen = demo_batches[j], gen_batches[j]
        if demo is None or len(demo) == 0:
            raise ContractError(f"strategy {j} has no demonstrations")
        key = str(j)
        strat = decomp.strategies[j]

        def g_vals(batch, key=key, strat=strat):
            return (decomp.task.forward_t(theta["task"], batch.states_n)
                    + decomp.alpha * strat.forward_t(theta["strategies"][key], batch.states_n))

        logit_d = _logit_t(g_vals(demo), h_spec, shaping[key], demo, gamma)
        logit_g = _logit_t(g_vals(gen), h_spec, shaping[key], gen, gamma)
        term = -dc.log_sigmoid(logit_d).mean() - dc.log_sigmoid(-logit_g).mean()
        reg = dc.tabs(strat.forward_t(theta["strategies"][key], gen.states_n)).mean()
        term = term + decomp.alpha * reg
        total = term if total is None else total + term
    return total


def msrd_loss(decomp, shaping, h_spec, demo_batches, gen_batches, gamma):
    theta = dc._tree_map(dc.Tensor, decomp.theta())
    sh = {k: dc._tree_map(dc.Tensor, v) for k, v in shaping.items()}
    return float(msrd_loss_t(decomp, theta, sh, h_spec, demo_batches, gen_batches, gamma).value)


# ----------------------------------------------------------------------
# between-class discrimination


def discount_weights(length, gamma):
    w = gamma ** np.arange(length)
    return w / w.sum()


def normalized_return(reward_fn, traj, gamma=None):
    """Discounted return divided by the sum of discount weights."""
    gamma = traj.gamma if gamma is None else gamma
    r = np.asarray(reward_fn(traj.states), dtype=float)
    return float(np.dot(discount_weights(len(r), gamma), r))


@dataclass(frozen=True, eq=False)
class BCDData:
    """Stacked states of the demos a BCD loss touches plus the averaging operator."""

    states_n: np.ndarray
    segments: np.ndarray  # (n_demos, n_states) discount-weight rows

    @classmethod
    def build(cls, env, trajs, gamma):
        states = np.vstack([t.states for t in trajs])
        seg = np.zeros((len(trajs), len(states)))
        start = 0
        for i, t in enumerate(trajs):
            seg[i, start:start + len(t)] = discount_weights(len(t), gamma)
            start += len(t)
        return cls(envsim.normalize(env, states), seg)


def bcd_loss_t(decomp, strategy_params, data, demo_rows, pure_rows, weights):
    """Sum over demos i and strategies j of ``(exp(eta_j(i)) - w_ij exp(eta_j(m_j)))^2``.

    ``demo_rows[i]`` / ``pure_rows[j]`` index rows of ``data.segments``;
    ``weights`` is (n_demos, M).
    """
    M = decomp.n_strategies
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(demo_rows), M):
        raise ContractError(f"weights shape {weights.shape} != {(len(demo_rows), M)}")
    total = None
    for j in range(M):
        r = decomp.strategies[j].forward_t(strategy_params[str(j)], data.states_n)
        eta = dc.matmul(data.segments, r)  # (n_demos_total,)
        e = dc.exp(eta)
        own = e[np.asarray(demo_rows)]
        pure = e[pure_rows[j]]
        diff = own - pure * weights[:, j]
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total


def bcd_loss(decomp, demo, w, pure_demos, gamma=None):
    """BCD loss of one demonstration ``demo`` with mixture weights ``w``.

    ``pure_demos[j]`` is the founding demonstration of strategy ``j``.
    """
    M = decomp.n_strategies
    w = np.asarray(w, dtype=float).reshape(-1)
    if len(w) != M:
        raise ContractError(f"{len(w)} weights for {M} strategies")
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ContractError("BCD weights must lie on the simplex")
    if len(pure_demos) != M or any(p is None for p in pure_demos):
        raise RegistryIntegrityError("missing pure demonstration for some strategy")
    gamma = demo.gamma if gamma is None else gamma
    data = BCDData.build(decomp.task.env, [demo, *pure_demos], gamma)
    params = {str(j): dc._tree_map(dc.Tensor, s.params) for j, s in enumerate(decomp.strategies)}
    loss = bcd_loss_t(decomp, params, data, [0], list(range(1, M + 1)), w[None, :])
    return float(loss.value)


# ----------------------------------------------------------------------
# single-demonstration AIRL


@dataclass
class AIRLConfig:
    iterations: int = 60
    init_std: float = 0.3  # generator exploration stddev during adversarial training
    disc_lr: float = 1e-3
    disc_minibatches: int = 4
    hidden: tuple = (32, 32)
    bc_epochs: int = 2000
    bc_lr: float = 1e-2
    bc_final_lr: float = 1e-4
    bc_weight_decays: tuple = (1e-5, 3e-5, 1e-4, 3e-4)
    select_best: bool = True
    refit_std: bool = True
    eval_every: int = 10
    selection_seed: int = 7919
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(policy_lr=1e-4))


@dataclass
class StrategyModel:
    """What a single-demo AIRL run produces."""

    policy: GaussianPolicy
    reward: RewardNet
    shaping: dc.ParamSet
    value_params: dc.ParamSet
    trace: list = field(default_factory=list)


def discriminator_epoch(disc, demo, gen, opt, lr, minibatches, rng):
    """One pass over the generator batch; demo transitions are resampled per minibatch."""
    theta = {"g": disc.g.params, "h": disc.h_params}
    n_gen = len(gen)
    order = rng.permutation(n_gen)
    size = max(1, n_gen // minibatches)
    demo_size = max(1, len(demo) // minibatches)
    loss = np.nan
    for start in range(0, n_gen, size):
        gi = order[start:start + size]
        di = rng.choice(len(demo), size=min(len(demo), max(demo_size, 32)), replace=False)
        gb, db = _subset(gen, gi), _subset(demo, di)
        loss, grads = dc.gradient(
            lambda p: airl_loss_t(disc.g, p["g"], disc.h_spec, p["h"], db, gb, disc.gamma), theta)
        theta, opt = dc.optimizer_step(theta, grads, opt, lr)
    disc = replace(disc, g=disc.g.with_params(dc.ParamSet(theta["g"])), h_params=dc.ParamSet(theta["h"]))
    return disc, opt, loss


def _subset(batch, idx):
    return Transitions(batch.states[idx], batch.actions[idx], batch.next_states[idx],
                       batch.states_n[idx], batch.next_states_n[idx], batch.logp[idx])


def train_new_strategy_airl(demo, env, iterations=None, rng=None, config=None, kl_fn=None):
    """AIRL on a single demonstration.

    The generator mean is warm-started by behaviour cloning, then
    discriminator epochs and policy-gradient iterations alternate with
    ``g(s)`` as the pseudo-reward. The generator explores at
    ``config.init_std`` so the discriminator sees off-demo states.

    With ``kl_fn(policy, rng)`` and ``select_best``, one behaviour-cloning fit
    per weight decay in ``bc_weight_decays`` is scored and the best seeds
    the adversarial phase; the returned policy is the lowest-KL candidate
    among those fits and the periodic generator iterates, always with its
    stddev refitted to the demo. Reward and shaping heads are the final ones.
    """
    cfg = config or AIRLConfig()
    iterations = cfg.iterations if iterations is None else iterations
    rng = rng if rng is not None else np.random.default_rng(0)
    selecting = cfg.select_best and kl_fn is not None
    best = None

    def consider(pol, value_params):
        nonlocal best
        if cfg.refit_std:
            pol = refit_std(pol, demo)
        if not selecting:
            return
        kl = kl_fn(pol, np.random.default_rng(cfg.selection_seed))
        if best is None or kl < best[0]:
            best = (kl, pol, value_params)
        return kl

    decays = cfg.bc_weight_decays if selecting else cfg.bc_weight_decays[:1]
    start, start_kl = None, np.inf
    for wd in decays:
        pol = GaussianPolicy.create(env, rng, cfg.hidden, init_std=cfg.init_std)
        if cfg.bc_epochs:
            pol = behavior_clone(pol, demo.states, demo.actions, rng, epochs=cfg.bc_epochs, lr=cfg.bc_lr,
                                 weight_decay=wd, final_lr=cfg.bc_final_lr)
        kl = consider(pol, None)
        if start is None or (kl is not None and kl < start_kl):
            start, start_kl = pol, kl
    disc = AIRLDiscriminator.create(env, rng, cfg.hidden)
    trainer = PolicyTrainer.create(start, rng, cfg.ppo, cfg.hidden)
    opt = dc.AdamState()
    trace = []
    for it in range(iterations):
        trajs = trainer.collect(rng, len(demo))
        try:
            demo_tr = transitions(demo, trainer.policy, env)
            gen_tr = transitions(trajs, trainer.policy, env)
            disc, opt, d_loss = discriminator_epoch(disc, demo_tr, gen_tr, opt, cfg.disc_lr,
                                                    cfg.disc_minibatches, rng)
            score = trainer.update(trajs, disc.g, rng)
        except NumericalError as exc:
            raise TrainingError(f"AIRL diverged at iteration {it}: {exc}", trace) from exc
        trace.append({"iteration": it, "disc_loss": d_loss, "pseudo_return": score,
                      "std": trainer.policy.std.tolist()})
        if (it + 1) % cfg.eval_every == 0 or it == iterations - 1:
            consider(trainer.policy, trainer.value_params)
    if best is not None:
        _, pol, v = best
        v = trainer.value_params if v is None else v
    else:
        pol, v = trainer.policy, trainer.value_params
        if cfg.refit_std:
            pol = refit_std(pol, demo)
    return StrategyModel(pol, disc.g, disc.h_params, v, trace)


def refit_std(policy, demo, floor=1e-3):
    """Maximum-likelihood state-independent stddev given the policy's mean."""
    resid = np.asarray(demo.actions) - policy.mean(demo.states)
    std = np.maximum(np.sqrt(np.mean(resid ** 2, axis=0)), floor)
    return policy.with_params(log_std=np.log(std))
