"""Gaussian MLP policies and the clipped-surrogate policy-gradient trainer."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import envsim
from .errors import ContractError, NumericalError, TrainingError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class GaussianPolicy:
    """``N(mu(s), diag(exp(log_std))^2)`` with a state-independent std.

    The mean network sees normalized states; samples are clamped to the
    environment's action bounds.
    """

    env: envsim.EnvSpec
    spec: dc.MLPSpec
    params: dc.ParamSet
    log_std: np.ndarray

    def __post_init__(self):
        log_std = np.asarray(self.log_std, dtype=float).reshape(-1)
        object.__setattr__(self, "log_std", log_std)
        if self.spec.sizes[-1] != self.env.action_dim or log_std.shape != (self.env.action_dim,):
            raise ContractError("policy output dimension must equal env action_dim")
        if self.spec.sizes[0] != self.env.state_dim:
            raise ContractError("policy input dimension must equal env state_dim")

    @classmethod
    def create(cls, env, rng, hidden=(32, 32), init_std=1.0):
        spec = dc.mlp(env.state_dim, env.action_dim, hidden)
        params = dc.init_params(spec, rng, out_scale=0.01)
        return cls(env, spec, params, np.full(env.action_dim, np.log(init_std)))

    @property
    def action_dim(self):
        return self.env.action_dim

    @property
    def std(self):
        return np.exp(self.log_std)

    def mean(self, states):
        return dc.forward(self.spec, self.params, envsim.normalize(self.env, states))

    def with_params(self, params=None, log_std=None):
        return replace(self, params=self.params if params is None else params,
                       log_std=self.log_std if log_std is None else log_std)


def action_distribution(policy, state):
    state = np.asarray(state, dtype=float)
    if not np.all(np.isfinite(state)):
        raise ContractError("state must be finite")
    if state.shape[-1] != policy.env.state_dim:
        raise ContractError(f"state dimension {state.shape[-1]} != {policy.env.state_dim}")
    return policy.mean(state), policy.std * np.ones(policy.action_dim)


def sample_action(policy, state, rng):
    mu, std = action_distribution(policy, state)
    noise = rng.standard_normal(np.shape(mu))
    return policy.env.clip_action(mu + std * noise)


def gaussian_log_density(actions, mean, std):
    """Per-row log N(actions; mean, diag(std^2)), summed over action dims."""
    z = (actions - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI, axis=-1)


def log_prob(policy, states, actions):
    return gaussian_log_density(np.asarray(actions, float), policy.mean(states), policy.std)


def log_likelihood(policy, traj):
    """Sum over steps of the pre-clamp Gaussian log-density of the demo actions."""
    if len(traj) == 0:
        raise ContractError("log_likelihood of an empty trajectory")
    return float(np.sum(log_prob(policy, traj.states, traj.actions)))


def _log_prob_t(policy, params, log_std, states_n, actions):
    """Taped per-row log-density; ``states_n`` are already normalized."""
    mu = dc.forward_t(policy.spec, params, states_n)
    std_inv = dc.exp(-log_std)
    z = (dc.Tensor(actions) - mu) * std_inv
    per_dim = -0.5 * z * z - log_std - 0.5 * LOG_2PI
    return per_dim.sum(axis=1)


# ----------------------------------------------------------------------
# behaviour cloning


def behavior_clone(policy, states, actions, rng, epochs=300, lr=3e-3, batch_size=256, fit_std=False,
                   weight_decay=0.0, final_lr=None):
    """Fit the policy to (state, action) pairs.

    By default only the mean is fitted, by least squares, which does not
    depend on the current stddev. ``fit_std`` switches to maximum likelihood
    over mean and log-stddev. ``weight_decay`` adds
    ``weight_decay * sum(W**2)`` over weight matrices (biases are free).
    With ``final_lr`` the step size decays geometrically from ``lr``.
    """
    states_n = envsim.normalize(policy.env, states)
    actions = np.asarray(actions, dtype=float)
    n = len(states_n)
    theta = {"mean": policy.params, "log_std": policy.log_std}
    opt = dc.AdamState()
    decay = (final_lr / lr) ** (1.0 / max(epochs - 1, 1)) if final_lr else 1.0
    for epoch in range(epochs):
        step = lr * decay ** epoch
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]

            def loss(p):
                if fit_std:
                    fit = -_log_prob_t(policy, p["mean"], p["log_std"], states_n[idx], actions[idx]).mean()
                else:
                    r = dc.forward_t(policy.spec, p["mean"], states_n[idx]) - actions[idx]
                    fit = 0.5 * (r * r).sum(axis=1).mean()
                for k, w in p["mean"].items():
                    if weight_decay and k.startswith("W"):
                        fit = fit + weight_decay * (w * w).sum()
                return fit

            _, g = dc.gradient(loss, theta if fit_std else {"mean": theta["mean"]})
            if fit_std:
                theta, opt = dc.optimizer_step(theta, g, opt, step)
            else:
                theta["mean"], opt = dc.optimizer_step(theta["mean"], g["mean"], opt, step)
    return policy.with_params(dc.ParamSet(theta["mean"]), np.asarray(theta["log_std"]))


# ----------------------------------------------------------------------
# clipped-surrogate policy gradient


@dataclass
class PPOConfig:
    clip: float = 0.2
    gae_lambda: float = 0.95
    rollouts_per_iter: int = 8
    epochs: int = 4
    minibatches: int = 4
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    entropy_coef: float = 0.0
    min_log_std: float = -4.0
    max_log_std: float = 1.0


def gae(rewards, values, last_values, gamma, lam):
    """Generalized advantage estimates for (B, T) rewards and values.

    Trajectories are truncated, never terminated, so the tail bootstraps on
    ``last_values``.
    """
    B, T = rewards.shape
    adv = np.zeros((B, T))
    acc = np.zeros(B)
    nxt = last_values
    for t in range(T - 1, -1, -1):
        delta = rewards[:, t] + gamma * nxt - values[:, t]
        acc = delta + gamma * lam * acc
        adv[:, t] = acc
        nxt = values[:, t]
    return adv


DUAL_CLIP = 3.0


def surrogate_loss(policy, params, log_std, states_n, actions, old_logp, advantages, clip, entropy_coef=0.0):
    """Negative clipped surrogate objective, minus the optional entropy bonus.

    Negative-advantage terms are additionally bounded below by
    ``DUAL_CLIP * A`` so a runaway ratio cannot dominate the batch.
    """
    logp = _log_prob_t(policy, params, log_std, states_n, actions)
    ratio = dc.exp(dc.clip(logp - old_logp, -20.0, 20.0))
    adv = dc.Tensor(advantages)
    obj = dc.minimum(ratio * adv, dc.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)
    neg = np.asarray(advantages) < 0
    floor = DUAL_CLIP * np.asarray(advantages)
    obj = -dc.minimum(-obj, dc.Tensor(np.where(neg, -floor, np.inf)))
    loss = -obj.mean()
    if entropy_coef:
        loss = loss - entropy_coef * log_std.sum()
    return loss


@dataclass
class PolicyTrainer:
    """Stateful trainer: keeps the value baseline and optimizer moments."""

    policy: GaussianPolicy
    value_spec: dc.MLPSpec
    value_params: dc.ParamSet
    config: PPOConfig = field(default_factory=PPOConfig)
    policy_opt: dc.AdamState = field(default_factory=dc.AdamState)
    value_opt: dc.AdamState = field(default_factory=dc.AdamState)
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, policy, rng, config=None, hidden=(32, 32)):
        spec = dc.mlp(policy.env.state_dim, 1, hidden)
        # zero output layer: the baseline starts at exactly V = 0
        return cls(policy, spec, dc.init_params(spec, rng, out_scale=0.0), config or PPOConfig())

    def values(self, states_n):
        return dc.forward(self.value_spec, self.value_params, states_n)[..., 0]

    def collect(self, rng, horizon=None):
        env = self.policy.env
        return envsim.rollout(env, self.policy, horizon, rng, n=self.config.rollouts_per_iter)

    def update(self, trajs, reward_fn, rng):
        """One iteration on a batch of trajectories scored by ``reward_fn``
        (state -> reward; ``None`` uses the environment's own rewards).

        Returns the mean pseudo-return of the batch.
        """
        cfg, pol, env = self.config, self.policy, self.policy.env
        S = np.stack([t.states for t in trajs])
        A = np.stack([t.actions for t in trajs])
        F = np.stack([t.final_state for t in trajs])
        B, T, d = S.shape
        if reward_fn is None:
            R = np.stack([t.env_rewards for t in trajs])
        else:
            R = np.asarray(reward_fn(S.reshape(B * T, d)), dtype=float).reshape(B, T)
        if not np.all(np.isfinite(R)):
            raise TrainingError("reward function returned non-finite values", self.history)
        Sn = envsim.normalize(env, S)
        V = self.values(Sn)
        V_last = self.values(envsim.normalize(env, F))
        adv = gae(R, V, V_last, env.gamma, cfg.gae_lambda)
        returns = (adv + V).reshape(-1)
        adv = adv.reshape(-1)
        sd = adv.std()
        adv = (adv - adv.mean()) / sd if sd > 1e-8 else np.zeros_like(adv)

        Sn = Sn.reshape(B * T, d)
        A = A.reshape(B * T, -1)
        old_logp = log_prob(pol, S.reshape(B * T, d), A)
        theta = {"mean": pol.params, "log_std": pol.log_std}
        n = B * T
        mb = max(1, n // cfg.minibatches)
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, mb):
                idx = order[start:start + mb]
                _, g = dc.gradient(
                    lambda p: surrogate_loss(pol, p["mean"], p["log_std"], Sn[idx], A[idx],
                                             old_logp[idx], adv[idx], cfg.clip, cfg.entropy_coef),
                    theta)
                theta, self.policy_opt = dc.optimizer_step(theta, g, self.policy_opt, cfg.policy_lr)
                theta["log_std"] = np.clip(theta["log_std"], cfg.min_log_std, cfg.max_log_std)

                def vloss(p):
                    v = dc.forward_t(self.value_spec, p, Sn[idx])[:, 0]
                    diff = v - returns[idx]
                    return (diff * diff).mean()

                _, gv = dc.gradient(vloss, self.value_params)
                self.value_params, self.value_opt = dc.optimizer_step(
                    self.value_params, gv, self.value_opt, cfg.value_lr)
        new = pol.with_params(dc.ParamSet(theta["mean"]), np.asarray(theta["log_std"]))
        if not (new.params.is_finite() and np.all(np.isfinite(new.log_std))):
            raise TrainingError("policy parameters diverged", self.history)
        self.policy = new
        score = float(np.mean(np.sum(R * env.gamma ** np.arange(T), axis=1)))
        self.history.append(score)
        return score

    def iterate(self, reward_fn, rng, horizon=None):
        return self.update(self.collect(rng, horizon), reward_fn, rng)


def improve_policy(policy, reward_fn, env, iterations, rng, config=None, trainer=None):
    """Run ``iterations`` policy-gradient iterations maximizing ``reward_fn``
    (``None``: the environment reward).

    Returns the updated policy. Pass a ``trainer`` to keep the value
    baseline and optimizer state across calls.
    """
    if policy.env.id != env.id:
        raise ContractError(f"policy for {policy.env.id} cannot train on {env.id}")
    if trainer is None:
        trainer = PolicyTrainer.create(policy, rng, config)
    else:
        trainer.policy = policy
    for _ in range(iterations):
        try:
            trainer.iterate(reward_fn, rng)
        except NumericalError as exc:
            raise TrainingError(f"policy improvement failed: {exc}", trainer.history) from exc
    return trainer.policy


# ----------------------------------------------------------------------
# persistence


def policy_tensors(prefix, policy):
    out = dc.params_to_tensors(prefix, policy.params)
    out[f"{prefix}/log_std"] = policy.log_std
    return out


def policy_from_tensors(prefix, tensors, env, spec):
    params = dc.params_from_tensors(prefix, {k: v for k, v in tensors.items()
                                             if not k.endswith("/log_std")})
    return GaussianPolicy(env, spec, params, tensors[f"{prefix}/log_std"])


def save_policy(path, policy):
    meta = {"kind": "gaussian-policy", "env": policy.env.to_dict(), "spec": policy.spec.to_dict()}
    dc.save_tensors(path, policy_tensors("policy", policy), meta)


def load_policy(path):
    tensors, meta = dc.load_tensors(path)
    e = meta["env"]
    env = envsim.make_env(e["id"], horizon=e["horizon"], gamma=e["gamma"])
    return policy_from_tensors("policy", tensors, env, dc.MLPSpec.from_dict(meta["spec"]))
