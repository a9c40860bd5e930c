"""Policy mixtures, k-NN KL estimation and random search over mixture weights."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import envsim
from .errors import ContractError, PreconditionError

DEFAULT_K = 4
JITTER = 1e-10
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class MixtureWeights:
    w: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=float)
        if w.size == 0 or np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ContractError(f"mixture weights must lie on the simplex, got {w}")
        if np.any(sigma <= 0):
            raise ContractError("mixture sigma must be positive")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "sigma", sigma)


def default_sigma(policies):
    """Element-wise geometric mean of the components' action stddevs."""
    return np.exp(np.mean([np.log(p.std) for p in policies], axis=0))


def mixture_mean(weights, policies, state):
    w = weights.w if isinstance(weights, MixtureWeights) else np.asarray(weights, dtype=float)
    if len(w) != len(policies):
        raise ContractError(f"{len(w)} weights for {len(policies)} policies")
    out = None
    for wj, pol in zip(w, policies):
        if wj == 0.0:
            continue
        term = pol.mean(state) if wj == 1.0 else wj * pol.mean(state)
        out = term if out is None else out + term
    if out is None:
        raise ContractError("all mixture weights are zero")
    return out


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """``N(sum_j w_j mu_j(s), sigma^2)``; usable wherever a GaussianPolicy is sampled."""

    weights: MixtureWeights
    policies: tuple

    def __post_init__(self):
        if len(self.weights.w) != len(self.policies):
            raise ContractError("weights and policies differ in length")
        object.__setattr__(self, "policies", tuple(self.policies))

    @property
    def env(self):
        return self.policies[0].env

    @property
    def action_dim(self):
        return self.policies[0].action_dim

    @property
    def std(self):
        return np.broadcast_to(self.weights.sigma, (self.action_dim,)).astype(float)

    @property
    def log_std(self):
        return np.log(self.std)

    def mean(self, states):
        return mixture_mean(self.weights, self.policies, states)


def mixture_policy(weights, policies, sigma=None):
    if not isinstance(weights, MixtureWeights):
        weights = MixtureWeights(weights, default_sigma(policies) if sigma is None else sigma)
    return MixturePolicy(weights, tuple(policies))


# ----------------------------------------------------------------------
# KL estimation


def _knn(tree, points, k, skip=0):
    """Distance to the ``k``-th neighbour after skipping ``skip`` (scalar or per point) nearest ones."""
    skip = np.broadcast_to(np.asarray(skip, dtype=int), (len(points),))
    kmax = k + int(skip.max())
    d, _ = tree.query(points, k=kmax)
    d = d.reshape(len(points), kmax)
    return d[np.arange(len(points)), k - 1 + skip]


def knn_kl_estimate(sample_p, sample_q, k=DEFAULT_K):
    """Kozachenko-Leonenko style k-NN estimate of KL(p || q) in nats.

    ``(d/n) * sum_i log(nu_k(i) / rho_k(i)) + log(m / (n - 1))`` where
    ``rho_k`` is the k-th neighbour distance of ``p_i`` inside p (excluding
    itself) and ``nu_k`` its k-th neighbour distance in q. A q point that
    coincides exactly with ``p_i`` is skipped like the self-match, so a
    sample compared with an exact copy of itself scores ``log(m/(n-1))``
    rather than a large negative value. Remaining zero distances (repeated
    states within p) get a tiny jitter. The estimate can be negative.
    """
    p = np.asarray(sample_p, dtype=float)
    q = np.asarray(sample_q, dtype=float)
    p = p.reshape(len(p), -1)
    q = q.reshape(len(q), -1)
    n, d = p.shape
    m = len(q)
    if q.shape[1] != d:
        raise ContractError(f"samples differ in dimension: {d} vs {q.shape[1]}")
    if n <= k or m < k:
        raise ContractError(f"need more than k={k} samples in p and at least k in q (got {n}, {m})")
    q_tree = cKDTree(q)
    same = q_tree.query_ball_point(p, r=0.0, return_length=True)
    same = np.minimum(same, m - k)
    rho = _knn(cKDTree(p), p, k, 1)
    nu = _knn(q_tree, p, k, same)
    if np.any(rho == 0.0) or np.any(nu == 0.0):
        # repeated states (frozen dynamics): break ties
        jitter = np.random.default_rng(0)
        p = p + JITTER * jitter.uniform(size=p.shape)
        q = q + JITTER * jitter.uniform(size=q.shape)
        rho = _knn(cKDTree(p), p, k, 1)
        nu = _knn(cKDTree(q), p, k, same)
    # fsum: exact, so the value does not depend on sample order
    return float(d / n * math.fsum(np.log(nu / rho)) + np.log(m / (n - 1)))


def absorbing_collapsed(states, k=DEFAULT_K):
    """Drop exact consecutive repeats, so a frozen terminal state counts once.

    Keeps the original rows when too few distinct ones would remain for a
    k-NN estimate.
    """
    s = np.asarray(states)
    keep = np.ones(len(s), dtype=bool)
    keep[1:] = np.any(s[1:] != s[:-1], axis=1)
    return s[keep] if keep.sum() > k else s


def trajectory_kl(demo, policy, env, n_rollouts=5, rng=None, k=DEFAULT_K, rollouts=None):
    """Mean k-NN KL between the demo's normalized states and each rollout's.

    Absorbing tails (landed or crashed states repeated to the horizon) are
    collapsed to a single visit on both sides first.
    """
    if n_rollouts < 1:
        raise ContractError("n_rollouts must be >= 1")
    if rollouts is None:
        rollouts = envsim.rollout(env, policy, len(demo), rng, n=n_rollouts)
    p = envsim.normalize(env, absorbing_collapsed(demo.states, k))
    return float(np.mean([knn_kl_estimate(p, envsim.normalize(env, absorbing_collapsed(_states(r), k)), k)
                          for r in rollouts]))


def _states(r):
    return r.states if hasattr(r, "states") else np.asarray(r)


def sample_simplex(dim, rng):
    if dim < 1:
        raise ContractError("simplex dimension must be >= 1")
    if dim == 1:
        return np.ones(1)
    w = rng.dirichlet(np.ones(dim))
    return w / w.sum()


# ----------------------------------------------------------------------
# weight search


@dataclass
class SearchResult:
    weights: MixtureWeights
    kl: float
    candidates: np.ndarray
    kls: np.ndarray

    def __iter__(self):
        return iter((self.weights, self.kl))

    @property
    def best_index(self):
        return int(np.argmin(self.kls))

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["candidate", *[f"w{j}" for j in range(self.candidates.shape[1])], "kl"])
            for i, (w, kl) in enumerate(zip(self.candidates, self.kls)):
                writer.writerow([i, *[repr(float(v)) for v in w], repr(float(kl))])


def candidate_weights(n_policies, budget, rng):
    """One-hots, then the uniform vector, then flat-Dirichlet draws up to ``budget``."""
    fixed = [np.eye(n_policies)[j] for j in range(n_policies)]
    if n_policies > 1:
        fixed.append(np.full(n_policies, 1.0 / n_policies))
    if budget < len(fixed):
        raise ContractError(f"budget {budget} is below the {len(fixed)} fixed candidates")
    extra = [sample_simplex(n_policies, rng) for _ in range(budget - len(fixed))] if n_policies > 1 else []
    return np.array(fixed + extra)


def evaluate_candidates(demo, policies, env, candidates, sigma, n_rollouts, rngs, k=DEFAULT_K):
    """Trajectory KL of each weight vector, all candidates simulated in one batch.

    Candidate ``c`` draws its start states and action noise from ``rngs[c]``
    alone, so results do not depend on how candidates are batched.
    """
    horizon = len(demo)
    C = len(candidates)
    inits, noises = zip(*(envsim.draw_rollout_noise(env, r, n_rollouts, horizon) for r in rngs))
    init = np.concatenate(inits)
    noise = np.concatenate(noises)
    row_w = np.repeat(np.asarray(candidates, dtype=float), n_rollouts, axis=0)
    active = [j for j in range(len(policies)) if np.any(row_w[:, j] != 0.0)]

    def batch_mean(states):
        out = np.zeros((len(states), env.action_dim))
        for j in active:
            out += row_w[:, j:j + 1] * policies[j].mean(states)
        return out

    S, _, _, _ = envsim.simulate(env, batch_mean, np.asarray(sigma, dtype=float), init, noise)
    p = envsim.normalize(env, absorbing_collapsed(demo.states, k))
    kls = np.empty(C)
    for c in range(C):
        rows = S[c * n_rollouts:(c + 1) * n_rollouts]
        kls[c] = np.mean([knn_kl_estimate(p, envsim.normalize(env, absorbing_collapsed(r, k)), k) for r in rows])
    return kls


def optimize_mixture_weights(demo, policies, env, budget=64, rng=None, n_rollouts=5, sigma=None,
                             k=DEFAULT_K):
    """Random search for the mixture minimizing trajectory KL to ``demo``.

    All candidates are simulated under the same start states and action
    noise, so differences in KL reflect the weights rather than the draw.
    Ties resolve to the lowest candidate index.
    """
    if not policies:
        raise PreconditionError("mixture search needs at least one policy")
    sigma = default_sigma(policies) if sigma is None else np.asarray(sigma, dtype=float)
    candidates = candidate_weights(len(policies), budget if len(policies) > 1 else 1, rng)
    # common random numbers: every candidate sees the same starts and action noise
    seed = int(rng.bit_generator.random_raw()) if rng is not None else 0
    rngs = [np.random.default_rng(seed) for _ in candidates]
    kls = evaluate_candidates(demo, policies, env, candidates, sigma, n_rollouts, rngs, k)
    best = int(np.argmin(kls))
    return SearchResult(MixtureWeights(candidates[best], sigma), float(kls[best]), candidates, kls)
