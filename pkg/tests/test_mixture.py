import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmsrd import demogen, envsim
from dmsrd import mixture as mx
from dmsrd import policy as P
from dmsrd.errors import ContractError, PreconditionError

from conftest import ConstantPolicy


# ----------------------------------------------------------------------
# mixture mean / policy


def test_one_hot_is_identity(pend):
    rng = np.random.default_rng(0)
    pols = [P.GaussianPolicy.create(pend, rng) for _ in range(3)]
    S = rng.normal(size=(50, 4))
    for j in range(3):
        w = mx.MixtureWeights(np.eye(3)[j], 0.3)
        assert np.array_equal(mx.mixture_mean(w, pols, S), pols[j].mean(S))


@pytest.mark.parametrize("w,expected", [((0.5, 0.5), 0.0), ((0.3, 0.7), -0.4)])
def test_mean_linear_examples(pend, w, expected):
    pols = [ConstantPolicy(pend, 1.0), ConstantPolicy(pend, -1.0)]
    out = mx.mixture_mean(mx.MixtureWeights(w, 0.1), pols, np.zeros(4))
    assert out[0, 0] == pytest.approx(expected, abs=1e-15)


def test_mean_length_mismatch(pend):
    with pytest.raises(ContractError):
        mx.mixture_mean(np.array([0.5, 0.5]), [ConstantPolicy(pend, 1.0)], np.zeros(4))


@pytest.mark.parametrize("w", [(0.6, 0.6), (-0.1, 1.1), ()])
def test_weights_must_be_simplex(w):
    with pytest.raises(ContractError):
        mx.MixtureWeights(w, 0.1)


def test_sigma_must_be_positive():
    with pytest.raises(ContractError):
        mx.MixtureWeights((1.0,), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31))
def test_mean_linear_in_weights(a, seed):
    env = envsim.make_env("pendulum-lite")
    rng = np.random.default_rng(seed)
    pols = [P.GaussianPolicy.create(env, rng, hidden=(5,)) for _ in range(3)]
    w1, w2 = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    S = rng.normal(size=(20, 4))
    lhs = mx.mixture_mean(a * w1 + (1 - a) * w2, pols, S)
    rhs = a * mx.mixture_mean(w1, pols, S) + (1 - a) * mx.mixture_mean(w2, pols, S)
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12)


def test_one_hot_policy_matches_component(pend):
    pol = P.GaussianPolicy.create(pend, np.random.default_rng(0), init_std=0.3)
    other = P.GaussianPolicy.create(pend, np.random.default_rng(1))
    mix = mx.mixture_policy([1.0, 0.0], [pol, other], sigma=pol.std)
    S = np.random.default_rng(2).normal(size=(10, 4))
    m1, s1 = P.action_distribution(mix, S)
    m2, s2 = P.action_distribution(pol, S)
    assert np.array_equal(m1, m2) and np.array_equal(s1, s2)
    a = np.random.default_rng(3).normal(size=(10, 1))
    assert np.array_equal(P.log_prob(mix, S, a), P.log_prob(pol, S, a))


def test_mixture_sample_std(pend):
    pols = [ConstantPolicy(pend, 0.2), ConstantPolicy(pend, -0.4)]
    mix = mx.mixture_policy([0.5, 0.5], pols, sigma=0.3)
    rng = np.random.default_rng(0)
    a = np.array([P.sample_action(mix, np.zeros(4), rng) for _ in range(10_000)]).ravel()
    se = 0.3 / np.sqrt(2 * (len(a) - 1))
    assert abs(a.std(ddof=1) - 0.3) <= 3 * se
    assert abs(a.mean() + 0.1) <= 3 * 0.3 / np.sqrt(len(a))


def test_mixture_of_mixtures(pend):
    rng = np.random.default_rng(0)
    pols = [P.GaussianPolicy.create(pend, rng) for _ in range(3)]
    inner = mx.mixture_policy([0.2, 0.5, 0.3], pols, sigma=0.4)
    outer = mx.mixture_policy([0.0, 1.0], [pols[0], inner], sigma=0.4)
    S = rng.normal(size=(10, 4))
    assert np.array_equal(outer.mean(S), inner.mean(S))
    assert np.array_equal(outer.std, inner.std)


def test_default_sigma_is_geometric_mean(pend):
    pols = [ConstantPolicy(pend, 0.0, std=0.1), ConstantPolicy(pend, 0.0, std=0.4)]
    assert mx.default_sigma(pols)[0] == pytest.approx(0.2, rel=1e-12)


# ----------------------------------------------------------------------
# KL estimator

GAUSS_CASES = [
    (lambda r, n: r.normal(size=(n, 1)), lambda r, n: r.normal(size=(n, 1)), 0.0),
    (lambda r, n: r.normal(size=(n, 1)), lambda r, n: r.normal(1.0, size=(n, 1)), 0.5),
    (lambda r, n: r.normal(size=(n, 2)), lambda r, n: r.normal(0, 2.0, size=(n, 2)), np.log(4) + 0.25 - 1),
]


@pytest.mark.parametrize("p,q,kl", GAUSS_CASES)
def test_knn_gaussian_suite(p, q, kl):
    rng = np.random.default_rng(0)
    est = mx.knn_kl_estimate(p(rng, 2000), q(rng, 2000), k=4)
    tol = 0.1 if kl == 0.0 else 0.15
    assert abs(est - kl) <= tol


def test_knn_analytic_values():
    assert GAUSS_CASES[2][2] == pytest.approx(0.636, abs=1e-3)


@pytest.mark.parametrize("p,q,kl", GAUSS_CASES)
def test_knn_converges_with_n(p, q, kl):
    def med(n):
        errs = []
        for seed in range(20):
            r = np.random.default_rng(seed)
            errs.append(abs(mx.knn_kl_estimate(p(r, n), q(r, n)) - kl))
        return np.median(errs)

    assert med(1500) < med(500)


def test_knn_permutation_invariant():
    rng = np.random.default_rng(0)
    p, q = rng.normal(size=(200, 3)), rng.normal(0.5, size=(150, 3))
    base = mx.knn_kl_estimate(p, q)
    assert mx.knn_kl_estimate(p[rng.permutation(200)], q[rng.permutation(150)]) == base


def test_knn_duplicates_use_jitter():
    p = np.repeat(np.arange(20.0)[:, None], 6, axis=0)
    est = mx.knn_kl_estimate(p, p.copy())
    assert np.isfinite(est)


def test_knn_contracts():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError):
        mx.knn_kl_estimate(rng.normal(size=(4, 1)), rng.normal(size=(10, 1)), k=4)
    with pytest.raises(ContractError):
        mx.knn_kl_estimate(rng.normal(size=(10, 1)), rng.normal(size=(3, 1)), k=4)
    with pytest.raises(ContractError):
        mx.knn_kl_estimate(rng.normal(size=(10, 1)), rng.normal(size=(10, 2)))


# ----------------------------------------------------------------------
# trajectory KL


class _Replay:
    """Emits the recorded action for each recorded state, zero elsewhere."""

    def __init__(self, traj):
        self.table = {s.tobytes(): a for s, a in zip(traj.states, traj.actions)}
        self.action_dim = traj.actions.shape[1]
        self.std = np.zeros(self.action_dim)

    def mean(self, states):
        return np.array([self.table.get(s.tobytes(), np.zeros(self.action_dim)) for s in states])


def _self_floor(env, pol, seed, reps=5):
    vals = []
    for r in range(reps):
        rng = np.random.default_rng([seed, r])
        demo = envsim.rollout(env, pol, rng=rng)
        vals.append(mx.trajectory_kl(demo, pol, env, 5, rng))
    return abs(float(np.mean(vals)))


def test_replay_is_at_noise_floor(pend):
    demo = envsim.rollout(pend, demogen.strategy_by_id(pend.id, "hold-left").policy(pend),
                          rng=np.random.default_rng(0))
    replay = _Replay(demo)
    S, A, R, F = envsim.simulate(pend, replay.mean, replay.std, demo.states[:1],
                                 np.zeros((1, len(demo), 1)))
    assert np.array_equal(S[0], demo.states)
    rerun = envsim.Trajectory(S[0], A[0], R[0], pend.gamma, F[0])
    assert abs(mx.trajectory_kl(demo, replay, pend, rollouts=[rerun])) <= 0.3


def test_random_policy_far_from_hold_left(pend):
    strat = demogen.strategy_by_id(pend.id, "hold-left").policy(pend)
    floor = _self_floor(pend, strat, 0)
    demo = envsim.rollout(pend, strat, rng=np.random.default_rng(1))
    rand = P.GaussianPolicy.create(pend, np.random.default_rng(2))
    assert mx.trajectory_kl(demo, rand, pend, 5, np.random.default_rng(3)) >= 3 * floor


def test_more_rollouts_lower_variance(pend):
    strat = demogen.strategy_by_id(pend.id, "hold-center").policy(pend)
    demo = envsim.rollout(pend, strat, rng=np.random.default_rng(0))
    one = [mx.trajectory_kl(demo, strat, pend, 1, np.random.default_rng(s)) for s in range(20)]
    five = [mx.trajectory_kl(demo, strat, pend, 5, np.random.default_rng(s)) for s in range(20)]
    assert np.var(five) < np.var(one)


def test_trajectory_kl_needs_rollouts(pend, constant_policy):
    demo = envsim.rollout(pend, constant_policy(pend, 0.0), 20, np.random.default_rng(0))
    with pytest.raises(ContractError):
        mx.trajectory_kl(demo, constant_policy(pend, 0.0), pend, 0)


# ----------------------------------------------------------------------
# simplex sampling and search


def test_sample_simplex_dim1():
    assert np.array_equal(mx.sample_simplex(1, np.random.default_rng(0)), [1.0])


def test_sample_simplex_sums_and_moments():
    rng = np.random.default_rng(0)
    W = np.array([mx.sample_simplex(3, rng) for _ in range(10_000)])
    assert np.all(W >= 0) and np.all(np.abs(W.sum(axis=1) - 1) <= 1e-12)
    assert np.all(np.abs(W.mean(axis=0) - 1 / 3) <= 0.01)


def test_sample_simplex_bad_dim():
    with pytest.raises(ContractError):
        mx.sample_simplex(0, np.random.default_rng(0))


def test_candidates_layout():
    c = mx.candidate_weights(3, 10, np.random.default_rng(0))
    assert c.shape == (10, 3)
    assert np.array_equal(c[:3], np.eye(3)) and np.allclose(c[3], 1 / 3)
    with pytest.raises(ContractError):
        mx.candidate_weights(3, 3, np.random.default_rng(0))


def _hold_policies(env, ids=("hold-center", "hold-left", "hold-right")):
    return [demogen.strategy_by_id(env.id, i).policy(env) for i in ids]


def test_search_single_policy(pend):
    pol = _hold_policies(pend)[:1]
    demo = envsim.rollout(pend, pol[0], rng=np.random.default_rng(0))
    res = mx.optimize_mixture_weights(demo, pol, pend, budget=64, rng=np.random.default_rng(1))
    assert np.array_equal(res.weights.w, [1.0]) and len(res.kls) == 1
    seed = int(np.random.default_rng(1).bit_generator.random_raw())
    direct = mx.trajectory_kl(demo, mx.mixture_policy([1.0], pol), pend, 5, np.random.default_rng(seed))
    assert res.kl == pytest.approx(direct, abs=1e-12)


def test_search_no_policies(pend, constant_policy):
    demo = envsim.rollout(pend, constant_policy(pend, 0.0), 20, np.random.default_rng(0))
    with pytest.raises(PreconditionError):
        mx.optimize_mixture_weights(demo, [], pend)


def test_search_recovers_generating_policy(pend):
    pols = _hold_policies(pend, ("hold-left", "hold-right", "slow-oscillate"))
    demo = envsim.rollout(pend, pols[1], rng=np.random.default_rng(0))
    res = mx.optimize_mixture_weights(demo, pols, pend, budget=64, rng=np.random.default_rng(1))
    assert res.weights.w[1] >= 0.8


def test_search_mixture_dominates_one_hots(pend):
    base = [demogen.strategy_by_id(pend.id, i) for i in ("hold-left", "hold-right")]
    demo = demogen.generate_mixture_demos(pend, base, 1, seed=0, weights=[[0.5, 0.5]],
                                          include_base=False)[0].trajectory
    pols = [b.policy(pend) for b in base]
    res = mx.optimize_mixture_weights(demo, pols, pend, budget=64, rng=np.random.default_rng(1))
    assert res.kl <= res.kls[0] and res.kl <= res.kls[1]
    assert res.kl == res.kls.min() and res.best_index == int(np.argmin(res.kls))


def test_search_is_batch_independent(pend):
    pols = _hold_policies(pend)
    demo = envsim.rollout(pend, pols[0], 60, np.random.default_rng(0))
    cands = mx.candidate_weights(3, 8, np.random.default_rng(0))
    sigma = mx.default_sigma(pols)
    whole = mx.evaluate_candidates(demo, pols, pend, cands, sigma, 3,
                                   [np.random.default_rng(c) for c in range(8)])
    single = [mx.evaluate_candidates(demo, pols, pend, cands[c:c + 1], sigma, 3,
                                     [np.random.default_rng(c)])[0] for c in range(8)]
    assert np.allclose(whole, single, rtol=0, atol=1e-12)


def test_search_deterministic_and_trace(pend, tmp_path):
    pols = _hold_policies(pend)
    demo = envsim.rollout(pend, pols[2], 60, np.random.default_rng(0))
    a = mx.optimize_mixture_weights(demo, pols, pend, budget=16, rng=np.random.default_rng(5))
    b = mx.optimize_mixture_weights(demo, pols, pend, budget=16, rng=np.random.default_rng(5))
    assert np.array_equal(a.kls, b.kls) and np.array_equal(a.weights.w, b.weights.w)
    w, kl = a
    assert kl == a.kl
    a.write_trace(tmp_path / "trace.csv")
    rows = (tmp_path / "trace.csv").read_text().splitlines()
    assert rows[0] == "candidate,w0,w1,w2,kl" and len(rows) == 17
    assert float(rows[1 + a.best_index].split(",")[-1]) == a.kl


def test_absorbing_tail_counts_once():
    s = np.vstack([np.arange(12.0).reshape(6, 2), np.tile([[9.0, 9.0]], (20, 1))])
    out = mx.absorbing_collapsed(s, k=4)
    assert len(out) == 7 and np.array_equal(out[-1], [9.0, 9.0])
    # too few distinct rows: keep everything
    short = np.vstack([np.zeros((1, 2)), np.ones((10, 2))])
    assert len(mx.absorbing_collapsed(short, k=4)) == 11


def test_lander_self_kl_below_cross_kl(lander):
    strats = demogen.builtin_strategies(lander.id)
    pols = [s.policy(lander) for s in strats]
    for a in range(len(pols)):
        demo = envsim.rollout(lander, pols[a], rng=np.random.default_rng(a))
        kls = [mx.trajectory_kl(demo, p, lander, 3, np.random.default_rng(100 + a)) for p in pols]
        assert int(np.argmin(kls)) == a, strats[a].id
