import numpy as np
import pytest

from dmsrd import demogen, envsim, mixture
from dmsrd import diffcore as dc
from dmsrd import policy as P
from dmsrd import rewardlearn as rl
from dmsrd.errors import ContractError, NumericalError, PreconditionError, RegistryIntegrityError


def _rel_err(a, b):
    a, b = dc.flatten_tree(a), dc.flatten_tree(b)
    # floor keeps roundoff on near-zero components from dominating
    return np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b)))


def _zero_net(net):
    return net.with_params(net.params.map(np.zeros_like))


def _const_net(net, value):
    p = net.params.map(np.zeros_like)
    last = net.spec.n_layers - 1
    p[f"b{last}"] = np.array([value], dtype=float)
    return net.with_params(p)


@pytest.fixture
def pol(pend):
    return P.GaussianPolicy.create(pend, np.random.default_rng(0), hidden=(6,), init_std=0.4)


@pytest.fixture
def disc(pend):
    return rl.AIRLDiscriminator.create(pend, np.random.default_rng(1), hidden=(6,), bounded_reward=False)


def _batch(env, pol, n, seed, horizon=12):
    return envsim.rollout(env, pol, horizon, np.random.default_rng(seed), n=n)


# ----------------------------------------------------------------------
# discriminator


def test_prob_balance_point(pend, pol, disc):
    s, s2 = np.zeros(4), np.full(4, 0.01)
    a = pol.mean(s)
    logp = P.log_prob(pol, s[None], a[None])[0]
    d = rl.AIRLDiscriminator(_const_net(disc.g, logp), disc.h_spec, disc.h_params.map(np.zeros_like), disc.gamma)
    assert rl.discriminator_prob(d, pol, s, a, s2) == pytest.approx(0.5, abs=1e-12)


def test_prob_closed_form(pend, pol, disc):
    # g = 1, h = 0 and pi(a|s) = 1
    s = np.zeros(4)
    std = 1.0 / np.sqrt(2 * np.pi)
    p1 = pol.with_params(log_std=np.log([std]))
    d = rl.AIRLDiscriminator(_const_net(disc.g, 1.0), disc.h_spec, disc.h_params.map(np.zeros_like), disc.gamma)
    got = rl.discriminator_prob(d, p1, s, p1.mean(s), s)
    assert got == pytest.approx(np.e / (np.e + 1), abs=1e-12)


def test_prob_limit_and_clip(pend, pol, disc):
    s = np.zeros(4)
    d = rl.AIRLDiscriminator(_const_net(disc.g, -1e6), disc.h_spec, disc.h_params.map(np.zeros_like), disc.gamma)
    p = rl.discriminator_prob(d, pol, s, pol.mean(s), s)
    assert 0.0 < p < 1e-8  # logit clipped at -20


def test_prob_monotone_in_g(pend, pol, disc):
    rng = np.random.default_rng(0)
    S, A, S2 = rng.normal(size=(20, 4)) * 0.1, rng.normal(size=(20, 1)) * 0.3, rng.normal(size=(20, 4)) * 0.1
    probs = []
    for g in np.linspace(-5, 5, 21):
        d = rl.AIRLDiscriminator(_const_net(disc.g, g), disc.h_spec, disc.h_params, disc.gamma)
        probs.append(rl.discriminator_prob(d, pol, S, A, S2))
    assert np.all(np.diff(np.array(probs), axis=0) > 0)


def test_prob_undefined_when_pi_zero(pend, pol, disc):
    p0 = pol.with_params(log_std=np.array([-400.0]))
    with np.errstate(over="ignore"), pytest.raises(NumericalError):
        rl.discriminator_prob(disc, p0, np.zeros(4), np.array([0.9]), np.zeros(4))


def test_airl_loss_uninformative_is_log4(pend, pol, disc):
    demo, gen = _batch(pend, pol, 2, 0), _batch(pend, pol, 2, 1)
    # f = log pi on every transition gives D = 0.5 everywhere: use h = 0 and patch logp
    dt, gt = rl.transitions(demo, pol), rl.transitions(gen, pol)
    d0 = rl.AIRLDiscriminator(_zero_net(disc.g), disc.h_spec, disc.h_params.map(np.zeros_like), disc.gamma)
    zero_logp = lambda b: rl.Transitions(b.states, b.actions, b.next_states, b.states_n, b.next_states_n,
                                         np.zeros(len(b)))
    loss = rl.airl_discriminator_loss(d0, zero_logp(dt), zero_logp(gt), pol)
    assert loss == pytest.approx(np.log(4.0), abs=1e-12)


def test_airl_loss_saturates_at_clip(pend, pol, disc):
    demo, gen = rl.transitions(_batch(pend, pol, 2, 0), pol), rl.transitions(_batch(pend, pol, 2, 1), pol)
    h0 = disc.h_params.map(np.zeros_like)
    # huge f on demos and tiny f on generator samples: both logits hit the +-20 clip
    hi, lo = _const_net(disc.g, 1e3), _const_net(disc.g, -1e3)
    demo_term = float(rl.airl_loss_t(hi, hi.params, disc.h_spec, h0, demo, demo, disc.gamma).value)
    gen_term = float(rl.airl_loss_t(lo, lo.params, disc.h_spec, h0, gen, gen, disc.gamma).value)
    floor = np.log1p(np.exp(-20.0))
    assert demo_term == pytest.approx(floor + 20.0 + floor, rel=1e-9)
    assert gen_term == pytest.approx(demo_term, rel=1e-9)


def test_airl_loss_matches_summation_oracle(pend, pol, disc):
    demo, gen = _batch(pend, pol, 2, 0), _batch(pend, pol, 3, 1)
    loss = rl.airl_discriminator_loss(disc, demo, gen, pol)
    dt, gt = rl.transitions(demo, pol), rl.transitions(gen, pol)
    d_demo = [rl.discriminator_prob(disc, pol, dt.states[i], dt.actions[i], dt.next_states[i]) for i in range(len(dt))]
    d_gen = [rl.discriminator_prob(disc, pol, gt.states[i], gt.actions[i], gt.next_states[i]) for i in range(len(gt))]
    oracle = -np.mean(np.log(d_demo)) - np.mean(np.log(1 - np.array(d_gen)))
    assert loss == pytest.approx(oracle, rel=1e-10)


def test_airl_loss_empty_batch(pend, pol, disc):
    gen = rl.transitions(_batch(pend, pol, 1, 1), pol)
    empty = rl._subset(gen, np.array([], dtype=int))
    with pytest.raises(ContractError):
        rl.airl_discriminator_loss(disc, empty, gen, pol)


@pytest.mark.parametrize("seed", range(20))
def test_airl_gradient_matches_fd(pend, seed):
    rng = np.random.default_rng(seed)
    pol = P.GaussianPolicy.create(pend, rng, hidden=(4,), init_std=0.5)
    d = rl.AIRLDiscriminator.create(pend, rng, hidden=(4,))
    d = rl.AIRLDiscriminator(d.g.with_params(d.g.params.map(lambda v: v + rng.normal(size=np.shape(v)))),
                             d.h_spec, d.h_params.map(lambda v: v + rng.normal(size=np.shape(v))), d.gamma)
    demo, gen = rl.transitions(_batch(pend, pol, 1, seed, 6), pol), rl.transitions(_batch(pend, pol, 1, seed + 100, 6), pol)
    theta = {"g": d.g.params, "h": d.h_params}
    f_t = lambda p: rl.airl_loss_t(d.g, p["g"], d.h_spec, p["h"], demo, gen, d.gamma)
    f_np = lambda p: float(f_t(dc._tree_map(dc.Tensor, p)).value)
    _, g = dc.gradient(f_t, theta)
    assert _rel_err(g, dc.finite_difference(f_np, theta)) <= 1e-4


# ----------------------------------------------------------------------
# decomposition and MSRD


def _decomp(env, M, seed, alpha=0.3, hidden=(4,)):
    rng = np.random.default_rng(seed)
    task = rl.RewardNet.create(env, rng, hidden)
    strategies = [rl.RewardNet.create(env, rng, hidden, bounded=True) for _ in range(M)]
    jitter = lambda net: net.with_params(net.params.map(lambda v: v + rng.normal(size=np.shape(v))))
    return rl.RewardDecomposition(jitter(task), tuple(jitter(s) for s in strategies), alpha)


def test_combined_reward_pointwise(pend):
    dec = _decomp(pend, 2, 0)
    S = np.random.default_rng(1).normal(size=(100, 4))
    for j in range(2):
        assert np.allclose(rl.combined_reward(dec, j)(S), dec.task(S) + 0.3 * dec.strategies[j](S), atol=1e-14)


def test_combined_reward_special_cases(pend):
    dec = _decomp(pend, 2, 0)
    S = np.random.default_rng(1).normal(size=(10, 4))
    no_alpha = rl.RewardDecomposition(dec.task, dec.strategies, 0.0)
    assert np.array_equal(rl.combined_reward(no_alpha, 1)(S), dec.task(S))
    no_task = rl.RewardDecomposition(_zero_net(dec.task), dec.strategies, 0.3)
    assert np.allclose(rl.combined_reward(no_task, 0)(S), 0.3 * dec.strategies[0](S), atol=1e-15)
    with pytest.raises(ContractError):
        rl.combined_reward(dec, 2)
    with pytest.raises(ContractError):
        rl.RewardDecomposition(dec.task, dec.strategies, -0.1)


def _msrd_inputs(env, M, seed, hidden=(4,)):
    rng = np.random.default_rng(seed)
    pols = [P.GaussianPolicy.create(env, rng, hidden, init_std=0.5) for _ in range(M)]
    h_spec = dc.mlp(env.state_dim, 1, hidden)
    shaping = {str(j): dc.init_params(h_spec, rng).map(lambda v: v + rng.normal(size=np.shape(v))) for j in range(M)}
    demos = [rl.transitions(_batch(env, pols[j], 1, seed + j, 5), pols[j]) for j in range(M)]
    gens = [rl.transitions(_batch(env, pols[j], 1, seed + 50 + j, 5), pols[j]) for j in range(M)]
    return pols, h_spec, shaping, demos, gens


def test_msrd_alpha_zero_is_sum_of_airl(pend):
    dec = _decomp(pend, 2, 0, alpha=0.0)
    _, h_spec, shaping, demos, gens = _msrd_inputs(pend, 2, 0)
    total = rl.msrd_loss(dec, shaping, h_spec, demos, gens, pend.gamma)
    parts = sum(float(rl.airl_loss_t(dec.task, dec.task.params, h_spec, dc._tree_map(dc.Tensor, shaping[str(j)]),
                                     demos[j], gens[j], pend.gamma).value) for j in range(2))
    assert total == pytest.approx(parts, rel=1e-12)


def test_msrd_zero_strategy_reward_no_regularizer(pend):
    dec = _decomp(pend, 2, 0, alpha=0.5)
    zero = rl.RewardDecomposition(dec.task, tuple(_zero_net(s) for s in dec.strategies), 0.5)
    off = rl.RewardDecomposition(dec.task, zero.strategies, 0.0)
    _, h_spec, shaping, demos, gens = _msrd_inputs(pend, 2, 0)
    assert rl.msrd_loss(zero, shaping, h_spec, demos, gens, pend.gamma) == pytest.approx(
        rl.msrd_loss(off, shaping, h_spec, demos, gens, pend.gamma), abs=1e-14)


def test_msrd_matches_expanded_oracle(pend):
    dec = _decomp(pend, 2, 3, alpha=0.2)
    _, h_spec, shaping, demos, gens = _msrd_inputs(pend, 2, 3)
    got = rl.msrd_loss(dec, shaping, h_spec, demos, gens, pend.gamma)
    oracle = 0.0
    for j in range(2):
        def logit(b):
            g = dec.task(b.states) + 0.2 * dec.strategies[j](b.states)
            h = lambda x: dc.forward(h_spec, shaping[str(j)], envsim.normalize(pend, x))[:, 0]
            return np.clip(g + pend.gamma * h(b.next_states) - h(b.states) - b.logp, -20, 20)
        ld, lg = logit(demos[j]), logit(gens[j])
        oracle += np.mean(np.log1p(np.exp(-ld))) + np.mean(np.log1p(np.exp(lg)))
        oracle += 0.2 * np.mean(np.abs(dec.strategies[j](gens[j].states)))
    assert got == pytest.approx(oracle, abs=1e-10)


def test_msrd_preconditions(pend):
    dec = _decomp(pend, 1, 0)
    _, h_spec, shaping, demos, gens = _msrd_inputs(pend, 2, 0)
    with pytest.raises(PreconditionError):
        rl.msrd_loss(dec, shaping, h_spec, demos[:1], gens[:1], pend.gamma)
    dec2 = _decomp(pend, 2, 0)
    empty = rl._subset(demos[0], np.array([], dtype=int))
    with pytest.raises(ContractError):
        rl.msrd_loss(dec2, shaping, h_spec, [demos[0], empty], gens, pend.gamma)


@pytest.mark.parametrize("seed", range(20))
def test_msrd_gradient_matches_fd(pend, seed):
    dec = _decomp(pend, 2, seed)
    _, h_spec, shaping, demos, gens = _msrd_inputs(pend, 2, seed)
    params = {"theta": dec.theta(), "shaping": shaping}
    f_t = lambda p: rl.msrd_loss_t(dec, p["theta"], p["shaping"], h_spec, demos, gens, pend.gamma)
    f_np = lambda p: float(f_t(dc._tree_map(dc.Tensor, p)).value)
    _, g = dc.gradient(f_t, params)
    assert _rel_err(g, dc.finite_difference(f_np, params)) <= 1e-4


def test_msrd_shared_task_coupling(pend):
    # strategy 0's cross-entropy term reaches the task reward but never strategy 1's reward
    dec = _decomp(pend, 2, 5)
    _, h_spec, shaping, demos, gens = _msrd_inputs(pend, 2, 5)
    sh = dc._tree_map(dc.Tensor, shaping["0"])

    def term0(p):
        g = lambda b: dec.task.forward_t(p["task"], b.states_n) + dec.alpha * dec.strategies[0].forward_t(
            p["strategies"]["0"], b.states_n)
        ld = rl._logit_t(g(demos[0]), h_spec, sh, demos[0], pend.gamma)
        lg = rl._logit_t(g(gens[0]), h_spec, sh, gens[0], pend.gamma)
        return -dc.log_sigmoid(ld).mean() - dc.log_sigmoid(-lg).mean() + p["strategies"]["1"]["b0"].sum() * 0.0

    _, g0 = dc.gradient(term0, dec.theta())
    assert np.all(dc.flatten_tree(g0["strategies"]["1"]) == 0.0)
    assert np.any(dc.flatten_tree(g0["task"]) != 0)
    assert np.any(dc.flatten_tree(g0["strategies"]["0"]) != 0)


# ----------------------------------------------------------------------
# BCD


def _const_traj(env, state, T=7, gamma=0.9):
    return envsim.Trajectory(np.tile(state, (T, 1)), np.zeros((T, 1)), np.zeros(T), gamma, state)


def test_bcd_zero_rewards_half_half(pend):
    dec = _decomp(pend, 2, 0)
    zero = rl.RewardDecomposition(dec.task, tuple(_zero_net(s) for s in dec.strategies), dec.alpha)
    rng = np.random.default_rng(0)
    demos = [envsim.Trajectory(rng.normal(size=(5, 4)), np.zeros((5, 1)), np.zeros(5), 0.9, np.zeros(4))
             for _ in range(3)]
    assert rl.bcd_loss(zero, demos[0], [0.5, 0.5], demos[1:]) == pytest.approx(0.5, abs=1e-15)


def test_bcd_theorem_case_is_zero(pend):
    # constant-state trajectories make eta(tau) = R(s) exactly; choose rewards so that
    # exp(eta_j(tau_i)) = w_j exp(eta_j(tau_mj)) for both strategies
    w = np.array([0.3, 0.7])
    s_i = np.array([0.1, 0.0, 0.0, 0.0])
    pure = [np.array([-0.4, 0.0, 0.0, 0.0]), np.array([0.5, 0.0, 0.0, 0.0])]
    nets = []
    for j in range(2):
        net = rl.RewardNet.create(pend, np.random.default_rng(j), (1,))  # unbounded head
        p = net.params.map(np.zeros_like)
        p["W0"][0, 0] = 1.0  # hidden = tanh(x / 0.5)
        u = lambda x: np.tanh(x / 0.5)
        p["W1"][0, 0] = np.log(w[j]) / (u(s_i[0]) - u(pure[j][0]))
        nets.append(net.with_params(p))
    dec = rl.RewardDecomposition(nets[0], tuple(nets), 0.1)
    loss = rl.bcd_loss(dec, _const_traj(pend, s_i), w, [_const_traj(pend, p) for p in pure])
    assert loss <= 1e-24


def test_bcd_one_hot_limit(pend):
    # tau_i = tau_mk, one-hot on k, foreign strategy returns -> -inf: loss -> 0
    rng = np.random.default_rng(0)
    d0 = envsim.Trajectory(rng.normal(size=(6, 4)), np.zeros((6, 1)), np.zeros(6), 0.9, np.zeros(4))
    d1 = envsim.Trajectory(rng.normal(size=(6, 4)), np.zeros((6, 1)), np.zeros(6), 0.9, np.zeros(4))
    base = rl.RewardNet.create(pend, rng, (3,))
    losses = []
    for b in (-1.0, -10.0, -50.0):
        own = _const_net(base, 0.4)
        foreign = _const_net(base, b)
        dec = rl.RewardDecomposition(base, (own, foreign), 0.1)
        losses.append(rl.bcd_loss(dec, d0, [1.0, 0.0], [d0, d1]))
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-40


def test_bcd_matches_hand_formula(pend):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        dec = _decomp(pend, 3, seed)
        trajs = [envsim.Trajectory(rng.normal(size=(8, 4)), np.zeros((8, 1)), np.zeros(8), 0.95, np.zeros(4))
                 for _ in range(4)]
        w = rng.dirichlet(np.ones(3))
        got = rl.bcd_loss(dec, trajs[0], w, trajs[1:])
        disc_w = 0.95 ** np.arange(8)
        eta = lambda j, t: float(np.sum(disc_w * dec.strategies[j](t.states)) / disc_w.sum())
        oracle = sum((np.exp(eta(j, trajs[0])) - w[j] * np.exp(eta(j, trajs[j + 1]))) ** 2 for j in range(3))
        assert got == pytest.approx(oracle, abs=1e-10)


def test_bcd_contracts(pend):
    dec = _decomp(pend, 2, 0)
    t = _const_traj(pend, np.zeros(4))
    with pytest.raises(ContractError):
        rl.bcd_loss(dec, t, [0.6, 0.6], [t, t])
    with pytest.raises(ContractError):
        rl.bcd_loss(dec, t, [1.0], [t])
    with pytest.raises(RegistryIntegrityError):
        rl.bcd_loss(dec, t, [0.5, 0.5], [t, None])


def test_bcd_bounded_range(pend):
    dec = _decomp(pend, 2, 0)
    S = np.random.default_rng(0).normal(size=(50, 4)) * 10
    for s in dec.strategies:
        assert np.all(np.abs(s(S)) <= 1.0)


@pytest.mark.parametrize("seed", range(20))
def test_bcd_gradient_matches_fd(pend, seed):
    rng = np.random.default_rng(seed)
    dec = _decomp(pend, 2, seed)
    trajs = [envsim.Trajectory(rng.normal(size=(5, 4)), np.zeros((5, 1)), np.zeros(5), 0.9, np.zeros(4))
             for _ in range(4)]
    data = rl.BCDData.build(pend, trajs, 0.9)
    W = rng.dirichlet(np.ones(2), size=2)
    params = {str(j): s.params for j, s in enumerate(dec.strategies)}
    f_t = lambda p: rl.bcd_loss_t(dec, p, data, [0, 1], [2, 3], W)
    f_np = lambda p: float(f_t(dc._tree_map(dc.Tensor, p)).value)
    _, g = dc.gradient(f_t, params)
    assert _rel_err(g, dc.finite_difference(f_np, params)) <= 1e-4


# ----------------------------------------------------------------------
# single-demo AIRL


FAST = rl.AIRLConfig(iterations=3, hidden=(8,), bc_epochs=50, bc_weight_decays=(1e-4,), eval_every=1,
                     ppo=P.PPOConfig(rollouts_per_iter=2, policy_lr=1e-4))


def test_airl_deterministic(pend):
    demo = demogen.strategy_by_id(pend.id, "hold-center").policy(pend)
    traj = envsim.rollout(pend, demo, 60, np.random.default_rng(0))
    a = rl.train_new_strategy_airl(traj, pend, rng=np.random.default_rng(3), config=FAST)
    b = rl.train_new_strategy_airl(traj, pend, rng=np.random.default_rng(3), config=FAST)
    for x, y in ((a.policy.params, b.policy.params), (a.reward.params, b.reward.params), (a.shaping, b.shaping)):
        assert all(np.array_equal(x[k], y[k]) for k in x)
    assert np.array_equal(a.policy.log_std, b.policy.log_std)
    assert [t["disc_loss"] for t in a.trace] == [t["disc_loss"] for t in b.trace]


def test_airl_zero_action_demo(pend):
    T = 100
    traj = envsim.Trajectory(np.zeros((T, 4)), np.zeros((T, 1)), np.zeros(T), pend.gamma, np.zeros(4))
    cfg = rl.AIRLConfig(iterations=5, bc_epochs=300, bc_weight_decays=(1e-4,),
                        ppo=P.PPOConfig(rollouts_per_iter=4, policy_lr=1e-4))
    out = rl.train_new_strategy_airl(traj, pend, rng=np.random.default_rng(0), config=cfg)
    assert abs(out.policy.mean(np.zeros((1, 4)))[0, 0]) < 0.2


@pytest.mark.slow
def test_airl_hold_center_beats_random_policy(pend):
    strat = demogen.strategy_by_id(pend.id, "hold-center")
    traj = envsim.rollout(pend, strat.policy(pend), rng=np.random.default_rng(0))
    kl_fn = lambda p, r: mixture.trajectory_kl(traj, p, pend, 5, r)
    out = rl.train_new_strategy_airl(traj, pend, rng=np.random.default_rng(1), kl_fn=kl_fn)
    random_pol = P.GaussianPolicy.create(pend, np.random.default_rng(2))
    learned = mixture.trajectory_kl(traj, out.policy, pend, 10, np.random.default_rng(5))
    baseline = mixture.trajectory_kl(traj, random_pol, pend, 10, np.random.default_rng(5))
    assert learned <= 0.5 * baseline


def test_refit_std_is_residual_rms(pend, pol):
    traj = envsim.rollout(pend, pol, 50, np.random.default_rng(0))
    out = rl.refit_std(pol, traj)
    resid = traj.actions - pol.mean(traj.states)
    assert out.std[0] == pytest.approx(np.sqrt(np.mean(resid ** 2)), rel=1e-12)
