"""Desk-scale continuous-control environments and trajectory rollouts.

Two environments are provided, both pure step functions with no termination:

``pendulum-lite``
    Cart-pole. State ``(x, theta, x_dot, theta_dot)`` with ``theta`` measured
    from upright (positive leans toward +x). Action in ``[-1, 1]`` scales a
    10 N cart force. Reward ``-|theta|`` (angle wrapped to ``[-pi, pi]``) for
    the state the action is taken from.

``lander-lite``
    Point-mass lander with two legs. State
    ``(x, y, x_dot, y_dot, left_contact, right_contact, status)``; ``status``
    is 0 while flying, +1 once landed and -1 once crashed. Action is
    ``(main, lateral)`` with ``main in [0, 1]`` and ``lateral in [-1, 1]``.
    Touchdown (``y <= 0``) with ``|y_dot| <= 0.3`` lands, faster crashes;
    either event freezes the state. Reward: +100 landing, -100 crash,
    +10 per leg at touchdown, ``-0.3 * main`` for firing the main engine.

All functions accept a single state or a row-batch of states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, IntegrityError, NumericalError


@dataclass(frozen=True)
class EnvSpec:
    id: str
    state_dim: int
    action_dim: int
    action_low: tuple
    action_high: tuple
    horizon: int
    dt: float
    gamma: float

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ConfigError("action bounds must match action_dim")
        if not all(lo < hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ConfigError("action_low must be below action_high element-wise")

    @property
    def low(self):
        return np.asarray(self.action_low, dtype=float)

    @property
    def high(self):
        return np.asarray(self.action_high, dtype=float)

    def clip_action(self, action):
        return np.clip(action, self.low, self.high)

    def to_dict(self):
        return {"id": self.id, "horizon": self.horizon, "gamma": self.gamma, "dt": self.dt}


# ----------------------------------------------------------------------
# pendulum-lite

CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
GRAVITY = 9.8
FORCE_SCALE = 10.0


def wrap_angle(theta):
    return (np.asarray(theta) + np.pi) % (2.0 * np.pi) - np.pi


def _pendulum_reset(rng, n):
    return rng.uniform(-0.05, 0.05, size=(n, 4))


def _pendulum_step(env, s, a):
    x, th, xd, thd = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
    force = FORCE_SCALE * a[:, 0]
    total = CART_MASS + POLE_MASS
    sin, cos = np.sin(th), np.cos(th)
    temp = (force + POLE_MASS * POLE_HALF_LENGTH * thd * thd * sin) / total
    th_acc = (GRAVITY * sin - cos * temp) / (
        POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total))
    x_acc = temp - POLE_MASS * POLE_HALF_LENGTH * th_acc * cos / total
    # semi-implicit Euler: velocities first, positions from new velocities
    xd_new = xd + env.dt * x_acc
    thd_new = thd + env.dt * th_acc
    nxt = np.stack([x + env.dt * xd_new, th + env.dt * thd_new, xd_new, thd_new], axis=1)
    reward = -np.abs(wrap_angle(th))
    return nxt, reward


def pendulum_energy(state):
    """Total mechanical energy of the cart-pole (uniform rod), zero-force case."""
    s = np.atleast_2d(state)
    xd, th, thd = s[:, 2], s[:, 1], s[:, 3]
    l = POLE_HALF_LENGTH
    vx = xd + l * thd * np.cos(th)
    vy = -l * thd * np.sin(th)
    inertia = POLE_MASS * l * l / 3.0
    kinetic = 0.5 * CART_MASS * xd ** 2 + 0.5 * POLE_MASS * (vx ** 2 + vy ** 2) + 0.5 * inertia * thd ** 2
    potential = POLE_MASS * GRAVITY * l * np.cos(th)
    out = kinetic + potential
    return out if np.ndim(state) > 1 else float(out[0])


# ----------------------------------------------------------------------
# lander-lite

LANDER_GRAVITY = 1.0
MAIN_ACCEL = 2.0
LATERAL_ACCEL = 0.5
SOFT_LANDING_SPEED = 0.3
LANDING_REWARD = 100.0
CRASH_REWARD = -100.0
LEG_CONTACT_REWARD = 10.0
MAIN_ENGINE_COST = 0.3


def _lander_reset(rng, n):
    s = np.zeros((n, 7))
    s[:, 0] = rng.uniform(-0.05, 0.05, size=n)
    s[:, 1] = 1.0
    s[:, 2] = rng.uniform(-0.05, 0.05, size=n)
    return s


def _lander_step(env, s, a):
    main, lateral = a[:, 0], a[:, 1]
    flying = s[:, 6] == 0.0
    vx = s[:, 2] + env.dt * LATERAL_ACCEL * lateral
    vy = s[:, 3] + env.dt * (MAIN_ACCEL * main - LANDER_GRAVITY)
    x = s[:, 0] + env.dt * vx
    y = s[:, 1] + env.dt * vy
    touch = flying & (y <= 0.0)
    soft = np.abs(vy) <= SOFT_LANDING_SPEED

    nxt = s.copy()
    fly = flying & ~touch
    nxt[fly, 0], nxt[fly, 1], nxt[fly, 2], nxt[fly, 3] = x[fly], y[fly], vx[fly], vy[fly]
    nxt[touch, 0] = x[touch]
    nxt[touch, 1] = 0.0
    nxt[touch, 2:4] = 0.0
    nxt[touch, 4:6] = 1.0
    nxt[touch, 6] = np.where(soft[touch], 1.0, -1.0)

    reward = -MAIN_ENGINE_COST * main
    reward = reward + touch * (np.where(soft, LANDING_REWARD, CRASH_REWARD) + 2 * LEG_CONTACT_REWARD)
    return nxt, reward


# ----------------------------------------------------------------------
# registry of environments


@dataclass(frozen=True)
class _Dynamics:
    defaults: dict
    reset: object
    step: object
    norm_offset: tuple
    norm_scale: tuple
    state_names: tuple = field(default=())


_ENVS = {
    "pendulum-lite": _Dynamics(
        defaults=dict(state_dim=4, action_dim=1, action_low=(-1.0,), action_high=(1.0,),
                      horizon=200, dt=0.02, gamma=0.99),
        reset=_pendulum_reset, step=_pendulum_step,
        norm_offset=(0.0, 0.0, 0.0, 0.0), norm_scale=(0.5, 0.05, 0.5, 0.25),
        state_names=("x", "theta", "x_dot", "theta_dot")),
    "lander-lite": _Dynamics(
        defaults=dict(state_dim=7, action_dim=2, action_low=(0.0, -1.0), action_high=(1.0, 1.0),
                      horizon=150, dt=0.05, gamma=0.99),
        reset=_lander_reset, step=_lander_step,
        norm_offset=(0.0, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0),
        norm_scale=(0.5, 0.5, 0.25, 0.25, 0.5, 0.5, 1.0),
        state_names=("x", "y", "x_dot", "y_dot", "left_contact", "right_contact", "status")),
}

# horizons used in the original full-scale experiments
PAPER_HORIZONS = {"pendulum-lite": 1000, "lander-lite": 500}


def register_env(env_id, defaults, reset, step, norm_offset, norm_scale, state_names=()):
    """Add a custom environment. ``step(env, states, actions) -> (next, reward)`` on batches."""
    if env_id in _ENVS:
        raise ConfigError(f"environment id {env_id!r} already registered")
    _ENVS[env_id] = _Dynamics(dict(defaults), reset, step, tuple(norm_offset), tuple(norm_scale),
                              tuple(state_names))


def env_ids():
    return sorted(_ENVS)


def _dynamics(env_id):
    try:
        return _ENVS[env_id]
    except KeyError:
        raise ConfigError(f"unknown environment id {env_id!r}; known: {env_ids()}") from None


def make_env(env_id, horizon=None, gamma=None, dt=None):
    """Build the EnvSpec for ``env_id`` with optional overrides.

    ``horizon="paper"`` selects the full-scale horizon.
    """
    kw = dict(_dynamics(env_id).defaults)
    if horizon == "paper":
        horizon = PAPER_HORIZONS[env_id]
    if horizon is not None:
        kw["horizon"] = int(horizon)
    if gamma is not None:
        kw["gamma"] = float(gamma)
    if dt is not None:
        kw["dt"] = float(dt)
    return EnvSpec(id=env_id, **kw)


def state_names(env):
    return _dynamics(env.id).state_names


def normalize(env, states):
    """Fixed affine map applied to states before any learned approximator or distance."""
    d = _dynamics(env.id)
    return (np.asarray(states, dtype=float) - np.asarray(d.norm_offset)) / np.asarray(d.norm_scale)


def reset(env, rng, n=None):
    """Initial state(s). ``n=None`` returns a single state vector."""
    d = _dynamics(env.id)
    s = d.reset(rng, 1 if n is None else n)
    return s[0] if n is None else s


def step(env, state, action):
    """Advance one step. Returns ``(next_state, reward)``; actions are clamped to bounds."""
    d = _dynamics(env.id)
    single = np.ndim(state) == 1
    s = np.atleast_2d(np.asarray(state, dtype=float))
    a = np.atleast_2d(np.asarray(action, dtype=float))
    if s.shape[1] != env.state_dim or a.shape[1] != env.action_dim:
        raise ContractError(f"state/action shape {s.shape}/{a.shape} does not match {env.id}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a))):
        raise NumericalError("non-finite state or action passed to step()")
    a = env.clip_action(a)
    nxt, r = d.step(env, s, a)
    if single:
        return nxt[0], float(r[0])
    return nxt, r


def state_reward(env, states):
    """Environment reward as a function of state alone, where that is defined.

    Only pendulum-lite has a purely state-based reward.
    """
    if env.id != "pendulum-lite":
        raise ContractError(f"{env.id} reward depends on transitions, not states alone")
    s = np.atleast_2d(states)
    return -np.abs(wrap_angle(s[:, 1]))


# ----------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States ``s_1..s_T`` (one per action), actions, rewards and ``s_{T+1}``."""

    states: np.ndarray
    actions: np.ndarray
    env_rewards: np.ndarray
    gamma: float
    final_state: np.ndarray
    env_id: str = ""
    seed: object = None

    def __post_init__(self):
        for name in ("states", "actions", "env_rewards", "final_state"):
            arr = np.array(getattr(self, name), dtype=float, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.actions.ndim != 2 or self.states.ndim != 2:
            raise ContractError("states and actions must be 2-D arrays")
        if not (len(self.states) == len(self.actions) == len(self.env_rewards)):
            raise ContractError("states, actions and env_rewards must have equal length")

    def __len__(self):
        return len(self.actions)

    @property
    def next_states(self):
        return np.vstack([self.states[1:], self.final_state[None, :]])

    @property
    def env_return(self):
        return float(np.sum(self.env_rewards))

    def concat(self, other):
        return Trajectory(np.vstack([self.states, other.states]),
                          np.vstack([self.actions, other.actions]),
                          np.concatenate([self.env_rewards, other.env_rewards]),
                          self.gamma, other.final_state, self.env_id, self.seed)

    def same_as(self, other):
        return (self.gamma == other.gamma and self.env_id == other.env_id
                and all(np.array_equal(getattr(self, n), getattr(other, n))
                        for n in ("states", "actions", "env_rewards", "final_state")))


def draw_rollout_noise(env, rng, n, horizon):
    """Initial states and standard-normal action noise consumed by ``simulate``."""
    init = reset(env, rng, n)
    noise = rng.standard_normal((n, horizon, env.action_dim))
    return init, noise


def simulate(env, mean_fn, std, init, noise):
    """Roll out a Gaussian policy from pre-drawn randomness.

    ``mean_fn`` maps a (B, state_dim) batch to (B, action_dim) means; ``std``
    is a (action_dim,) or (B, action_dim) array. Returns ``(states, actions,
    rewards, final_states)`` arrays with a leading batch axis.
    """
    n, horizon, adim = noise.shape
    states = np.empty((n, horizon, env.state_dim))
    actions = np.empty((n, horizon, adim))
    rewards = np.empty((n, horizon))
    s = np.array(init, dtype=float)
    d = _dynamics(env.id)
    low, high = env.low, env.high
    for t in range(horizon):
        mu = np.asarray(mean_fn(s))
        if mu.shape != (n, adim):
            raise ContractError(f"policy output shape {mu.shape} != {(n, adim)}")
        a = np.clip(mu + std * noise[:, t], low, high)
        states[:, t] = s
        actions[:, t] = a
        s, rewards[:, t] = d.step(env, s, a)
    if not np.all(np.isfinite(states)):
        raise NumericalError(f"{env.id} rollout produced non-finite states")
    return states, actions, rewards, s


def rollout(env, policy, horizon=None, rng=None, n=None, seed=None):
    """Sample trajectories from ``policy``.

    ``policy`` needs ``mean(states)`` and ``std``. With ``n=None`` a single
    Trajectory is returned, otherwise a list of ``n``.
    """
    horizon = env.horizon if horizon is None else int(horizon)
    if horizon > env.horizon:
        raise ContractError(f"horizon {horizon} exceeds env horizon {env.horizon}")
    if rng is None:
        rng = np.random.default_rng(seed)
    count = 1 if n is None else n
    if policy.action_dim != env.action_dim:
        raise ContractError(f"policy action_dim {policy.action_dim} != env action_dim {env.action_dim}")
    init, noise = draw_rollout_noise(env, rng, count, horizon)
    S, A, R, F = simulate(env, policy.mean, policy.std, init, noise)
    trajs = [Trajectory(S[i], A[i], R[i], env.gamma, F[i], env.id, seed) for i in range(count)]
    return trajs[0] if n is None else trajs


def discounted_return(traj, reward_fn, gamma=None):
    """Sum over t of ``gamma**t * reward_fn(s_t)`` (t from 0)."""
    if len(traj) == 0:
        raise ContractError("discounted_return of an empty trajectory")
    gamma = traj.gamma if gamma is None else gamma
    r = np.asarray(reward_fn(traj.states), dtype=float).reshape(-1)
    return float(np.dot(gamma ** np.arange(len(r)), r))


# ----------------------------------------------------------------------
# serialization
#
# Line-delimited JSON. Line 1 is the header object:
#   {"format": "dmsrd-trajectory", "version": 1, "env": id, "horizon": T,
#    "gamma": g, "seed": seed, "state_dim": d, "action_dim": k, "meta": {...}}
# then T step records  [t, s_1..s_d, a_1..a_k, r]  (t from 0), and one final
# record  ["final", s_1..s_d]. Floats use shortest round-trip repr.

TRAJ_FORMAT = "dmsrd-trajectory"


def trajectory_to_lines(traj, meta=None):
    d, k = traj.states.shape[1], traj.actions.shape[1]
    header = {"format": TRAJ_FORMAT, "version": 1, "env": traj.env_id, "horizon": len(traj),
              "gamma": traj.gamma, "seed": traj.seed, "state_dim": d, "action_dim": k,
              "meta": meta or {}}
    lines = [json.dumps(header, sort_keys=True)]
    for t in range(len(traj)):
        rec = [t, *traj.states[t].tolist(), *traj.actions[t].tolist(), float(traj.env_rewards[t])]
        lines.append(json.dumps(rec))
    lines.append(json.dumps(["final", *traj.final_state.tolist()]))
    return lines


def write_trajectory(path, traj, meta=None):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(trajectory_to_lines(traj, meta)) + "\n")
    tmp.replace(path)


def read_trajectory(path):
    """Returns ``(Trajectory, meta)``."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        if header.get("format") != TRAJ_FORMAT:
            raise IntegrityError("not a trajectory file", path)
        d, k, T = header["state_dim"], header["action_dim"], header["horizon"]
        recs = [json.loads(line) for line in lines[1:T + 1]]
        final = json.loads(lines[T + 1])
    except (OSError, IndexError, KeyError, ValueError) as exc:
        raise IntegrityError(f"corrupt trajectory file ({exc})", path) from exc
    if len(recs) != T or final[0] != "final" or any(r[0] != t for t, r in enumerate(recs)):
        raise IntegrityError("trajectory records out of order or truncated", path)
    arr = np.array([r[1:] for r in recs], dtype=float).reshape(T, d + k + 1)
    traj = Trajectory(arr[:, :d], arr[:, d:d + k], arr[:, d + k], header["gamma"],
                      np.array(final[1:], dtype=float), header["env"], header["seed"])
    return traj, header.get("meta", {})


def with_horizon(env, horizon):
    return replace(env, horizon=int(horizon))
