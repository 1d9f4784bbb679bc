"""Q-learning with a PICNN Q-function on small continuous-control problems.

The network value ``f(s, a)`` is the negated Q-function, so it is convex in
the action and the greedy action is a convex minimization. Actions live in
network coordinates ``[0, 1]^d`` and are scaled to the environment bounds
only when they are applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import net
from .learn import AdamState, adam_update
from .solver import box_entropy, bundle_entropy, net_oracle, projected_gradient


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: float
    terminal: bool

    def __post_init__(self):
        a = np.asarray(self.a, float)
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("action outside [0, 1]")
        for v in (self.s, a, self.s_next, [self.r]):
            if not np.all(np.isfinite(v)):
                raise ValueError("non-finite transition entry")


class ReplayBuffer:
    """Fixed-capacity ring buffer with a seeded uniform sampler."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._items)

    def add(self, t: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(t)
        else:
            self._items[self._next] = t
        self._next = (self._next + 1) % self.capacity

    def sample(self, m: int) -> list[Transition]:
        if m > len(self._items):
            raise ValueError(f"cannot sample {m} from {len(self._items)} transitions")
        idx = self._rng.choice(len(self._items), size=m, replace=False)
        return [self._items[i] for i in idx]


def stack(batch):
    """Arrays ``(S, A, S_next, R, terminal)`` of a list of transitions."""
    return (np.array([t.s for t in batch], float), np.array([t.a for t in batch], float),
            np.array([t.s_next for t in batch], float), np.array([t.r for t in batch], float),
            np.array([t.terminal for t in batch], bool))


# -- environments ----------------------------------------------------------


class Env:
    """Base environment: ``reset(seed)``, ``step(a_env)``, bounds and horizon."""

    state_dim: int
    action_dim: int
    horizon: int
    lo: np.ndarray
    hi: np.ndarray
    # True when reaching the horizon is a time limit rather than a terminal state
    truncates = False

    def __init__(self):
        self._t = 0
        self._done = True
        self._rng = np.random.default_rng(0)

    @property
    def action_bounds(self):
        return self.lo, self.hi

    def to_env(self, a):
        return self.lo + (self.hi - self.lo) * np.asarray(a, float)

    def reset(self, seed=None):
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._t = 0
        self._done = False
        self.state = self._initial()
        return self.state.copy()

    def step(self, a_env):
        if self._done:
            raise EnvError("step called on a finished episode; call reset first")
        a_env = np.asarray(a_env, float).reshape(self.action_dim)
        self.state, r = self._transition(self.state, a_env)
        self._t += 1
        self._done = self._t >= self.horizon
        return self.state.copy(), float(r), self._done


class PointMassEnv(Env):
    state_dim, action_dim, horizon = 2, 1, 200
    dt = 0.05
    truncates = True

    def __init__(self, horizon=200):
        super().__init__()
        self.horizon = horizon
        self.lo, self.hi = np.array([-1.0]), np.array([1.0])

    def _initial(self):
        return self._rng.uniform(-1, 1, 2)

    def _transition(self, s, a):
        p, v = s
        r = -(p * p + 0.1 * v * v + 0.001 * a[0] * a[0])
        return np.array([p + self.dt * v, v + self.dt * a[0]]), r


class BanditEnv(Env):
    """One step; reward ``-(a_env - 0.4)^2``. The observed state is a constant."""

    state_dim, action_dim, horizon = 1, 1, 1

    def __init__(self, lo=-1.0, hi=1.0, optimum=0.4):
        super().__init__()
        self.lo, self.hi = np.array([lo]), np.array([hi])
        self.optimum = optimum

    def _initial(self):
        return np.ones(1)

    def _transition(self, s, a):
        return s.copy(), -(a[0] - self.optimum) ** 2


def env_pointmass(horizon=200) -> Env:
    return PointMassEnv(horizon)


def env_bandit() -> Env:
    return BanditEnv()


ENVS = {"pointmass": env_pointmass, "bandit": env_bandit}


# -- agent -----------------------------------------------------------------


@dataclass
class QAgentConfig:
    episodes: int = 100
    gamma: float = 0.99
    tau: float = 0.01
    noise: float = 0.1
    solver: str = "bundle"  # or "gradient"
    K: int = 5
    entropy_eps: float = 1.0
    pg_steps: int = 20
    pg_alpha: float = 0.1
    pg_momentum: float = 0.3
    batch: int = 32
    capacity: int = 100_000
    lr: float = 1e-3
    updates_per_step: int = 1
    reward_scale: float = 1.0  # applied to stored rewards only; logged returns are raw
    layer_widths: tuple = (32, 32)
    u_widths: tuple = (32, 32)
    activation: str = "relu"
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.solver not in ("bundle", "gradient"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.noise < 0 or self.batch < 1 or self.K < 1 or self.episodes < 0:
            raise ValueError("noise, batch, K and episodes must be non-negative / positive")

    def network(self, env: Env) -> net.NetworkSpec:
        return net.NetworkSpec("picnn", env.action_dim, tuple(self.layer_widths), env.state_dim,
                               tuple(self.u_widths), self.activation)


# Settings used by the experiment scripts and the acceptance runs.
PRESETS = {
    "pointmass": dict(episodes=40, gamma=0.98, tau=0.01, noise=0.1, reward_scale=0.1, lr=1e-3, batch=32,
                      activation="softplus", layer_widths=(32, 32), u_widths=(32, 32)),
    "bandit": dict(episodes=300, tau=0.1, noise=0.5, reward_scale=1.0, lr=1e-2, batch=32, updates_per_step=4,
                   activation="softplus", layer_widths=(16, 16), u_widths=(16, 16)),
}


def preset(env_name: str, **overrides) -> QAgentConfig:
    return QAgentConfig(**{**PRESETS[env_name], **overrides})


@dataclass
class SolveCounter:
    """Rows passed to the inner solver, split by purpose."""

    actions: int = 0
    targets: int = 0
    calls: list = field(default_factory=list)


def _solve(params, S, cfg: QAgentConfig, counter=None, purpose="actions"):
    """Approximate ``argmin_a f(s, a) - eps H(a)`` (bundle) or ``argmin_a f`` (gradient) per row.

    Returns ``(A, value)`` with ``value`` the minimized objective, i.e. ``-max Q~``.
    """
    S = np.atleast_2d(S)
    A0 = np.full((len(S), params.spec.input_dim_y), 0.5)
    oracle = net_oracle(params, S)
    if counter is not None:
        setattr(counter, purpose, getattr(counter, purpose) + len(S))
        counter.calls.append((purpose, len(S)))
    if cfg.solver == "bundle":
        rep = bundle_entropy(oracle, A0, K=cfg.K, eps=cfg.entropy_eps)
        return rep.y, rep.objective
    A = projected_gradient(oracle, A0, cfg.pg_steps, cfg.pg_alpha, cfg.pg_momentum)
    return A, np.atleast_1d(net.forward(params, S, A)[0])


def select_action(params, s, cfg: QAgentConfig, rng=None, counter=None):
    """Greedy action in ``[0, 1]^d``; with ``rng`` clipped Gaussian noise is added."""
    s = np.asarray(s, float)
    A, _ = _solve(params, s[None] if s.ndim == 1 else s, cfg, counter)
    if rng is not None and cfg.noise > 0:
        A = np.clip(A + cfg.noise * rng.normal(size=A.shape), 0.0, 1.0)
    return A[0] if s.ndim == 1 else A


def q_tilde(params, S, A, cfg: QAgentConfig):
    """Values of ``Q~ = -f + eps H`` (bundle) or ``Q = -f`` (gradient), and the tape."""
    value, tape = net.forward(params, S, A)
    q = -np.atleast_1d(value)
    if cfg.solver == "bundle":
        q = q + cfg.entropy_eps * box_entropy(np.atleast_2d(A))
    return q, tape


def bellman_targets(target_params, batch, gamma, cfg: QAgentConfig, counter=None):
    """``r + gamma * max_a Q~(s', a; target)``, or just ``r`` for terminal rows."""
    S, A, S1, R, T = stack(batch) if isinstance(batch, list) else batch
    if gamma == 0:
        return R.copy()
    _, fmin = _solve(target_params, S1, cfg, counter, "targets")
    return np.where(T, R, R - gamma * fmin)


def q_update(params, adam: AdamState, batch, targets, cfg: QAgentConfig):
    """One ADAM step on the mean squared Bellman residual; returns ``(params, adam, loss)``."""
    S, A, _, _, _ = stack(batch) if isinstance(batch, list) else batch
    q, tape = q_tilde(params, S, A, cfg)
    resid = q - np.asarray(targets, float)
    loss = float(np.mean(resid ** 2))
    # dQ~/dtheta = -df/dtheta
    grads = net.grad_params(params, tape, weights=-2.0 * resid / len(resid))
    adam, params = adam_update(adam, params, grads)
    return params, adam, loss


def soft_update(target_params, params, tau):
    if not 0 <= tau <= 1:
        raise ValueError("tau must lie in [0, 1]")
    if target_params.spec != params.spec:
        raise ValueError("parameter sets are not congruent")
    return target_params.replace({k: tau * params[k] + (1 - tau) * v for k, v in target_params.tensors.items()})


def random_policy_return(env: Env, episodes: int, seed: int) -> float:
    """Mean return of uniformly random actions."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for ep in range(episodes):
        env.reset(seed + 1 + ep)
        done = False
        while not done:
            _, r, done = env.step(env.to_env(rng.uniform(size=env.action_dim)))
            total += r
    return total / episodes


def greedy_return(params, env: Env, cfg: QAgentConfig, episodes: int, seed: int) -> float:
    total = 0.0
    for ep in range(episodes):
        s = env.reset(seed + ep)
        done = False
        while not done:
            s, r, done = env.step(env.to_env(select_action(params, s, cfg)))
            total += r
    return total / episodes


def run_q_learning(env: Env, cfg: QAgentConfig, params=None, counter=None, callback=None):
    """Deep Q-learning loop; returns ``(params, log)``.

    Log rows are ``(episode, steps, return, mean_td_loss)``, with a NaN loss
    for episodes that ran before the buffer held one minibatch.
    """
    if params is None:
        params = net.init_params(cfg.network(env), cfg.seed, cfg.init_scale)
    target = params.copy()
    adam = AdamState(lr=cfg.lr)
    buffer = ReplayBuffer(cfg.capacity, cfg.seed + 1)
    noise_rng = np.random.default_rng(cfg.seed + 2)
    log = []
    for episode in range(1, cfg.episodes + 1):
        s = env.reset(cfg.seed * 100_003 + episode)
        ret, losses, steps, done = 0.0, [], 0, False
        while not done:
            a = select_action(params, s, cfg, noise_rng, counter)
            s1, r, done = env.step(env.to_env(a))
            buffer.add(Transition(s, a, s1, cfg.reward_scale * r, done and not env.truncates))
            ret += r
            steps += 1
            s = s1
            if len(buffer) < cfg.batch:
                continue
            for _ in range(cfg.updates_per_step):
                batch = stack(buffer.sample(cfg.batch))
                y = bellman_targets(target, batch, cfg.gamma, cfg, counter)
                params, adam, loss = q_update(params, adam, batch, y, cfg)
                target = soft_update(target, params, cfg.tau)
                losses.append(loss)
        log.append((episode, steps, ret, float(np.mean(losses)) if losses else float("nan")))
        if callback is not None:
            callback(episode, params, log[-1])
    return params, log
