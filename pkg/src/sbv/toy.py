"""Four-dimensional continuous toy MDP with a binary action.

Dynamics, with ``x = 0.75 - phi``::

    S'[1]   = sqrt(x) S[1] + (A - 0.5) + N(0, 0.75 - x)
    S'[j]   = sqrt(4x - 2) S[j] + N(0, 3 - 4x),   j = 2, 3, 4
    R       = S'[1]

Episodes never terminate. ``phi = 0`` is deterministic. Gaussian draws come
from numpy's ``Generator.standard_normal`` (ziggurat), so results reproduce
for a fixed numpy version; bit-equality with other implementations is not
promised. Every simulation uses three independent streams derived from one
seed: initial states, transition noise and action sampling.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import (MdpConfig, OfflineDataset, Policy, QFunction, Trajectory,
                   derive_seed, make_rng, uniform_policy)

STATE_DIM = 4
NUM_ACTIONS = 2


@dataclass(frozen=True)
class ToyConfig:
    phi: float = 0.25
    num_trajectories: int = 25
    horizon: int = 25
    seed: int = 0
    reward_start: int = 0
    """Rewards at time steps before ``reward_start`` are recorded as zero."""

    def __post_init__(self):
        if not 0.0 <= self.phi <= 0.25:
            raise ValueError(f"phi must lie in [0, 0.25] (x in [0.5, 0.75]), got {self.phi}")
        if self.num_trajectories < 1 or self.horizon < 1:
            raise ValueError("num_trajectories and horizon must be >= 1")

    @classmethod
    def from_x(cls, x: float, **kw) -> "ToyConfig":
        return cls(phi=0.75 - x, **kw)

    @property
    def x(self) -> float:
        return 0.75 - self.phi

    @property
    def noise_sd(self) -> np.ndarray:
        phi = max(self.phi, 0.0)
        return np.array([np.sqrt(phi)] + [np.sqrt(4 * phi)] * 3)

    @property
    def coef(self) -> np.ndarray:
        x = self.x
        return np.array([np.sqrt(x)] + [np.sqrt(max(4 * x - 2, 0.0))] * 3)


def toy_mdp_config(gamma_train: float = 0.9, gamma_eval: float = 1.0,
                   eval_horizon: int = 100) -> MdpConfig:
    return MdpConfig(NUM_ACTIONS, STATE_DIM, gamma_train, gamma_eval, eval_horizon)


def step_batch(cfg: ToyConfig, states: np.ndarray, actions: np.ndarray,
               noise: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Advance ``states`` given standard-normal ``noise`` of the same shape."""
    nxt = states * cfg.coef + noise * cfg.noise_sd
    nxt[:, 0] += np.asarray(actions, dtype=float) - 0.5
    return nxt, nxt[:, 0].copy()


def step(cfg: ToyConfig, state, action: int, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    if action not in (0, 1):
        raise ValueError("toy actions are 0 or 1")
    s = np.asarray(state, dtype=float).reshape(1, STATE_DIM)
    nxt, r = step_batch(cfg, s, np.array([action]), rng.standard_normal((1, STATE_DIM)))
    return nxt[0], float(r[0])


def simulate(cfg: ToyConfig, policy: Policy, num_episodes: int, horizon: int, seed: int):
    """Roll out ``policy``; returns (states, actions, rewards, next_states) stacked
    as ``(num_episodes, horizon, ...)`` arrays."""
    init_rng = make_rng(seed, "init")
    noise_rng = make_rng(seed, "noise")
    act_rng = make_rng(seed, "action")
    s = init_rng.standard_normal((num_episodes, STATE_DIM))
    S = np.empty((num_episodes, horizon, STATE_DIM))
    S2 = np.empty_like(S)
    A = np.empty((num_episodes, horizon), dtype=np.int64)
    R = np.empty((num_episodes, horizon))
    for t in range(horizon):
        a = policy.sample(s, act_rng)
        s2, r = step_batch(cfg, s, a, noise_rng.standard_normal((num_episodes, STATE_DIM)))
        if t < cfg.reward_start:
            r = np.zeros_like(r)
        S[:, t], A[:, t], R[:, t], S2[:, t] = s, a, r, s2
        s = s2
    return S, A, R, S2


def generate_dataset(cfg: ToyConfig, behavior: Policy | None = None,
                     mdp_config: MdpConfig | None = None) -> OfflineDataset:
    """``cfg.num_trajectories`` episodes of ``cfg.horizon`` steps under ``behavior``
    (uniform random by default), standard-normal initial states."""
    behavior = behavior or uniform_policy(NUM_ACTIONS)
    S, A, R, S2 = simulate(cfg, behavior, cfg.num_trajectories, cfg.horizon, cfg.seed)
    trajs = tuple(
        Trajectory(i, S[i], A[i], R[i], S2[i], np.zeros(cfg.horizon, dtype=bool))
        for i in range(cfg.num_trajectories)
    )
    return OfflineDataset(trajs, mdp_config or toy_mdp_config())


def rollout_returns(cfg: ToyConfig, policy: Policy, num_episodes: int = 1000,
                    horizon: int = 100, gamma: float = 1.0, seed: int = 0) -> np.ndarray:
    _, _, R, _ = simulate(cfg, policy, num_episodes, horizon, seed)
    return R @ (gamma ** np.arange(horizon))


def rollout_policy_value(cfg: ToyConfig, policy: Policy, num_episodes: int = 1000,
                         horizon: int = 100, gamma: float = 1.0, seed: int = 0) -> float:
    """Monte Carlo mean of the discounted return over ``num_episodes`` episodes."""
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    return float(rollout_returns(cfg, policy, num_episodes, horizon, gamma, seed).mean())


def rollout_value_and_se(cfg: ToyConfig, policy: Policy, num_episodes: int = 1000,
                         horizon: int = 100, gamma: float = 1.0, seed: int = 0) -> tuple[float, float]:
    g = rollout_returns(cfg, policy, num_episodes, horizon, gamma, seed)
    return float(g.mean()), float(g.std(ddof=1) / np.sqrt(len(g))) if len(g) > 1 else 0.0


def linear_q(intercept: float, action_coef: float, s1_coef: float, label: str) -> QFunction:
    def fn(s):
        base = intercept + s1_coef * s[:, 0]
        return np.stack([base, base + action_coef], axis=1)
    return QFunction(fn, NUM_ACTIONS, label,
                     {"algorithm": label, "intercept": intercept,
                      "action_coef": action_coef, "s1_coef": s1_coef})


def exact_q_star(cfg: ToyConfig, gamma: float = 0.9) -> QFunction:
    """Closed-form optimal Q-function (infinite horizon, pi* = always 1).

    With ``c = sqrt(x)`` and the stationary reward mean ``L = 0.5 / (1 - c)``
    under pi*, ``Q*(s, a) = (c s1 + a - 0.5 - L) / (1 - gamma c) + L / (1 - gamma)``.
    """
    c = np.sqrt(cfg.x)
    L = 0.5 / (1 - c)
    k = 1.0 / (1 - gamma * c)
    intercept = (-0.5 - L) * k + L / (1 - gamma)
    return linear_q(intercept, k, c * k, "q_star_exact")


def approx_q_star(cfg: ToyConfig, num_rollouts: int = 10_000, horizon: int = 100,
                  gamma: float = 0.9, seed: int = 0) -> QFunction:
    """Linear regression of the return of pi* (after a free first action) on (A0, S0[1]).

    The first action is drawn uniformly; the return sums ``gamma^t R_t`` for
    ``t = 0..horizon``.
    """
    init_rng = make_rng(seed, "qstar-init")
    noise_rng = make_rng(seed, "qstar-noise")
    act_rng = make_rng(seed, "qstar-action")
    s = init_rng.standard_normal((num_rollouts, STATE_DIM))
    a0 = act_rng.integers(0, 2, size=num_rollouts)
    s01 = s[:, 0].copy()
    ret = np.zeros(num_rollouts)
    a = a0
    for t in range(horizon + 1):
        s, r = step_batch(cfg, s, a, noise_rng.standard_normal((num_rollouts, STATE_DIM)))
        ret += gamma**t * r
        a = np.ones(num_rollouts, dtype=np.int64)
    X = np.column_stack([np.ones(num_rollouts), a0, s01])
    coef, _, rank, _ = np.linalg.lstsq(X, ret, rcond=None)
    if rank < 3:
        raise ValueError("degenerate design for the Q* regression")
    return linear_q(float(coef[0]), float(coef[1]), float(coef[2]), "q_star")


class KnnMsbeOracle:
    """Ground-truth MSBE estimates from large simulated datasets.

    ``B*q`` is approximated by averaging ``r + gamma max q(s', .)`` over the
    ``k`` nearest same-action neighbours in a fitting set of
    ``fit_shape = (trajectories, steps)``; the first state coordinate is
    multiplied by ``s1_weight`` before Euclidean distances. The squared gap
    ``(q - B^q)^2`` is averaged over an independent evaluation set.
    Neighbour search is exact (k-d tree) and done once, so each candidate
    costs one pass over the fitting targets.
    """

    def __init__(self, cfg: ToyConfig, seed: int, gamma: float = 0.9, k: int = 100,
                 fit_shape: tuple[int, int] = (2000, 100),
                 eval_shape: tuple[int, int] = (1000, 25), s1_weight: float = 2.0):
        from scipy.spatial import cKDTree

        self.gamma = gamma
        behavior = uniform_policy(NUM_ACTIONS)
        base = replace(cfg, reward_start=0)
        S, A, R, S2 = simulate(base, behavior, fit_shape[0], fit_shape[1], derive_seed(seed, "knn-fit"))
        self.fit_rewards = R.reshape(-1)
        self.fit_next = S2.reshape(-1, STATE_DIM)
        self.fit_states = fit_states = S.reshape(-1, STATE_DIM)
        self.fit_actions = fit_actions = A.reshape(-1)
        Se, Ae, _, _ = simulate(base, behavior, eval_shape[0], eval_shape[1], derive_seed(seed, "knn-eval"))
        self.eval_states = Se.reshape(-1, STATE_DIM)
        self.eval_actions = Ae.reshape(-1)
        w = np.array([s1_weight, 1.0, 1.0, 1.0])
        self.neighbors = np.empty((len(self.eval_actions), k), dtype=np.int64)
        for a in range(NUM_ACTIONS):
            pool = np.flatnonzero(fit_actions == a)
            tree = cKDTree(fit_states[pool] * w)
            q_mask = self.eval_actions == a
            _, idx = tree.query(self.eval_states[q_mask] * w, k=min(k, len(pool)))
            self.neighbors[q_mask] = pool[np.asarray(idx).reshape(q_mask.sum(), -1)]

    def backup(self, q: QFunction) -> np.ndarray:
        """Approximate ``(B* q)`` at the evaluation state-action pairs."""
        targets = self.fit_rewards + self.gamma * q.max(self.fit_next)
        return targets[self.neighbors].mean(axis=1)

    def msbe(self, q: QFunction) -> float:
        qv = q(self.eval_states, self.eval_actions)
        return float(np.mean((qv - self.backup(q)) ** 2))


def msbe_knn_oracle(cfg: ToyConfig, q: QFunction, seed: int, gamma: float = 0.9, **kw) -> float:
    return KnnMsbeOracle(cfg, seed, gamma, **kw).msbe(q)
