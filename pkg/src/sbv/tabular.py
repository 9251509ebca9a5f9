"""Exact computations on finite MDPs.

Q-tables are plain ``(S, A)`` float arrays. States of tabular datasets are
index-coded: a one-dimensional state vector whose single entry is the state
index.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MdpConfig, OfflineDataset, Policy, Trajectory

_ATOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite MDP with an explicit state-action weighting.

    Attributes
    ----------
    transition : (S, A, S) array, rows sum to one
    reward : (S, A, S) array, reward for each (s, a, s')
    d0 : (S,) initial-state distribution
    gamma : discount in [0, 1)
    weights : (S, A) data distribution over state-action pairs (sums to one)
    """

    transition: np.ndarray
    reward: np.ndarray
    d0: np.ndarray
    gamma: float
    weights: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.transition, dtype=float)
        S, A = T.shape[:2]
        if T.shape != (S, A, S):
            raise ValueError(f"transition must be (S, A, S), got {T.shape}")
        R = np.broadcast_to(np.asarray(self.reward, dtype=float), (S, A, S)).copy()
        d0 = np.asarray(self.d0, dtype=float).reshape(S)
        w = np.asarray(self.weights, dtype=float).reshape(S, A)
        if np.any(T < 0) or not np.allclose(T.sum(axis=2), 1.0, atol=_ATOL, rtol=0):
            raise ValueError("transition rows must be probability vectors")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > _ATOL:
            raise ValueError("d0 must be a probability vector")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _ATOL:
            raise ValueError("weights must be a probability table")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        for name, arr in [("transition", T), ("reward", R), ("d0", d0), ("weights", w)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def psi(self) -> float:
        return float(self.weights.min())

    @property
    def expected_reward(self) -> np.ndarray:
        return np.einsum("sat,sat->sa", self.transition, self.reward)

    def with_weights(self, weights: np.ndarray) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, self.d0, self.gamma, weights)

    def with_gamma(self, gamma: float) -> "TabularMdp":
        return TabularMdp(self.transition, self.reward, self.d0, gamma, self.weights)


def _targets(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    """(S, A, S') array of r(s, a, s') + gamma * max_a' q(s', a')."""
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(f"q has shape {q.shape}, expected {(mdp.num_states, mdp.num_actions)}")
    return mdp.reward + mdp.gamma * q.max(axis=1)[None, None, :]


def bellman_backup_exact(mdp: TabularMdp, q: np.ndarray) -> np.ndarray:
    return np.einsum("sat,sat->sa", mdp.transition, _targets(mdp, q))


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal Q-table with ``||Q - B*Q||_inf <= tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.zeros((mdp.num_states, mdp.num_actions))
    if mdp.gamma == 0.0:
        return bellman_backup_exact(mdp, q)
    stop = tol * (1.0 - mdp.gamma) / mdp.gamma
    for _ in range(max_iter):
        q_next = bellman_backup_exact(mdp, q)
        if np.max(np.abs(q_next - q)) <= stop:
            return q_next
        q = q_next
    raise RuntimeError("value iteration did not converge")


def policy_table(mdp: TabularMdp, policy: Policy | np.ndarray) -> np.ndarray:
    """(S, A) action probabilities of a policy over index-coded states."""
    if isinstance(policy, Policy):
        states = np.arange(mdp.num_states, dtype=float)[:, None]
        probs = policy.action_probabilities(states)
    else:
        probs = np.asarray(policy, dtype=float)
    if probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("policy table has the wrong shape")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-12, rtol=0):
        raise ValueError("policy probabilities must be nonnegative and sum to one")
    return probs


def greedy_table(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    p = np.zeros_like(q)
    p[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
    return p


def policy_q_exact(mdp: TabularMdp, policy: Policy | np.ndarray) -> np.ndarray:
    """Q^pi as an (S, A) table via the state-action linear system."""
    pi = policy_table(mdp, policy)
    S, A = mdp.num_states, mdp.num_actions
    # P[(s,a), (s',a')] = T(s'|s,a) pi(a'|s')
    P = (mdp.transition[:, :, :, None] * pi[None, None, :, :]).reshape(S * A, S * A)
    r = mdp.expected_reward.reshape(S * A)
    q = np.linalg.solve(np.eye(S * A) - mdp.gamma * P, r)
    return q.reshape(S, A)


def policy_state_values(mdp: TabularMdp, policy: Policy | np.ndarray) -> np.ndarray:
    pi = policy_table(mdp, policy)
    P = np.einsum("sa,sat->st", pi, mdp.transition)
    r = np.einsum("sa,sa->s", pi, mdp.expected_reward)
    return np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * P, r)


def policy_value_exact(mdp: TabularMdp, policy: Policy | np.ndarray) -> float:
    """J(pi) = d0 . V^pi with V^pi = (I - gamma P^pi)^{-1} r^pi."""
    return float(mdp.d0 @ policy_state_values(mdp, policy))


def msbe_exact(mdp: TabularMdp, q: np.ndarray) -> float:
    err = np.asarray(q, dtype=float) - bellman_backup_exact(mdp, q)
    return float(np.sum(mdp.weights * err**2))


def population_emsbe_exact(mdp: TabularMdp, q: np.ndarray) -> float:
    q = np.asarray(q, dtype=float)
    resid = q[:, :, None] - _targets(mdp, q)
    return float(np.sum(mdp.weights * np.einsum("sat,sat->sa", mdp.transition, resid**2)))


def target_variance_exact(mdp: TabularMdp, q: np.ndarray) -> float:
    """Weighted conditional variance of r + gamma * max q(s', .), from T directly."""
    y = _targets(mdp, q)
    mean = np.einsum("sat,sat->sa", mdp.transition, y)
    # two-pass form keeps cancellation error small
    var = np.einsum("sat,sat->sa", mdp.transition, (y - mean[:, :, None])**2)
    return float(np.sum(mdp.weights * var))


def estimation_error_exact(mdp: TabularMdp, q: np.ndarray, q_star: np.ndarray | None = None) -> float:
    if q_star is None:
        q_star = value_iteration(mdp)
    return float(np.sum(mdp.weights * (np.asarray(q, dtype=float) - q_star)**2))


def random_tabular_mdp(seed: int, num_states: int, num_actions: int,
                       reward_noise: str = "stochastic", gamma: float | None = None,
                       deterministic_transitions: bool = False,
                       min_weight: float = 0.01) -> TabularMdp:
    """Random test instance.

    ``reward_noise="deterministic"`` makes the reward depend on (s, a) only;
    ``"stochastic"`` draws a separate reward for every (s, a, s'). Rewards lie
    in [-1, 1]. The weighting is a Dirichlet draw mixed with the uniform
    table at rate ``alpha = min(1, max(0.1, min_weight * S * A))``, so every
    entry is at least ``min_weight`` (or ``0.1 / (S A)`` when that is larger).
    ``gamma`` defaults to a uniform draw in [0, 0.95).
    """
    if num_states < 1 or num_actions < 1:
        raise ValueError("num_states and num_actions must be >= 1")
    if reward_noise not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown reward_noise {reward_noise!r}")
    rng = np.random.default_rng(seed)
    S, A = num_states, num_actions
    if deterministic_transitions:
        T = np.zeros((S, A, S))
        nxt = rng.integers(S, size=(S, A))
        T[np.arange(S)[:, None], np.arange(A)[None, :], nxt] = 1.0
    else:
        T = rng.exponential(size=(S, A, S))
        T /= T.sum(axis=2, keepdims=True)
    if reward_noise == "deterministic":
        R = np.repeat(rng.uniform(-1, 1, size=(S, A, 1)), S, axis=2)
    else:
        R = rng.uniform(-1, 1, size=(S, A, S))
    d0 = rng.dirichlet(np.ones(S))
    alpha = min(1.0, max(0.1, min_weight * S * A))
    w = (1 - alpha) * rng.dirichlet(np.ones(S * A)) + alpha / (S * A)
    w = (w / w.sum()).reshape(S, A)
    g = float(rng.uniform(0.0, 0.95)) if gamma is None else float(gamma)
    return TabularMdp(T, R, d0, g, w)


# ---------------------------------------------------------------------------
# Small named instances
# ---------------------------------------------------------------------------


def chain2_mdp(gamma: float = 0.5) -> TabularMdp:
    """Two states; from s0 action 0 stays (r=0), action 1 moves to s1 (r=1);
    s1 is absorbing with reward 1 for both actions."""
    T = np.zeros((2, 2, 2))
    T[0, 0, 0] = T[0, 1, 1] = T[1, 0, 1] = T[1, 1, 1] = 1.0
    R = np.zeros((2, 2, 2))
    R[0, 1, :] = 1.0
    R[1, :, :] = 1.0
    return TabularMdp(T, R, np.array([1.0, 0.0]), gamma, np.full((2, 2), 0.25))


def coin1_mdp() -> TabularMdp:
    """One state, one action, reward +1 or -1 with equal probability, gamma 0.

    Two copies of the single state carry the two reward outcomes.
    """
    T = np.array([[[0.5, 0.5]], [[0.5, 0.5]]])
    R = np.array([[[1.0, -1.0]], [[1.0, -1.0]]])
    return TabularMdp(T, R, np.array([1.0, 0.0]), 0.0, np.array([[1.0], [0.0]]))


# ---------------------------------------------------------------------------
# Sampling and empirical MDPs
# ---------------------------------------------------------------------------


def sample_tabular_dataset(mdp: TabularMdp, num_transitions: int, seed: int,
                           cover_all: bool = True) -> OfflineDataset:
    """I.i.d. transitions with (s, a) drawn from ``mdp.weights``.

    Every transition is its own length-one trajectory. With ``cover_all`` each
    state-action pair is included at least once before random draws.
    """
    rng = np.random.default_rng(seed)
    S, A = mdp.num_states, mdp.num_actions
    cells = []
    if cover_all:
        cells.extend(range(S * A))
    n_random = max(num_transitions - len(cells), 0)
    cells.extend(rng.choice(S * A, size=n_random, p=mdp.weights.reshape(-1)).tolist())
    trajs = []
    for i, c in enumerate(cells):
        s, a = divmod(int(c), A)
        s2 = int(rng.choice(S, p=mdp.transition[s, a]))
        trajs.append(Trajectory(i, [[float(s)]], [a], [mdp.reward[s, a, s2]],
                                [[float(s2)]], [False]))
    return OfflineDataset(tuple(trajs), MdpConfig(num_actions=A, state_dim=1,
                                                  gamma_train=mdp.gamma))


def empirical_mdp(data: OfflineDataset, num_states: int, gamma: float) -> TabularMdp:
    """Count-based MDP of an index-coded dataset.

    Weights are cell frequencies, rewards are per-(s, a, s') means and d0 is
    the empirical distribution of trajectory initial states. Unobserved
    (s, a) cells get zero weight and a reward-free self-loop.
    """
    A = data.config.num_actions
    S = num_states
    b = data.batch
    s = b.states[:, 0].astype(np.int64)
    s2 = b.next_states[:, 0].astype(np.int64)
    a = b.actions
    counts = np.zeros((S, A, S))
    rsum = np.zeros((S, A, S))
    np.add.at(counts, (s, a, s2), 1.0)
    np.add.at(rsum, (s, a, s2), b.rewards)
    n_sa = counts.sum(axis=2)
    T = np.zeros((S, A, S))
    seen = n_sa > 0
    T[seen] = counts[seen] / n_sa[seen][:, None]
    for si, ai in zip(*np.nonzero(~seen)):
        T[si, ai, si] = 1.0
    R = np.divide(rsum, counts, out=np.zeros_like(rsum), where=counts > 0)
    d0 = np.bincount(data.initial_states[:, 0].astype(np.int64), minlength=S).astype(float)
    d0 /= d0.sum()
    return TabularMdp(T, R, d0, gamma, n_sa / n_sa.sum())


# ---------------------------------------------------------------------------
# Plain-text serialization
# ---------------------------------------------------------------------------

_HEADER = "# sbv tabular mdp v1"


def write_tabular_mdp(mdp: TabularMdp, path: str | Path) -> None:
    """Write ``mdp`` as text.

    Layout: header line; ``S A gamma``; d0 (one row); weights (S rows of A);
    transition (S*A rows of S, row-major over (s, a)); reward (same layout).
    Floats use 17 significant digits.
    """
    f = lambda row: " ".join(format(float(v), ".17g") for v in row)
    S, A = mdp.num_states, mdp.num_actions
    lines = [_HEADER, f"{S} {A} {format(mdp.gamma, '.17g')}", f(mdp.d0)]
    lines += [f(mdp.weights[s]) for s in range(S)]
    lines += [f(mdp.transition[s, a]) for s in range(S) for a in range(A)]
    lines += [f(mdp.reward[s, a]) for s in range(S) for a in range(A)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_tabular_mdp(path: str | Path) -> TabularMdp:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if lines[0].strip() != _HEADER:
        raise ValueError("not a tabular MDP file")
    S_str, A_str, g_str = lines[1].split()
    S, A = int(S_str), int(A_str)
    rows = [np.array(ln.split(), dtype=float) for ln in lines[2:]]
    expected = 1 + S + 2 * S * A
    if len(rows) != expected:
        raise ValueError(f"expected {expected} data rows, found {len(rows)}")
    d0 = rows[0]
    w = np.stack(rows[1:1 + S])
    T = np.stack(rows[1 + S:1 + S + S * A]).reshape(S, A, S)
    R = np.stack(rows[1 + S + S * A:]).reshape(S, A, S)
    return TabularMdp(T, R, d0, float(g_str), w)
