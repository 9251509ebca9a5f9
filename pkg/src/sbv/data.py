"""Transitions, trajectories, offline datasets, Q-functions and policies.

All containers are immutable after construction. Trajectories store their
transitions column-wise as numpy arrays; :class:`Transition` objects are
materialized only on request.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


def derive_seed(root: int, *keys) -> int:
    """Derive an independent child seed from a root seed and a key path.

    Keys may be ints or strings; strings are mapped through CRC32. The child
    is ``SeedSequence(root, spawn_key=keys)``'s first 63-bit word, so one root
    integer reproduces every stream of an experiment.
    """
    spawn_key = tuple(
        k if isinstance(k, (int, np.integer)) else zlib.crc32(str(k).encode())
        for k in keys
    )
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in spawn_key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_rng(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))


@dataclass(frozen=True)
class MdpConfig:
    num_actions: int
    state_dim: int
    gamma_train: float = 0.9
    gamma_eval: float = 1.0
    eval_horizon: int = 100

    def __post_init__(self):
        if self.num_actions < 1 or self.state_dim < 1:
            raise ValueError("num_actions and state_dim must be positive")
        if not 0.0 <= self.gamma_train < 1.0:
            raise ValueError(f"gamma_train must lie in [0, 1), got {self.gamma_train}")
        if not 0.0 <= self.gamma_eval <= 1.0:
            raise ValueError(f"gamma_eval must lie in [0, 1], got {self.gamma_eval}")
        if self.eval_horizon < 1:
            raise ValueError("eval_horizon must be >= 1")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool = False


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode, stored column-wise.

    Attributes
    ----------
    id : int
    states, next_states : (T, state_dim) float arrays
    actions : (T,) int array
    rewards : (T,) float array
    terminals : (T,) bool array
    """

    id: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        next_states = np.asarray(self.next_states, dtype=float).reshape(states.shape)
        n = states.shape[0]
        actions = np.asarray(self.actions, dtype=np.int64).reshape(n)
        rewards = np.asarray(self.rewards, dtype=float).reshape(n)
        terminals = np.asarray(self.terminals, dtype=bool).reshape(n)
        for name, arr in [("states", states), ("next_states", next_states),
                          ("actions", actions), ("rewards", rewards),
                          ("terminals", terminals)]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_transitions(cls, id: int, transitions: Sequence[Transition]) -> "Trajectory":
        if not transitions:
            raise ValueError("a trajectory needs at least one transition")
        return cls(
            id=id,
            states=np.stack([np.atleast_1d(t.state) for t in transitions]),
            actions=np.array([t.action for t in transitions]),
            rewards=np.array([t.reward for t in transitions]),
            next_states=np.stack([np.atleast_1d(t.next_state) for t in transitions]),
            terminals=np.array([t.terminal for t in transitions]),
        )

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.states[t], int(self.actions[t]), float(self.rewards[t]),
                       self.next_states[t], bool(self.terminals[t]))
            for t in range(len(self))
        ]

    def is_chained(self) -> bool:
        """True when each next_state equals the following state, except after terminals."""
        if len(self) < 2:
            return True
        ok = np.all(self.next_states[:-1] == self.states[1:], axis=1)
        return bool(np.all(ok | self.terminals[:-1]))


@dataclass(frozen=True)
class TransitionBatch:
    """Flattened view over every transition in a dataset."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    traj_ids: np.ndarray
    timesteps: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    trajectories: tuple[Trajectory, ...]
    config: MdpConfig

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        if not trajs:
            raise ValueError("an offline dataset must contain at least one trajectory")
        ids = [t.id for t in trajs]
        if len(set(ids)) != len(ids):
            raise ValueError("trajectory ids must be unique")
        for t in trajs:
            if t.states.shape[1] != self.config.state_dim:
                raise ValueError(
                    f"trajectory {t.id} has state_dim {t.states.shape[1]}, "
                    f"expected {self.config.state_dim}")
            if len(t) and (t.actions.min() < 0 or t.actions.max() >= self.config.num_actions):
                raise ValueError(f"trajectory {t.id} has an action outside [0, {self.config.num_actions})")
        object.__setattr__(self, "trajectories", trajs)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def ids(self) -> list[int]:
        return [t.id for t in self.trajectories]

    @property
    def num_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    @cached_property
    def batch(self) -> TransitionBatch:
        trajs = self.trajectories
        return TransitionBatch(
            states=np.concatenate([t.states for t in trajs]),
            actions=np.concatenate([t.actions for t in trajs]),
            rewards=np.concatenate([t.rewards for t in trajs]),
            next_states=np.concatenate([t.next_states for t in trajs]),
            terminals=np.concatenate([t.terminals for t in trajs]),
            traj_ids=np.concatenate([np.full(len(t), t.id) for t in trajs]),
            timesteps=np.concatenate([np.arange(len(t)) for t in trajs]),
        )

    @property
    def initial_states(self) -> np.ndarray:
        return np.stack([t.states[0] for t in self.trajectories])

    def subset(self, ids: Sequence[int]) -> "OfflineDataset":
        by_id = {t.id: t for t in self.trajectories}
        return OfflineDataset(tuple(by_id[i] for i in ids), self.config)


@dataclass(frozen=True)
class DatasetSplit:
    train: OfflineDataset
    validation: OfflineDataset
    seed: int


def split_by_trajectory(data: OfflineDataset, train_fraction: float = 0.8,
                        seed: int = 0) -> DatasetSplit:
    """Randomly partition whole trajectories into training and validation sets.

    The training side receives ``round(train_fraction * N)`` trajectories
    (half rounds up), clamped so both sides are nonempty. Both sides keep the
    source order of trajectories.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(data)
    if n < 2:
        raise ValueError("need at least 2 trajectories to split")
    n_train = int(np.floor(train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    trajs = data.trajectories
    return DatasetSplit(
        train=OfflineDataset(tuple(trajs[i] for i in train_idx), data.config),
        validation=OfflineDataset(tuple(trajs[i] for i in val_idx), data.config),
        seed=seed,
    )


def discounted_return(traj: Trajectory | Sequence[float], gamma: float) -> float:
    rewards = traj.rewards if isinstance(traj, Trajectory) else np.asarray(traj, dtype=float)
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if len(rewards) == 0:
        return 0.0
    return float(np.sum(rewards * gamma ** np.arange(len(rewards))))


# ---------------------------------------------------------------------------
# Q-functions and policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QFunction:
    """A map from (state, action) to a real number.

    ``fn`` takes an ``(n, state_dim)`` array and returns ``(n, num_actions)``
    action values. ``label`` and ``meta`` describe where it came from.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    num_actions: int
    label: str = ""
    meta: dict = field(default_factory=dict)

    def values(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[None, :]
        out = np.asarray(self.fn(states), dtype=float)
        return out.reshape(states.shape[0], self.num_actions)

    def __call__(self, states: np.ndarray, actions) -> np.ndarray:
        v = self.values(states)
        actions = np.asarray(actions, dtype=np.int64).reshape(v.shape[0])
        return v[np.arange(v.shape[0]), actions]

    def max(self, states: np.ndarray) -> np.ndarray:
        return self.values(states).max(axis=1)

    def scaled(self, scale: float, shift: float = 0.0) -> "QFunction":
        fn = self.fn
        return QFunction(lambda s: scale * np.asarray(fn(s), dtype=float) + shift,
                         self.num_actions, f"{self.label}*{scale}+{shift}", dict(self.meta))


def zero_q(num_actions: int, label: str = "zero") -> QFunction:
    return QFunction(lambda s: np.zeros((s.shape[0], num_actions)), num_actions, label,
                     {"algorithm": "zero"})


def tabular_q(table: np.ndarray, label: str = "tabular") -> QFunction:
    """Q-function over index-coded states: ``state[0]`` is the state index."""
    table = np.asarray(table, dtype=float)
    return QFunction(lambda s: table[s[:, 0].astype(np.int64)], table.shape[1], label,
                     {"algorithm": "tabular"})


@dataclass(frozen=True, eq=False)
class Policy:
    """A stochastic or deterministic policy.

    ``probs_fn`` maps ``(n, state_dim)`` states to ``(n, num_actions)``
    probabilities. ``sampler`` overrides sampling when given.
    """

    probs_fn: Callable[[np.ndarray], np.ndarray]
    num_actions: int
    is_deterministic: bool = False
    label: str = ""

    def action_probabilities(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        if states.ndim == 1:
            states = states[None, :]
        return np.asarray(self.probs_fn(states), dtype=float).reshape(states.shape[0], self.num_actions)

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        p = self.action_probabilities(states)
        if self.is_deterministic:
            return p.argmax(axis=1)
        u = rng.random(p.shape[0])
        cdf = np.cumsum(p, axis=1)
        return np.minimum((u[:, None] >= cdf).sum(axis=1), self.num_actions - 1)


def uniform_policy(num_actions: int) -> Policy:
    return Policy(lambda s: np.full((s.shape[0], num_actions), 1.0 / num_actions),
                  num_actions, False, "uniform")


def constant_policy(action: int, num_actions: int) -> Policy:
    def probs(s):
        p = np.zeros((s.shape[0], num_actions))
        p[:, action] = 1.0
        return p
    return Policy(probs, num_actions, True, f"always{action}")


def greedy_policy(q: QFunction, tie_rule: str = "first_index") -> Policy:
    """Greedy policy of ``q``.

    ``tie_rule="first_index"`` picks the lowest tied action and yields a
    deterministic policy. ``tie_rule="random"`` spreads probability uniformly
    over tied actions, so sampling breaks ties at random.
    """
    if tie_rule not in ("first_index", "random"):
        raise ValueError(f"unknown tie_rule {tie_rule!r}")
    A = q.num_actions

    if tie_rule == "first_index":
        def probs(s):
            idx = q.values(s).argmax(axis=1)
            p = np.zeros((s.shape[0], A))
            p[np.arange(s.shape[0]), idx] = 1.0
            return p
        return Policy(probs, A, True, f"greedy({q.label})")

    def probs(s):
        v = q.values(s)
        ties = v == v.max(axis=1, keepdims=True)
        return ties / ties.sum(axis=1, keepdims=True)
    return Policy(probs, A, False, f"greedy_random({q.label})")


def empirical_state_action_counts(data: OfflineDataset,
                                  discretize: Callable[[np.ndarray], Sequence] | None = None,
                                  ) -> dict[tuple, int]:
    """Count transitions per (discretized state, action) cell.

    Every action is reported for every observed state cell, so actions that
    were never taken show up with count zero.
    """
    b = data.batch
    if discretize is None:
        keys = [tuple(row) for row in b.states]
    else:
        keys = [tuple(np.atleast_1d(discretize(row))) for row in b.states]
    counts: dict[tuple, int] = {}
    for key in dict.fromkeys(keys):
        for a in range(data.config.num_actions):
            counts[(key, a)] = 0
    for key, a in zip(keys, b.actions):
        counts[(key, int(a))] += 1
    return counts


# ---------------------------------------------------------------------------
# CSV round-trip
# ---------------------------------------------------------------------------


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def dataset_header(state_dim: int) -> list[str]:
    return (["traj_id", "t"] + [f"state_{j}" for j in range(state_dim)]
            + ["action", "reward", "terminal"]
            + [f"next_state_{j}" for j in range(state_dim)])


def write_dataset_csv(data: OfflineDataset, path: str | Path) -> None:
    d = data.config.state_dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(dataset_header(d))
        for traj in data.trajectories:
            for t in range(len(traj)):
                w.writerow([traj.id, t]
                           + [fmt_float(v) for v in traj.states[t]]
                           + [int(traj.actions[t]), fmt_float(traj.rewards[t]),
                              int(traj.terminals[t])]
                           + [fmt_float(v) for v in traj.next_states[t]])


def read_dataset_csv(path: str | Path, config: MdpConfig | None = None,
                     num_actions: int | None = None) -> OfflineDataset:
    """Read a dataset CSV. Without ``config``, one is inferred from the header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    d = sum(1 for h in header if h.startswith("state_"))
    if header != dataset_header(d):
        raise ValueError(f"unexpected dataset header: {header}")
    arr = np.array(rows, dtype=float) if rows else np.zeros((0, len(header)))
    traj_ids = arr[:, 0].astype(np.int64)
    if config is None:
        A = num_actions if num_actions is not None else int(arr[:, 2 + d].max()) + 1
        config = MdpConfig(num_actions=max(A, 1), state_dim=d)
    trajs = []
    for tid in dict.fromkeys(traj_ids.tolist()):
        rows_t = arr[traj_ids == tid]
        rows_t = rows_t[np.argsort(rows_t[:, 1], kind="stable")]
        trajs.append(Trajectory(
            id=int(tid),
            states=rows_t[:, 2:2 + d],
            actions=rows_t[:, 2 + d].astype(np.int64),
            rewards=rows_t[:, 3 + d],
            terminals=rows_t[:, 4 + d] != 0,
            next_states=rows_t[:, 5 + d:5 + 2 * d],
        ))
    return OfflineDataset(tuple(trajs), config)
