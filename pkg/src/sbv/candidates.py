"""Candidate Q-functions: FQI (final iterate or every iterate), direct EMSBE
minimisation, the zero function, and assembly into an ordered set."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import OfflineDataset, QFunction, zero_q
from .regression import (PolyRidge, PreparedFit, RegressionError, RegressorSpec,
                         build_features, spec_to_dict)


@dataclass(frozen=True)
class FqiSpec:
    regressor: RegressorSpec
    iterations: int = 50
    gamma: float = 0.9

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("FQI needs at least one iteration")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def _fqi_label(spec: FqiSpec, k: int) -> str:
    return f"fqi/{spec.regressor.label}/K={k}"


def fqi_iterates(spec: FqiSpec, train: OfflineDataset) -> list[QFunction]:
    """Run FQI from Q0 = 0 and return Q1..QK.

    Each iterate regresses ``r + gamma (1 - terminal) max_a' Q(s', a')`` on
    (s, a), one model per action.
    """
    b = train.batch
    if len(b) == 0:
        raise ValueError("FQI needs a nonempty training set")
    A = train.config.num_actions
    cont = (~b.terminals).astype(float)
    next_max = np.zeros(len(b))
    out = []
    try:
        prep = PreparedFit(spec.regressor, b.states, b.actions, A)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RegressionError(f"FQI iteration 1: {exc}") from exc
    for k in range(spec.iterations):
        targets = b.rewards + spec.gamma * cont * next_max
        try:
            model = prep.fit(targets)
        except (np.linalg.LinAlgError, ValueError, RegressionError) as exc:
            raise RegressionError(f"FQI iteration {k + 1}: {exc}") from exc
        q = QFunction(model.predict_all, A, _fqi_label(spec, k + 1),
                      {"algorithm": "fqi", "regressor": spec_to_dict(spec.regressor),
                       "iterations": k + 1, "gamma": spec.gamma, "flagged": model.flagged})
        out.append(q)
        next_max = q.max(b.next_states)
    return out


def fqi_train(spec: FqiSpec, train: OfflineDataset) -> QFunction:
    return fqi_iterates(spec, train)[-1]


def min_emsbe_fit(degree: int, train: OfflineDataset, gamma: float, steps: int = 5000,
                  lr: float = 1.0) -> QFunction:
    """Polynomial Q-function fit by gradient descent on the training EMSBE.

    One weight vector per action over standardized monomials of the state.
    The max over next actions passes gradient to the maximizing action only.
    ``lr`` is relative to a Lipschitz bound of the gradient, so ``lr = 1``
    is a safe step for the smooth pieces of the objective.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    b = train.batch
    A = train.config.num_actions
    F = build_features(b.states, degree)[:, 1:]
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale == 0] = 1.0

    def design(states):
        G = (build_features(states, degree)[:, 1:] - mean) / scale
        return np.hstack([np.ones((G.shape[0], 1)), G])

    Phi = design(b.states)
    Phi2 = design(b.next_states)
    n, p = Phi.shape
    cont = (~b.terminals).astype(float)
    rows = np.arange(n)
    lip = 2 * (1 + gamma) ** 2 * max(np.linalg.eigvalsh(Phi.T @ Phi / n)[-1],
                                     np.linalg.eigvalsh(Phi2.T @ Phi2 / n)[-1])
    step = lr / lip
    W = np.zeros((A, p))
    loss = np.inf
    for it in range(steps):
        q_sa = np.einsum("ij,ij->i", Phi, W[b.actions])
        q_next = Phi2 @ W.T
        a_star = q_next.argmax(axis=1)
        e = q_sa - b.rewards - gamma * cont * q_next[rows, a_star]
        loss = float(np.mean(e**2))
        if not np.isfinite(loss):
            raise RegressionError(f"EMSBE minimisation diverged at step {it} (degree {degree}, lr {lr})")
        grad = np.zeros_like(W)
        np.add.at(grad, b.actions, e[:, None] * Phi)
        np.add.at(grad, a_star, -gamma * (cont * e)[:, None] * Phi2)
        W -= step * (2.0 / n) * grad

    def fn(s, W=W.copy()):
        return design(s) @ W.T

    return QFunction(fn, A, f"min_emsbe/d={degree}",
                     {"algorithm": "min_emsbe", "regressor": spec_to_dict(PolyRidge(degree, 0.0)),
                      "train_emsbe": loss, "steps": steps})


# ---------------------------------------------------------------------------
# Candidate sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Candidate:
    id: str
    q: QFunction
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class CandidateSet:
    candidates: tuple[Candidate, ...]

    def __post_init__(self):
        ids = [c.id for c in self.candidates]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate candidate ids: {dup}")

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i) -> Candidate:
        return self.candidates[i]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.candidates]

    def by_id(self, cid: str) -> Candidate:
        for c in self.candidates:
            if c.id == cid:
                return c
        raise KeyError(cid)


def as_candidate(item: Candidate | QFunction) -> Candidate:
    if isinstance(item, Candidate):
        return item
    return Candidate(item.label, item, dict(item.meta))


def assemble_candidates(*parts: Iterable[Candidate | QFunction],
                        q_star: QFunction | None = None) -> CandidateSet:
    """Concatenate candidate groups in order, appending ``q_star`` last."""
    items = [as_candidate(x) for part in parts for x in part]
    if q_star is not None:
        items.append(as_candidate(q_star))
    if not items:
        raise ValueError("candidate set is empty")
    return CandidateSet(tuple(items))


def zero_candidate(num_actions: int) -> Candidate:
    return as_candidate(zero_q(num_actions))


MANIFEST_HEADER = ["id", "algorithm", "degree", "lambda", "n_min", "m_try", "iterations", "notes"]


def manifest_rows(cands: CandidateSet) -> list[dict]:
    rows = []
    for c in cands:
        prov = c.provenance
        reg = prov.get("regressor") or {}
        rows.append({
            "id": c.id,
            "algorithm": prov.get("algorithm", ""),
            "degree": reg.get("degree", ""),
            "lambda": reg.get("penalty", ""),
            "n_min": reg.get("n_min", ""),
            "m_try": reg.get("m_try", "") if reg.get("m_try") is not None else "",
            "iterations": prov.get("iterations", ""),
            "notes": reg.get("kind", "") if reg else "",
        })
    return rows


def write_manifest(cands: CandidateSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, MANIFEST_HEADER, lineterminator="\n")
        w.writeheader()
        for row in manifest_rows(cands):
            w.writerow({k: ("" if v == "" else (format(v, ".17g") if isinstance(v, float) else v))
                        for k, v in row.items()})


def read_manifest(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"unexpected manifest header {reader.fieldnames}")
        return list(reader)


def fqi_grid_candidates(train: OfflineDataset, regressors: Sequence[RegressorSpec],
                        iterations: int, gamma: float) -> list[Candidate]:
    return [as_candidate(fqi_train(FqiSpec(r, iterations, gamma), train)) for r in regressors]
