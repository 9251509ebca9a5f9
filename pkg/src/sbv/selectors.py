"""Offline model-selection criteria.

* SBV: regress each candidate's bootstrapped targets on the training split
  (spec tuned on validation MSE) and score the candidate by its squared gap
  to that fitted backup on the validation split. Lower is better.
* Validation EMSBE: mean squared one-sample Bellman residual on the
  validation split. Lower is better.
* WIS: self-normalised per-decision importance sampling estimate of the
  greedy policy's value. Higher is better.
* FQE: fitted Q-evaluation of the greedy policy, averaged over validation
  initial states. Higher is better.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .candidates import Candidate, CandidateSet
from .data import (DatasetSplit, OfflineDataset, Policy, QFunction, fmt_float,
                   greedy_policy, split_by_trajectory)
from .regression import (DesignMatrix, FittedRegressor, PreparedFit, RegressionError,
                         RegressorSpec, select_prepared)

LOWER_IS_BETTER = {"sbv": True, "emsbe": True, "wis": False, "fqe": False}
FLAG_BACKUP_ABOVE_EMSBE = "backup_mse_above_emsbe"


@dataclass(frozen=True, eq=False)
class BackupEstimate:
    """Fitted approximation of ``B* q`` for one candidate."""

    candidate_id: str
    model: FittedRegressor
    spec: RegressorSpec
    val_backup_mse: float
    spec_table: tuple = ()

    def __call__(self, states, actions) -> np.ndarray:
        return self.model.predict(states, actions)


@dataclass(frozen=True)
class SelectionScore:
    candidate_id: str
    method: str
    score: float
    flag: str = ""
    aux: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RankedCandidates:
    method: str
    order: tuple[str, ...]
    scores: dict
    lower_is_better: bool

    def top(self, k: int) -> list[str]:
        return list(self.order[:k])

    def tie_groups(self) -> list[list[str]]:
        """Consecutive runs of ``order`` with equal scores (all NaN scores form one run)."""
        groups: list[list[str]] = []
        prev = None
        for cid in self.order:
            v = self.scores[cid].score
            key = "nan" if math.isnan(v) else v
            if groups and key == prev:
                groups[-1].append(cid)
            else:
                groups.append([cid])
            prev = key
        return groups

    @property
    def degenerate(self) -> bool:
        """True when every candidate carries a degeneracy flag (WIS all-zero case)."""
        return all(s.flag in ("zero_denominator", "zero_numerator") for s in self.scores.values())


def rank_scores(method: str, scores: Sequence[SelectionScore], lower_is_better: bool) -> RankedCandidates:
    """Order candidates by score; NaN scores go last, ties keep input order."""
    def key(item):
        i, s = item
        if not np.isfinite(s.score):
            return (1, 0.0, i)
        return (0, s.score if lower_is_better else -s.score, i)

    order = tuple(s.candidate_id for _, s in sorted(enumerate(scores), key=key))
    return RankedCandidates(method, order, {s.candidate_id: s for s in scores}, lower_is_better)


def bellman_targets(q: QFunction, data: OfflineDataset, gamma: float) -> np.ndarray:
    b = data.batch
    return b.rewards + gamma * (~b.terminals) * q.max(b.next_states)


def _design(data: OfflineDataset, y: np.ndarray) -> DesignMatrix:
    b = data.batch
    return DesignMatrix(b.states, y, b.actions, data.config.num_actions)


# ---------------------------------------------------------------------------
# SBV
# ---------------------------------------------------------------------------


def prepare_backup_fits(specs: Sequence[RegressorSpec], train: OfflineDataset) -> list[PreparedFit]:
    """Bind every backup spec to the training inputs once; candidates differ only in targets."""
    b = train.batch
    if not specs:
        raise ValueError("need at least one regressor spec")
    return [PreparedFit(s, b.states, b.actions, train.config.num_actions) for s in specs]


def estimate_backup(q: QFunction, split: DatasetSplit, specs: Sequence[RegressorSpec], gamma: float,
                    backup_train: OfflineDataset | None = None, candidate_id: str = "",
                    prepared: Sequence[PreparedFit] | None = None) -> BackupEstimate:
    """Fit ``B* q`` by regression on the training split (or ``backup_train``),
    choosing the spec with the lowest validation Bellman-backup MSE.

    ``prepared`` lets callers scoring many candidates on one split bind the
    specs to the training inputs once (see :func:`prepare_backup_fits`).
    """
    train = backup_train if backup_train is not None else split.train
    if prepared is None:
        prepared = prepare_backup_fits(specs, train)
    y_tr = bellman_targets(q, train, gamma)
    y_va = bellman_targets(q, split.validation, gamma)
    if not (np.all(np.isfinite(y_tr)) and np.all(np.isfinite(y_va))):
        raise RegressionError("Bellman targets are not finite")
    spec, model, table = select_prepared(prepared, y_tr, _design(split.validation, y_va))
    mse = next(m for s, m in table if s is spec)
    return BackupEstimate(candidate_id or q.label, model, spec, mse, tuple(table))


def sbv_score(q: QFunction, backup: BackupEstimate, val: OfflineDataset) -> SelectionScore:
    b = val.batch
    gap = q(b.states, b.actions) - backup(b.states, b.actions)
    return SelectionScore(backup.candidate_id, "sbv", float(np.mean(gap**2)),
                          aux={"backup_mse": backup.val_backup_mse, "backup_spec": backup.spec.label})


def sbv_rank(candidates: CandidateSet, split: DatasetSplit, specs: Sequence[RegressorSpec],
             gamma: float, backup_data: str = "same_train", seed: int = 0,
             diag_tol: float = 1e-6) -> tuple[RankedCandidates, dict]:
    """Score every candidate with SBV.

    ``backup_data="separate_half"`` fits the backups on a random half of the
    training trajectories instead of all of them. Each score carries the
    validation EMSBE and is flagged when the fitted backup predicts the
    validation targets worse than the candidate itself does.
    """
    if backup_data == "same_train":
        backup_train = split.train
    elif backup_data == "separate_half":
        backup_train = split_by_trajectory(split.train, 0.5, seed).train
    else:
        raise ValueError(f"unknown backup_data {backup_data!r}")
    prepared = prepare_backup_fits(specs, backup_train)
    scores, backups = [], {}
    for c in candidates:
        try:
            est = estimate_backup(c.q, split, specs, gamma, backup_train, c.id, prepared)
        except RegressionError as exc:
            scores.append(SelectionScore(c.id, "sbv", math.nan, "failed", {"error": str(exc)}))
            continue
        backups[c.id] = est
        s = sbv_score(c.q, est, split.validation)
        emsbe = emsbe_score(c.q, split.validation, gamma).score
        flag = FLAG_BACKUP_ABOVE_EMSBE if est.val_backup_mse > emsbe + diag_tol else ""
        scores.append(SelectionScore(c.id, "sbv", s.score, flag, {**s.aux, "emsbe": emsbe}))
    return rank_scores("sbv", scores, True), backups


def sbv_early_stopping(iterates: Sequence[QFunction], split: DatasetSplit,
                       specs: Sequence[RegressorSpec], gamma: float) -> tuple[int, list[float]]:
    """Pick the FQI iterate with the lowest SBV score.

    The previous iterate's winning spec is tried first for the next one, so
    on ties the backup class carries over between iterations. Returns the
    1-based iterate index and the per-iterate scores.
    """
    specs = list(specs)
    scores = []
    for q in iterates:
        est = estimate_backup(q, split, specs, gamma)
        scores.append(sbv_score(q, est, split.validation).score)
        specs = [est.spec] + [s for s in specs if s is not est.spec]
    return int(np.argmin(scores)) + 1, scores


# ---------------------------------------------------------------------------
# EMSBE
# ---------------------------------------------------------------------------


def emsbe_score(q: QFunction, val: OfflineDataset, gamma: float, candidate_id: str = "") -> SelectionScore:
    b = val.batch
    resid = q(b.states, b.actions) - bellman_targets(q, val, gamma)
    return SelectionScore(candidate_id or q.label, "emsbe", float(np.mean(resid**2)))


def emsbe_rank(candidates: CandidateSet, val: OfflineDataset, gamma: float) -> RankedCandidates:
    return rank_scores("emsbe", [emsbe_score(c.q, val, gamma, c.id) for c in candidates], True)


# ---------------------------------------------------------------------------
# WIS
# ---------------------------------------------------------------------------


def wis_estimate(policy: Policy, data: OfflineDataset, behavior: Policy, gamma: float,
                 horizon: int | None = None, candidate_id: str = "") -> SelectionScore:
    """Weighted per-decision importance sampling.

    Returns ``sum_i num_i / sum_i den_i`` with
    ``num_i = sum_t gamma^t r_t rho_{0:t}`` and ``den_i = sum_t gamma^t rho_{0:t}``
    over ``t = 0..horizon``. A zero total denominator or numerator yields a
    score of 0 with a flag.
    """
    T = data.config.eval_horizon if horizon is None else horizon
    nums, dens = [], []
    for traj in data.trajectories:
        n = min(len(traj), T + 1)
        s, a = traj.states[:n], traj.actions[:n]
        idx = np.arange(n)
        p_pi = policy.action_probabilities(s)[idx, a]
        p_mu = behavior.action_probabilities(s)[idx, a]
        if np.any(p_mu <= 0):
            raise ValueError(f"behavior policy gives zero probability to an observed action (trajectory {traj.id})")
        rho = np.cumprod(p_pi / p_mu)
        disc = gamma ** idx
        nums.append(float(np.sum(disc * traj.rewards[:n] * rho)))
        dens.append(float(np.sum(disc * rho)))
    nums, dens = np.array(nums), np.array(dens)
    total_den, total_num = dens.sum(), nums.sum()
    aux = {
        "ess": float(total_den**2 / np.sum(dens**2)) if total_den > 0 else 0.0,
        "zero_weight_fraction": float(np.mean(dens == 0)),
        "numerator": float(total_num),
        "denominator": float(total_den),
    }
    if total_den == 0:
        return SelectionScore(candidate_id or policy.label, "wis", 0.0, "zero_denominator", aux)
    if total_num == 0:
        return SelectionScore(candidate_id or policy.label, "wis", 0.0, "zero_numerator", aux)
    return SelectionScore(candidate_id or policy.label, "wis", float(total_num / total_den), "", aux)


def candidate_policy(c: Candidate) -> Policy:
    """Greedy policy of a candidate; the zero function breaks ties at random."""
    tie = "random" if c.provenance.get("algorithm") == "zero" else "first_index"
    return greedy_policy(c.q, tie)


def wis_rank(candidates: CandidateSet, data: OfflineDataset, behavior: Policy, gamma: float,
             horizon: int | None = None) -> RankedCandidates:
    scores = [wis_estimate(candidate_policy(c), data, behavior, gamma, horizon, c.id) for c in candidates]
    return rank_scores("wis", scores, False)


# ---------------------------------------------------------------------------
# FQE
# ---------------------------------------------------------------------------


def fqe_q_function(policy: Policy, train: OfflineDataset, regressor: RegressorSpec,
                   iterations: int, gamma: float) -> QFunction:
    """Fitted Q-evaluation: FQI with ``E_{a' ~ pi(s')} Q(s', a')`` targets, from Q0 = 0."""
    b = train.batch
    A = train.config.num_actions
    cont = (~b.terminals).astype(float)
    pi_next = policy.action_probabilities(b.next_states)
    next_v = np.zeros(len(b))
    q = None
    try:
        prep = PreparedFit(regressor, b.states, b.actions, A)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise RegressionError(f"FQE iteration 1: {exc}") from exc
    for k in range(iterations):
        targets = b.rewards + gamma * cont * next_v
        try:
            model = prep.fit(targets)
        except (np.linalg.LinAlgError, ValueError, RegressionError) as exc:
            raise RegressionError(f"FQE iteration {k + 1}: {exc}") from exc
        q = QFunction(model.predict_all, A, f"fqe/{regressor.label}/K={k + 1}")
        next_v = np.sum(pi_next * q.values(b.next_states), axis=1)
    return q


def fqe_evaluate(policy: Policy, split: DatasetSplit, regressor: RegressorSpec, iterations: int = 50,
                 gamma: float = 0.9, candidate_id: str = "") -> SelectionScore:
    """FQE on the training split, averaged over validation initial states."""
    q = fqe_q_function(policy, split.train, regressor, iterations, gamma)
    s0 = split.validation.initial_states
    v0 = np.sum(policy.action_probabilities(s0) * q.values(s0), axis=1)
    return SelectionScore(candidate_id or policy.label, "fqe", float(v0.mean()),
                          aux={"regressor": regressor.label})


def _fqe_fingerprint(policy: Policy, split: DatasetSplit) -> bytes:
    """FQE reads a policy only at training next states and validation initial states."""
    probs = (policy.action_probabilities(split.train.batch.next_states),
             policy.action_probabilities(split.validation.initial_states))
    return b"".join(np.ascontiguousarray(p, dtype=float).tobytes() for p in probs)


def fqe_rank(candidates: CandidateSet, split: DatasetSplit, regressor: RegressorSpec,
             iterations: int, gamma: float, method: str = "fqe") -> RankedCandidates:
    """Rank greedy policies by FQE value.

    Candidates whose policies agree wherever FQE reads them get the same
    score, so each distinct policy is evaluated once.
    """
    scores, memo = [], {}
    for c in candidates:
        policy = candidate_policy(c)
        key = _fqe_fingerprint(policy, split)
        if key not in memo:
            try:
                memo[key] = fqe_evaluate(policy, split, regressor, iterations, gamma, c.id)
            except RegressionError as exc:
                memo[key] = SelectionScore(c.id, "fqe", math.nan, "failed", {"error": str(exc)})
        s = memo[key]
        scores.append(SelectionScore(c.id, method, s.score, s.flag, s.aux))
    return rank_scores(method, scores, False)


# ---------------------------------------------------------------------------
# Scores CSV
# ---------------------------------------------------------------------------

SCORES_HEADER = ["method", "candidate_id", "score", "flag", "aux_backup_mse", "aux_ess"]


def score_rows(ranked: RankedCandidates) -> list[dict]:
    rows = []
    for cid in ranked.order:
        s = ranked.scores[cid]
        rows.append({
            "method": ranked.method,
            "candidate_id": cid,
            "score": s.score,
            "flag": s.flag,
            "aux_backup_mse": s.aux.get("backup_mse", ""),
            "aux_ess": s.aux.get("ess", ""),
        })
    return rows


def write_scores(rankings: Sequence[RankedCandidates], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, SCORES_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rankings:
            for row in score_rows(r):
                w.writerow({k: fmt_float(v) if isinstance(v, float) else v for k, v in row.items()})
