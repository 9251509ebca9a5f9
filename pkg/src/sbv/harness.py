"""Ground-truth evaluation, ranking metrics and the toy experiments.

Every experiment is a pure function of its config and seed list. Each
(phi, seed) cell derives its own streams from the seed, so cells can run in
any order or in parallel and still give identical rows.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .candidates import (Candidate, CandidateSet, FqiSpec, as_candidate, assemble_candidates,
                         fqi_train, zero_candidate)
from .data import (DatasetSplit, MdpConfig, OfflineDataset, derive_seed, split_by_trajectory,
                   uniform_policy)
from .regression import Forest, PolyRidge, RegressorSpec, spec_from_dict, spec_to_dict
from .selectors import (RankedCandidates, candidate_policy,
                        emsbe_rank, fqe_rank, sbv_rank, score_rows, wis_rank)
from .toy import (KnnMsbeOracle, ToyConfig, approx_q_star, generate_dataset,
                  rollout_value_and_se)

log = logging.getLogger("sbv")

DEGENERATE_TOP_K = 0.5
WIS_DEGENERATE_FLAGS = ("zero_denominator", "zero_numerator")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyValueRecord:
    candidate_id: str
    value: float
    se: float = 0.0

    def __post_init__(self):
        if self.se < 0:
            raise ValueError("standard error must be >= 0")


@dataclass(frozen=True)
class MetricReport:
    method: str
    top_k_mean: float
    top_k_max: float
    spearman: float
    flag: str = ""
    per_seed: tuple = ()


def standardize_values(values: Sequence[float]) -> np.ndarray:
    """Map values affinely onto [0, 1] (min to 0, max to 1)."""
    v = np.asarray(values, dtype=float)
    if v.size < 2 or v.max() == v.min():
        raise ValueError("standardization needs at least two distinct values")
    return (v - v.min()) / (v.max() - v.min())


def spearman_rank_corr(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise ValueError("spearman needs two sequences of equal length >= 2")
    ra, rb = rankdata(a) - (a.size + 1) / 2, rankdata(b) - (b.size + 1) / 2
    denom = math.sqrt(float(np.sum(ra**2) * np.sum(rb**2)))
    if denom == 0:
        raise ValueError("spearman is undefined when either argument has constant ranks")
    return float(np.sum(ra * rb) / denom)


def _is_degenerate(ranked: RankedCandidates) -> bool:
    return ranked.method == "wis" and all(s.flag in WIS_DEGENERATE_FLAGS for s in ranked.scores.values())


def _expected_max_of_subset(values: np.ndarray, m: int, floor: float) -> float:
    """E[max(floor, max of a uniform random m-subset of values)]."""
    v = np.sort(values)
    g = v.size
    total = math.comb(g, m)
    # P(subset max = v[j]) = (C(j + 1, m) - C(j, m)) / C(g, m), j zero-based
    probs = np.array([math.comb(j + 1, m) - math.comb(j, m) for j in range(g)], dtype=float) / total
    return float(np.sum(probs * np.maximum(v, floor)))


def _constant_truth(truth: Sequence[PolicyValueRecord]) -> bool:
    vals = [t.value for t in truth]
    return max(vals) == min(vals)


def top_k_metrics(ranked: RankedCandidates, truth: Sequence[PolicyValueRecord], k: int = 3) -> tuple[float, float]:
    """Mean and max standardized true value among the ``k`` top-ranked candidates.

    Exact score ties are broken uniformly at random and the metrics are
    their expectations under that tie-breaking, so the result does not
    depend on candidate order. A WIS ranking in which every candidate is
    flagged degenerate reports 0.5 for both, the chance-level convention.
    """
    if not 1 <= k <= len(truth):
        raise ValueError(f"k must lie in [1, {len(truth)}]")
    if _is_degenerate(ranked):
        return DEGENERATE_TOP_K, DEGENERATE_TOP_K
    if _constant_truth(truth):
        return math.nan, math.nan
    std = dict(zip([t.candidate_id for t in truth], standardize_values([t.value for t in truth])))
    total, best, left = 0.0, -math.inf, k
    for group in ranked.tie_groups():
        vals = np.array([std[cid] for cid in group])
        if len(group) <= left:
            total += float(vals.sum())
            best = max(best, float(vals.max()))
            left -= len(group)
        else:
            total += left * float(vals.mean())
            best = _expected_max_of_subset(vals, left, best)
            left = 0
        if left == 0:
            break
    return total / k, best


def ranking_spearman(ranked: RankedCandidates, truth: Sequence[PolicyValueRecord]) -> float:
    """Spearman correlation between a method's preference and the true values (NaN if undefined)."""
    if _is_degenerate(ranked):
        return math.nan
    ids = [t.candidate_id for t in truth]
    sign = -1.0 if ranked.lower_is_better else 1.0
    pref = [sign * ranked.scores[cid].score for cid in ids]
    if not np.all(np.isfinite(pref)):
        return math.nan
    try:
        return spearman_rank_corr(pref, [t.value for t in truth])
    except ValueError:
        return math.nan


def cell_metrics(phi: float, seed: int, ranked: RankedCandidates, truth: Sequence[PolicyValueRecord],
                 k: int) -> dict:
    """One CELL_HEADER row for a method's ranking against the true values."""
    mean, mx = top_k_metrics(ranked, truth, k)
    flag = method_flag(ranked)
    if _constant_truth(truth):
        flag = ";".join(f for f in ("constant_truth", flag) if f)
    return {"phi": phi, "seed": seed, "method": ranked.method, "top3_mean": mean, "top3_max": mx,
            "spearman": ranking_spearman(ranked, truth), "flag": flag}


def method_flag(ranked: RankedCandidates) -> str:
    if _is_degenerate(ranked):
        return "degenerate"
    counts: dict[str, int] = {}
    for s in ranked.scores.values():
        if s.flag:
            counts[s.flag] = counts.get(s.flag, 0) + 1
    return ";".join(f"{k}={v}" for k, v in sorted(counts.items()))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyExperimentConfig:
    """Everything a toy experiment cell needs besides (phi, seed)."""

    num_trajectories: int = 25
    horizon: int = 25
    train_fraction: float = 0.8
    gamma_train: float = 0.9
    gamma_eval: float = 1.0
    eval_horizon: int = 100
    eval_episodes: int = 1000
    fqi_iterations: int = 50
    fqi_degrees: tuple = (1, 2, 3, 4)
    fqi_penalties: tuple = (0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
    include_q_star: bool = True
    qstar_rollouts: int = 10000
    qstar_horizon: int = 100
    backup_degrees: tuple = (1, 2, 3, 4)
    backup_penalties: tuple = (0.0, 0.01, 0.1, 1.0, 10.0)
    methods: tuple = ("sbv", "emsbe", "wis", "fqe")
    fqe_regressor: dict = field(default_factory=lambda: spec_to_dict(PolyRidge(2, 1.0)))
    fqe_iterations: int = 50
    ope_data: str = "full"
    top_k: int = 3

    def __post_init__(self):
        errors = []
        if not 0 < self.train_fraction < 1:
            errors.append("train_fraction must lie in (0, 1)")
        for name in ("num_trajectories", "horizon", "eval_horizon", "eval_episodes",
                     "fqi_iterations", "fqe_iterations", "top_k", "qstar_rollouts", "qstar_horizon"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.num_trajectories < 2:
            errors.append("num_trajectories must be >= 2 to split")
        if not 0 <= self.gamma_train < 1:
            errors.append("gamma_train must lie in [0, 1)")
        if not 0 <= self.gamma_eval <= 1:
            errors.append("gamma_eval must lie in [0, 1]")
        unknown = set(self.methods) - {"sbv", "emsbe", "wis", "fqe"}
        if unknown:
            errors.append(f"unknown methods {sorted(unknown)}")
        if not self.fqi_degrees or not self.fqi_penalties:
            errors.append("the FQI grid is empty")
        if not self.backup_degrees or not self.backup_penalties:
            errors.append("the backup grid is empty")
        if any(d < 1 for d in (*self.fqi_degrees, *self.backup_degrees)):
            errors.append("polynomial degrees must be >= 1")
        if any(p < 0 for p in (*self.fqi_penalties, *self.backup_penalties)):
            errors.append("ridge penalties must be >= 0")
        if self.ope_data not in ("full", "split"):
            errors.append("ope_data must be 'full' or 'split'")
        try:
            spec_from_dict(dict(self.fqe_regressor))
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"fqe_regressor: {exc}")
        if errors:
            raise ValueError("; ".join(errors))
        for name in ("fqi_degrees", "fqi_penalties", "backup_degrees", "backup_penalties", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def mdp_config(self) -> MdpConfig:
        return MdpConfig(2, 4, self.gamma_train, self.gamma_eval, self.eval_horizon)

    @property
    def fqi_regressors(self) -> list[RegressorSpec]:
        return [PolyRidge(d, float(p)) for d in self.fqi_degrees for p in self.fqi_penalties]

    @property
    def backup_specs(self) -> list[RegressorSpec]:
        return [PolyRidge(d, float(p)) for d in self.backup_degrees for p in self.backup_penalties]

    @property
    def fqe_spec(self) -> RegressorSpec:
        return spec_from_dict(dict(self.fqe_regressor))

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# Toy cells
# ---------------------------------------------------------------------------


def toy_dataset(phi: float, seed: int, cfg: ToyExperimentConfig, reward_start: int = 0) -> OfflineDataset:
    """Seeded so that every phi shares the same underlying normal draws."""
    toy = ToyConfig(phi, cfg.num_trajectories, cfg.horizon, derive_seed(seed, "data"), reward_start)
    return generate_dataset(toy, mdp_config=cfg.mdp_config)


def toy_split(data: OfflineDataset, seed: int, cfg: ToyExperimentConfig) -> DatasetSplit:
    return split_by_trajectory(data, cfg.train_fraction, derive_seed(seed, "split"))


def toy_candidates(phi: float, seed: int, train: OfflineDataset, cfg: ToyExperimentConfig,
                   regressors: Sequence[RegressorSpec] | None = None) -> CandidateSet:
    """FQI over the regressor grid, then the regression estimate of Q*."""
    regs = cfg.fqi_regressors if regressors is None else regressors
    fqi = [as_candidate(fqi_train(FqiSpec(r, cfg.fqi_iterations, cfg.gamma_train), train)) for r in regs]
    q_star = None
    if cfg.include_q_star:
        q_star = approx_q_star(ToyConfig(phi), cfg.qstar_rollouts, cfg.qstar_horizon,
                               cfg.gamma_train, derive_seed(seed, "qstar"))
    return assemble_candidates(fqi, q_star=q_star)


def evaluate_truth(phi: float, candidates: Sequence[Candidate], seed: int,
                   cfg: ToyExperimentConfig) -> list[PolicyValueRecord]:
    """Monte Carlo value of each greedy policy; all candidates share the rollout streams."""
    toy = ToyConfig(phi)
    rseed = derive_seed(seed, "truth")
    out = []
    for c in candidates:
        v, se = rollout_value_and_se(toy, candidate_policy(c), cfg.eval_episodes, cfg.eval_horizon,
                                     cfg.gamma_eval, rseed)
        out.append(PolicyValueRecord(c.id, v, se))
    return out


def run_methods(cands: CandidateSet, split: DatasetSplit, cfg: ToyExperimentConfig,
                context: str = "", seed: int = 0) -> dict[str, RankedCandidates]:
    """Run every configured selector; logs one line per method with its wall time."""
    full = OfflineDataset(split.train.trajectories + split.validation.trajectories, split.train.config)
    ope_data = full if cfg.ope_data == "full" else split.validation
    ope_split = DatasetSplit(full, full, split.seed) if cfg.ope_data == "full" else split
    out = {}
    for m in cfg.methods:
        t0 = time.perf_counter()
        if m == "sbv":
            out[m], _ = sbv_rank(cands, split, cfg.backup_specs, cfg.gamma_train, seed=seed)
        elif m == "emsbe":
            out[m] = emsbe_rank(cands, split.validation, cfg.gamma_train)
        elif m == "wis":
            out[m] = wis_rank(cands, ope_data, uniform_policy(2), cfg.gamma_train, cfg.eval_horizon)
        elif m == "fqe":
            out[m] = fqe_rank(cands, ope_split, cfg.fqe_spec, cfg.fqe_iterations, cfg.gamma_train)
        log.info("%s method=%s seconds=%.3f", context, m, time.perf_counter() - t0)
    return out


CELL_HEADER = ["phi", "seed", "method", "top3_mean", "top3_max", "spearman", "flag"]
TRUTH_HEADER = ["phi", "seed", "candidate_id", "value", "se"]


@dataclass
class CellOutput:
    """Plain-data result of one (phi, seed) cell; safe to pass between processes."""

    metrics: list
    scores: list
    truth: list


def sweep_cell(phi: float, seed: int, cfg: ToyExperimentConfig) -> CellOutput:
    ctx = f"phi={phi:g} seed={seed}"
    t0 = time.perf_counter()
    split = toy_split(toy_dataset(phi, seed, cfg), seed, cfg)
    cands = toy_candidates(phi, seed, split.train, cfg)
    log.info("%s stage=candidates count=%d seconds=%.3f", ctx, len(cands), time.perf_counter() - t0)
    rankings = run_methods(cands, split, cfg, ctx, seed)
    t0 = time.perf_counter()
    truth = evaluate_truth(phi, cands, seed, cfg)
    log.info("%s stage=truth seconds=%.3f", ctx, time.perf_counter() - t0)
    metrics, scores = [], []
    for ranked in rankings.values():
        metrics.append(cell_metrics(phi, seed, ranked, truth, cfg.top_k))
        scores.extend({"phi": phi, "seed": seed, **row} for row in score_rows(ranked))
    truth_rows = [{"phi": phi, "seed": seed, "candidate_id": t.candidate_id, "value": t.value, "se": t.se}
                  for t in truth]
    return CellOutput(metrics, scores, truth_rows)


def _call(args):
    fn, a = args
    return fn(*a)


def map_cells(fn: Callable, arg_list: Sequence[tuple], workers: int | None = None) -> list:
    """Ordered map over experiment cells, optionally across processes.

    ``workers`` defaults to the ``SBV_WORKERS`` environment variable (1 if unset).
    Output order follows ``arg_list`` regardless of completion order.
    """
    if workers is None:
        workers = int(os.environ.get("SBV_WORKERS", "1"))
    if workers <= 1 or len(arg_list) <= 1:
        return [fn(*a) for a in arg_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_call, [(fn, a) for a in arg_list]))


def summarize_cells(rows: Sequence[dict], key_fields: Sequence[str] = ("phi", "method")) -> list[dict]:
    """Average per-seed metric rows over seeds, one row per (phi, method).

    Means skip undefined (NaN) cells. The seed column holds the number of
    seeds; the flag column counts the seeds that carried any flag.
    """
    def mean(vals):
        vals = [v for v in vals if np.isfinite(v)]
        return float(np.mean(vals)) if vals else math.nan

    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in key_fields), []).append(r)
    out = []
    for key, rs in groups.items():
        nflag = sum(1 for r in rs if r["flag"])
        out.append({**dict(zip(key_fields, key)), "seed": len(rs),
                    "top3_mean": mean([r["top3_mean"] for r in rs]),
                    "top3_max": mean([r["top3_max"] for r in rs]),
                    "spearman": mean([r["spearman"] for r in rs]),
                    "flag": f"flagged_seeds={nflag}" if nflag else ""})
    return [{k: r[k] for k in CELL_HEADER} for r in out]


@dataclass
class SweepResult:
    cells: list
    summary: list
    scores: list
    truth: list


def noise_sweep_experiment(phis: Sequence[float], seeds: Sequence[int], cfg: ToyExperimentConfig,
                           workers: int | None = None) -> SweepResult:
    """SBV / EMSBE / WIS / FQE across stochasticity levels (phi) and seeds."""
    if not phis or not seeds:
        raise ValueError("need at least one phi and one seed")
    outs = map_cells(sweep_cell, [(float(p), int(s), cfg) for p in phis for s in seeds], workers)
    cells = [r for o in outs for r in o.metrics]
    return SweepResult(cells, summarize_cells(cells), [r for o in outs for r in o.scores],
                       [r for o in outs for r in o.truth])


# ---------------------------------------------------------------------------
# MSBE bands versus returns
# ---------------------------------------------------------------------------

GROUP_HEADER = ["phi", "seed", "candidate_id", "msbe", "value", "se", "band"]
BAND_HEADER = ["phi", "seed", "band", "count", "min_value", "max_value"]
BANDS = ("low", "medium", "high")


def assign_bands(msbe: Sequence[float], zero_msbe: float) -> list[str]:
    """High: MSBE above the zero function's. The rest splits on log-MSBE
    terciles: the lowest third is low, the remainder medium."""
    msbe = np.asarray(msbe, dtype=float)
    bands = np.where(msbe > zero_msbe, "high", "medium").astype(object)
    below = np.flatnonzero(msbe <= zero_msbe)
    if below.size:
        logm = np.log(np.maximum(msbe[below], np.finfo(float).tiny))
        cut = np.quantile(logm, 1 / 3)
        bands[below[logm <= cut]] = "low"
    return [str(b) for b in bands]


@dataclass
class GroupOutput:
    candidates: list
    bands: list


def group_cell(phi: float, seed: int, cfg: ToyExperimentConfig, oracle_kw: dict) -> GroupOutput:
    t0 = time.perf_counter()
    split = toy_split(toy_dataset(phi, seed, cfg), seed, cfg)
    cands = toy_candidates(phi, seed, split.train, cfg)
    oracle = KnnMsbeOracle(ToyConfig(phi), derive_seed(seed, "oracle"), cfg.gamma_train, **oracle_kw)
    zero_msbe = oracle.msbe(zero_candidate(2).q)
    msbe = [oracle.msbe(c.q) for c in cands]
    truth = evaluate_truth(phi, cands, seed, cfg)
    bands = assign_bands(msbe, zero_msbe)
    rows = [{"phi": phi, "seed": seed, "candidate_id": c.id, "msbe": m, "value": t.value, "se": t.se, "band": b}
            for c, m, t, b in zip(cands, msbe, truth, bands)]
    rows.append({"phi": phi, "seed": seed, "candidate_id": "zero", "msbe": zero_msbe,
                 "value": math.nan, "se": math.nan, "band": "threshold"})
    summary = []
    for band in BANDS:
        vals = [t.value for t, b in zip(truth, bands) if b == band]
        summary.append({"phi": phi, "seed": seed, "band": band, "count": len(vals),
                        "min_value": min(vals) if vals else math.nan,
                        "max_value": max(vals) if vals else math.nan})
    log.info("phi=%g seed=%d stage=groups seconds=%.3f", phi, seed, time.perf_counter() - t0)
    return GroupOutput(rows, summary)


def msbe_group_experiment(phi: float, seeds: Sequence[int], cfg: ToyExperimentConfig,
                          oracle_kw: dict | None = None, workers: int | None = None) -> tuple[list, list]:
    """Oracle MSBE band versus true return for every candidate, per seed."""
    outs = map_cells(group_cell, [(float(phi), int(s), cfg, dict(oracle_kw or {})) for s in seeds], workers)
    return [r for o in outs for r in o.candidates], [r for o in outs for r in o.bands]


# ---------------------------------------------------------------------------
# Backup-data ablation
# ---------------------------------------------------------------------------

ABLATION_HEADER = ["phi", "seed", "candidate_id", "arm", "backup_mse", "sbv_score"]
ARMS = ("same_train", "separate_half")


def ablation_cell(phi: float, seed: int, cfg: ToyExperimentConfig) -> list[dict]:
    split = toy_split(toy_dataset(phi, seed, cfg), seed, cfg)
    cands = toy_candidates(phi, seed, split.train, cfg)
    rows = []
    for arm in ARMS:
        ranked, _ = sbv_rank(cands, split, cfg.backup_specs, cfg.gamma_train, arm, derive_seed(seed, "half"))
        for c in cands:
            s = ranked.scores[c.id]
            rows.append({"phi": phi, "seed": seed, "candidate_id": c.id, "arm": arm,
                         "backup_mse": s.aux.get("backup_mse", math.nan), "sbv_score": s.score})
    return rows


def split_ablation_experiment(phis: Sequence[float], seeds: Sequence[int], cfg: ToyExperimentConfig,
                              workers: int | None = None) -> list[dict]:
    """Validation backup MSE when backups are fit on all of D_T versus a random half of it."""
    outs = map_cells(ablation_cell, [(float(p), int(s), cfg) for p in phis for s in seeds], workers)
    return [r for o in outs for r in o]


def ablation_win_rate(rows: Sequence[dict]) -> float:
    """Fraction of (phi, seed, candidate) cells where same-train backup MSE <= separate-half MSE."""
    by = {}
    for r in rows:
        by.setdefault((r["phi"], r["seed"], r["candidate_id"]), {})[r["arm"]] = r["backup_mse"]
    wins = [v["same_train"] <= v["separate_half"] for v in by.values()]
    return float(np.mean(wins))


# ---------------------------------------------------------------------------
# FQE backend sensitivity
# ---------------------------------------------------------------------------

FQE_HEADER = ["phi", "seed", "backend", "top_group_size", "own_share", "other_share", "top3_mean", "top3_max"]
FQE_CROSS_HEADER = ["phi", "backend", "family", "share", "top3_mean", "top3_se"]


@dataclass(frozen=True)
class FqeFamily:
    """A named candidate family: FQI grid points plus the FQE backend of the same kind."""

    name: str
    fqi_regressors: tuple
    backend: RegressorSpec


def default_fqe_families() -> tuple[FqeFamily, FqeFamily]:
    """Two families whose grids reach into high-variance fits, so greedy policies differ."""
    ridge = FqeFamily("ridge", tuple(PolyRidge(d, p) for d in (2, 3, 4, 5) for p in (0.01, 1.0)),
                      PolyRidge(2, 1.0))
    forest = FqeFamily("forest", tuple(Forest(10, n, m, seed=0) for n in (1, 2, 5, 20) for m in (1, None)),
                       Forest(10, 5, None, seed=0))
    return ridge, forest


def family_shares(ranked: RankedCandidates, members: dict) -> tuple[int, dict]:
    """Size of the top tie group and, per family, the fraction of it that family produced.

    FQE scores identical policies identically, so the top choice is often a
    tie across families; sharing it out keeps the statistic independent of
    candidate order. ``members`` maps candidate id to the set of families
    whose grid contains it.
    """
    top = ranked.tie_groups()[0]
    names = sorted({n for m in members.values() for n in m})
    return len(top), {n: sum(n in members[c] for c in top) / len(top) for n in names}


def fqe_cell(phi: float, seed: int, families: tuple, cfg: ToyExperimentConfig) -> list[dict]:
    split = toy_split(toy_dataset(phi, seed, cfg), seed, cfg)
    full = OfflineDataset(split.train.trajectories + split.validation.trajectories, split.train.config)
    ope_split = DatasetSplit(full, full, split.seed) if cfg.ope_data == "full" else split
    grid: dict = {}
    for fam in families:
        for r in fam.fqi_regressors:
            grid.setdefault(r, set()).add(fam.name)
    cs = [as_candidate(fqi_train(FqiSpec(r, cfg.fqi_iterations, cfg.gamma_train), split.train)) for r in grid]
    members = {c.id: names for c, names in zip(cs, grid.values())}
    cands = assemble_candidates(cs)
    truth = evaluate_truth(phi, cands, seed, cfg)
    rows = []
    for fam in families:
        other = next((f.name for f in families if f.name != fam.name), fam.name)
        t0 = time.perf_counter()
        ranked = fqe_rank(cands, ope_split, fam.backend, cfg.fqe_iterations, cfg.gamma_train)
        mean, mx = top_k_metrics(ranked, truth, cfg.top_k)
        size, shares = family_shares(ranked, members)
        rows.append({"phi": phi, "seed": seed, "backend": fam.name, "top_group_size": size,
                     "own_share": shares[fam.name], "other_share": shares[other],
                     "top3_mean": mean, "top3_max": mx})
        log.info("phi=%g seed=%d backend=%s seconds=%.3f", phi, seed, fam.name, time.perf_counter() - t0)
    return rows


def fqe_sensitivity_experiment(families: tuple, seeds: Sequence[int], cfg: ToyExperimentConfig,
                               phis: Sequence[float] = (0.0, 0.25),
                               workers: int | None = None) -> tuple[list, list]:
    """FQE with each family's backend ranks the union of both families' candidates.

    Returns per-seed rows and a cross table: for each (phi, backend, family),
    the family's mean share of the backend's top choice, plus the backend's
    mean top-k value and its standard error over seeds.
    """
    if len(families) != 2:
        raise ValueError("the sensitivity experiment compares exactly two families")
    outs = map_cells(fqe_cell, [(float(p), int(s), tuple(families), cfg) for p in phis for s in seeds], workers)
    rows = [r for o in outs for r in o]
    cross = []
    for phi in phis:
        for fam in families:
            rs = [r for r in rows if r["phi"] == float(phi) and r["backend"] == fam.name]
            vals = np.array([r["top3_mean"] for r in rs])
            se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
            for other in families:
                key = "own_share" if other.name == fam.name else "other_share"
                share = float(np.mean([r[key] for r in rs]))
                cross.append({"phi": float(phi), "backend": fam.name, "family": other.name, "share": share,
                              "top3_mean": float(vals.mean()), "top3_se": se})
    return rows, cross


def fqe_match_rates(rows: Sequence[dict]) -> tuple[float, float]:
    """(self-preference rate, cross-preference rate) pooled over backends, arms and seeds."""
    return float(np.mean([r["own_share"] for r in rows])), float(np.mean([r["other_share"] for r in rows]))


def fqe_backend_gap(cross: Sequence[dict]) -> list[tuple[float, float, float]]:
    """Per arm: (phi, |difference of the backends' mean top-k|, pooled standard error)."""
    out = []
    for phi in sorted({r["phi"] for r in cross}):
        per = {r["backend"]: (r["top3_mean"], r["top3_se"]) for r in cross if r["phi"] == phi}
        (m1, s1), (m2, s2) = per.values()
        out.append((phi, abs(m1 - m2), math.sqrt(s1**2 + s2**2)))
    return out


# ---------------------------------------------------------------------------
# WIS degeneracy
# ---------------------------------------------------------------------------

WIS_HEADER = ["seed", "candidate_id", "score", "flag", "ess", "zero_weight_fraction"]


def wis_cell(seed: int, cfg: ToyExperimentConfig, reward_start: int, phi: float) -> list[dict]:
    split = toy_split(toy_dataset(phi, seed, cfg, reward_start), seed, cfg)
    cands = toy_candidates(phi, seed, split.train, cfg)
    ranked = wis_rank(cands, split.train, uniform_policy(2), cfg.gamma_train, cfg.eval_horizon)
    return [{"seed": seed, "candidate_id": c.id, "score": ranked.scores[c.id].score,
             "flag": ranked.scores[c.id].flag, "ess": ranked.scores[c.id].aux["ess"],
             "zero_weight_fraction": ranked.scores[c.id].aux["zero_weight_fraction"]} for c in cands]


def wis_degeneracy_experiment(seeds: Sequence[int], cfg: ToyExperimentConfig, reward_start: int = 20,
                              phi: float = 0.25, workers: int | None = None) -> list[dict]:
    """WIS of every greedy candidate on the training split of a sparse-reward toy dataset."""
    outs = map_cells(wis_cell, [(int(s), cfg, reward_start, float(phi)) for s in seeds], workers)
    return [r for o in outs for r in o]


def degenerate_fraction(rows: Sequence[dict]) -> float:
    return float(np.mean([r["flag"] in WIS_DEGENERATE_FLAGS for r in rows]))

