"""Regression backends used to fit Bellman backups and FQI/FQE iterates.

Four model families are available: polynomial ridge regression (closed
form), k-nearest neighbours, a bagged CART forest and an exhaustive
per-cell mean for finite feature spaces. Q-style regressions fit one
independent model per action.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import ClassVar, Sequence, Union

import numpy as np
import sklearn
from scipy.spatial import cKDTree
from sklearn.tree import DecisionTreeRegressor

from .data import derive_seed


class RegressionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolyRidge:
    degree: int = 1
    penalty: float = 0.0
    kind: ClassVar[str] = "poly_ridge"

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.penalty < 0:
            raise ValueError("penalty must be >= 0")

    @property
    def label(self) -> str:
        return f"poly(d={self.degree},lam={self.penalty:g})"


@dataclass(frozen=True)
class Knn:
    k: int = 10
    feature_weights: tuple[float, ...] | None = None
    kind: ClassVar[str] = "knn"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.feature_weights is not None:
            object.__setattr__(self, "feature_weights", tuple(float(w) for w in self.feature_weights))

    @property
    def label(self) -> str:
        return f"knn(k={self.k})"


@dataclass(frozen=True)
class Forest:
    """Bagged CART regression trees.

    ``n_min`` is the minimum leaf size, ``m_try`` the number of features
    drawn at each split (``None`` means all of them).
    """

    num_trees: int = 10
    n_min: int = 5
    m_try: int | None = None
    seed: int = 0
    bootstrap: bool = True
    kind: ClassVar[str] = "forest"

    def __post_init__(self):
        if self.num_trees < 1 or self.n_min < 1:
            raise ValueError("num_trees and n_min must be >= 1")
        if self.m_try is not None and self.m_try < 1:
            raise ValueError("m_try must be >= 1")

    @property
    def label(self) -> str:
        return f"forest(n_min={self.n_min},m_try={self.m_try})"


@dataclass(frozen=True)
class CellMean:
    """Per-cell target mean over exactly matching feature rows."""

    kind: ClassVar[str] = "cell_mean"

    @property
    def label(self) -> str:
        return "cell_mean"


RegressorSpec = Union[PolyRidge, Knn, Forest, CellMean]
_SPEC_TYPES = {cls.kind: cls for cls in (PolyRidge, Knn, Forest, CellMean)}


def spec_to_dict(spec: RegressorSpec) -> dict:
    d = {"kind": spec.kind}
    d.update(asdict(spec))
    if d.get("feature_weights") is not None:
        d["feature_weights"] = list(d["feature_weights"])
    return d


def spec_from_dict(d: dict) -> RegressorSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _SPEC_TYPES:
        raise ValueError(f"unknown regressor kind {kind!r}")
    cls = _SPEC_TYPES[kind]
    if kind == "forest" and isinstance(d.get("n_min"), float) and math.isinf(d["n_min"]):
        d["n_min"] = 2**31 - 1
    try:
        return cls(**d)
    except TypeError as exc:
        raise ValueError(f"bad {kind} spec {d}: {exc}") from None


def poly_ridge_grid(degrees: Sequence[int] = (1, 2, 3),
                    penalties: Sequence[float] = (0.0, 0.01, 0.1, 1.0, 10.0)) -> list[PolyRidge]:
    return [PolyRidge(d, lam) for d in degrees for lam in penalties]


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Regression inputs and targets.

    When ``actions`` is given, one model is fit per action and predictions
    are routed by action.
    """

    X: np.ndarray
    y: np.ndarray
    actions: np.ndarray | None = None
    num_actions: int | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y must have the same number of rows")
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if self.actions is not None:
            acts = np.asarray(self.actions, dtype=np.int64).reshape(-1)
            if acts.shape[0] != y.shape[0]:
                raise ValueError("actions must align with y")
            object.__setattr__(self, "actions", acts)
            if self.num_actions is None:
                object.__setattr__(self, "num_actions", int(acts.max()) + 1 if len(acts) else 1)

    def __len__(self) -> int:
        return self.y.shape[0]


# ---------------------------------------------------------------------------
# Polynomial features
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _monomials(dim: int, degree: int) -> tuple[tuple[int, ...], ...]:
    terms: list[tuple[int, ...]] = [()]
    for d in range(1, degree + 1):
        terms.extend(combinations_with_replacement(range(dim), d))
    return tuple(terms)


def num_poly_features(dim: int, degree: int) -> int:
    return math.comb(dim + degree, degree)


def build_features(states: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= ``degree``, constant term first.

    Ordered by degree, then lexicographically: for two inputs and degree 2,
    ``(1, x1, x2, x1^2, x1 x2, x2^2)``.
    """
    X = np.asarray(states, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    n, dim = X.shape
    terms = _monomials(dim, degree)
    out = np.empty((n, len(terms)))
    cache: dict[tuple[int, ...], np.ndarray] = {(): np.ones(n)}
    for j, term in enumerate(terms):
        if term not in cache:
            cache[term] = cache[term[:-1]] * X[:, term[-1]]
        out[:, j] = cache[term]
    return out


# ---------------------------------------------------------------------------
# Fitted models
# ---------------------------------------------------------------------------


class FittedRegressor:
    spec: RegressorSpec
    flagged: bool = False

    def predict(self, X: np.ndarray, actions: np.ndarray | None = None) -> np.ndarray:
        raise NotImplementedError


class FittedPolyRidge(FittedRegressor):
    def __init__(self, spec: PolyRidge, mean: np.ndarray, scale: np.ndarray,
                 weights: np.ndarray, flagged: bool = False):
        self.spec = spec
        self.mean = mean
        self.scale = scale
        self.weights = weights
        self.flagged = flagged

    @property
    def intercept(self) -> float:
        """Intercept on the raw (unstandardized) feature scale."""
        w = self.weights[1:] / self.scale
        return float(self.weights[0] - np.dot(w, self.mean))

    @property
    def coef(self) -> np.ndarray:
        """Non-intercept weights on the raw feature scale."""
        return self.weights[1:] / self.scale

    def predict(self, X, actions=None):
        return self.predict_features(build_features(X, self.spec.degree))

    def predict_features(self, F: np.ndarray) -> np.ndarray:
        """Predict from a precomputed :func:`build_features` matrix."""
        return self.weights[0] + ((F[:, 1:] - self.mean) / self.scale) @ self.weights[1:]


def _fit_poly_ridge(spec: PolyRidge, X: np.ndarray, y: np.ndarray) -> FittedPolyRidge:
    F = build_features(X, spec.degree)[:, 1:]
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale == 0] = 1.0
    Z = np.hstack([np.ones((F.shape[0], 1)), (F - mean) / scale])
    p = Z.shape[1]
    flagged = False
    if spec.penalty > 0:
        A = Z.T @ Z
        A[np.arange(1, p), np.arange(1, p)] += spec.penalty
        w = np.linalg.solve(A, Z.T @ y)
    else:
        w, _, rank, _ = np.linalg.lstsq(Z, y, rcond=None)
        flagged = rank < p
    return FittedPolyRidge(spec, mean, scale, w, flagged)


class FittedKnn(FittedRegressor):
    def __init__(self, spec: Knn, X: np.ndarray, y: np.ndarray):
        self.spec = spec
        w = np.ones(X.shape[1]) if spec.feature_weights is None else np.asarray(spec.feature_weights)
        if w.shape[0] != X.shape[1]:
            raise ValueError("feature_weights length must match the number of features")
        self._w = w
        self._tree = cKDTree(X * w)
        self._y = y
        self._k = min(spec.k, X.shape[0])

    def neighbors(self, X: np.ndarray) -> np.ndarray:
        _, idx = self._tree.query(np.asarray(X, dtype=float) * self._w, k=self._k)
        return np.asarray(idx).reshape(len(X), self._k)

    def predict(self, X, actions=None):
        return self._y[self.neighbors(X)].mean(axis=1)


class FittedForest(FittedRegressor):
    def __init__(self, spec: Forest, trees: list[DecisionTreeRegressor]):
        self.spec = spec
        self.trees = trees

    def tree_predictions(self, X: np.ndarray) -> np.ndarray:
        X = _tree_input(X)
        return np.stack([t.predict(X, check_input=False) for t in self.trees])

    def predict(self, X, actions=None):
        return self.tree_predictions(X).mean(axis=0)


def _tree_input(X) -> np.ndarray:
    # the tree code works in float32; converting here lets fits skip input checks
    X = np.ascontiguousarray(X, dtype=np.float32)
    if not np.all(np.isfinite(X)):
        raise ValueError("forest inputs must be finite")
    return X


@lru_cache(maxsize=256)
def _bootstrap_plan(seed: int, num_trees: int, n: int, bootstrap: bool) -> tuple:
    """Per-tree (row indices, tree seed); a function of the spec and n only."""
    plan = []
    for i in range(num_trees):
        rng = np.random.default_rng(derive_seed(seed, "bootstrap", i))
        idx = rng.integers(n, size=n) if bootstrap else np.arange(n)
        idx.setflags(write=False)
        plan.append((idx, derive_seed(seed, "tree", i) % (2**32)))
    return tuple(plan)


def _fit_forest(spec: Forest, X: np.ndarray, y: np.ndarray) -> FittedForest:
    n, p = X.shape
    if spec.m_try is not None and spec.m_try > p:
        raise ValueError(f"m_try={spec.m_try} exceeds the number of features {p}")
    X32 = _tree_input(X)
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("forest targets must be finite")
    trees = []
    with sklearn.config_context(skip_parameter_validation=True):
        for idx, tree_seed in _bootstrap_plan(spec.seed, spec.num_trees, n, spec.bootstrap):
            tree = DecisionTreeRegressor(min_samples_leaf=min(spec.n_min, 2**31 - 1),
                                         max_features=spec.m_try, random_state=tree_seed)
            tree.fit(X32[idx], y[idx].reshape(-1, 1), check_input=False)
            trees.append(tree)
    return FittedForest(spec, trees)


class FittedCellMean(FittedRegressor):
    def __init__(self, spec: CellMean, X: np.ndarray, y: np.ndarray):
        self.spec = spec
        cells, inverse = np.unique(X, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        sums = np.bincount(inverse, weights=y, minlength=len(cells))
        counts = np.bincount(inverse, minlength=len(cells))
        self.table = {tuple(c): s / k for c, s, k in zip(cells, sums, counts)}
        self.fallback = float(y.mean())

    def predict(self, X, actions=None):
        X = np.asarray(X, dtype=float)
        return np.array([self.table.get(tuple(row), self.fallback) for row in X])


class PerActionRegressor(FittedRegressor):
    """One fitted model per action. Actions without data predict zero."""

    def __init__(self, spec: RegressorSpec, models: list[FittedRegressor | None]):
        self.spec = spec
        self.models = models
        self.flagged = any(m is not None and m.flagged for m in models)

    @property
    def num_actions(self) -> int:
        return len(self.models)

    def predict_all(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.zeros((X.shape[0], self.num_actions))
        if not X.shape[0]:
            return out
        F = build_features(X, self.spec.degree) if isinstance(self.spec, PolyRidge) else None
        for a, m in enumerate(self.models):
            if m is None:
                continue
            out[:, a] = m.predict_features(F) if F is not None else m.predict(X)
        return out

    def predict(self, X, actions=None):
        if actions is None:
            raise ValueError("a per-action regressor needs actions to predict")
        X = np.asarray(X, dtype=float)
        actions = np.asarray(actions, dtype=np.int64)
        out = np.zeros(X.shape[0])
        for a, m in enumerate(self.models):
            mask = actions == a
            if m is not None and mask.any():
                out[mask] = m.predict(X[mask])
        return out


def _fit_single(spec: RegressorSpec, X: np.ndarray, y: np.ndarray) -> FittedRegressor:
    if X.shape[0] == 0:
        raise ValueError("cannot fit a regressor on empty data")
    if isinstance(spec, PolyRidge):
        return _fit_poly_ridge(spec, X, y)
    if isinstance(spec, Knn):
        return FittedKnn(spec, X, y)
    if isinstance(spec, Forest):
        return _fit_forest(spec, X, y)
    if isinstance(spec, CellMean):
        return FittedCellMean(spec, X, y)
    raise TypeError(f"unknown regressor spec {spec!r}")


def fit(spec: RegressorSpec, data: DesignMatrix) -> FittedRegressor:
    """Fit ``spec`` to ``data`` (per action when ``data.actions`` is set)."""
    if len(data) == 0:
        raise ValueError("cannot fit a regressor on empty data")
    if data.actions is None:
        return _fit_single(spec, data.X, data.y)
    models: list[FittedRegressor | None] = []
    for a in range(data.num_actions):
        mask = data.actions == a
        models.append(_fit_single(spec, data.X[mask], data.y[mask]) if mask.any() else None)
    return PerActionRegressor(spec, models)


class PreparedFit:
    """A spec bound to fixed inputs, refittable to new targets.

    Polynomial ridge precomputes the linear map from targets to weights per
    action (the same solution :func:`fit` returns, up to rounding); other
    kinds simply call :func:`fit`.
    """

    def __init__(self, spec: RegressorSpec, X: np.ndarray, actions: np.ndarray | None = None,
                 num_actions: int | None = None):
        probe = DesignMatrix(X, np.zeros(len(X)), actions, num_actions)
        if len(probe) == 0:
            raise ValueError("cannot fit a regressor on empty data")
        self.spec = spec
        self.X, self.actions, self.num_actions = probe.X, probe.actions, probe.num_actions
        self._ridge = None
        if isinstance(spec, PolyRidge):
            groups = [np.arange(len(probe))] if self.actions is None else \
                [np.flatnonzero(self.actions == a) for a in range(self.num_actions)]
            self._ridge = [(idx, _ridge_operator(spec, self.X[idx])) if len(idx) else (idx, None)
                           for idx in groups]

    def fit(self, y: np.ndarray) -> FittedRegressor:
        y = np.asarray(y, dtype=float).reshape(-1)
        if self._ridge is None:
            return fit(self.spec, DesignMatrix(self.X, y, self.actions, self.num_actions))
        if not np.all(np.isfinite(y)):
            raise ValueError("targets must be finite")
        models = []
        for idx, op in self._ridge:
            if op is None:
                models.append(None)
                continue
            mean, scale, M, flagged = op
            models.append(FittedPolyRidge(self.spec, mean, scale, M @ y[idx], flagged))
        if self.actions is None:
            return models[0]
        return PerActionRegressor(self.spec, models)


def _ridge_operator(spec: PolyRidge, X: np.ndarray):
    F = build_features(X, spec.degree)[:, 1:]
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale[scale == 0] = 1.0
    Z = np.hstack([np.ones((F.shape[0], 1)), (F - mean) / scale])
    n, p = Z.shape
    if spec.penalty > 0:
        A = Z.T @ Z
        A[np.arange(1, p), np.arange(1, p)] += spec.penalty
        return mean, scale, np.linalg.solve(A, Z.T), False
    # minimum-norm least squares with lstsq's default cutoff
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    keep = s > np.finfo(float).eps * max(n, p) * s[0]
    M = Vt[keep].T @ (U[:, keep] / s[keep]).T
    return mean, scale, M, int(keep.sum()) < p


def select_prepared(prepared: Sequence[PreparedFit], y_train: np.ndarray, val: DesignMatrix,
                    ) -> tuple[RegressorSpec, FittedRegressor, list[tuple[RegressorSpec, float]]]:
    """:func:`select_regressor` over prepared fits sharing one set of training inputs."""
    if not prepared:
        raise ValueError("need at least one regressor spec")
    table: list[tuple[RegressorSpec, float]] = []
    best = None
    errors = []
    for prep in prepared:
        try:
            model = prep.fit(y_train)
            mse = validation_mse(model, val)
        except (np.linalg.LinAlgError, ValueError) as exc:
            errors.append(f"{prep.spec.label}: {exc}")
            table.append((prep.spec, math.inf))
            continue
        if not np.isfinite(mse):
            mse = math.inf
        table.append((prep.spec, mse))
        if best is None or mse < best[2]:
            best = (prep.spec, model, mse)
    if best is None:
        raise RegressionError("every regressor failed: " + "; ".join(errors))
    return best[0], best[1], table


def validation_mse(model: FittedRegressor, data: DesignMatrix) -> float:
    if len(data) == 0:
        raise ValueError("validation data is empty")
    pred = model.predict(data.X, data.actions)
    return float(np.mean((data.y - pred) ** 2))


def select_regressor(specs: Sequence[RegressorSpec], train: DesignMatrix, val: DesignMatrix,
                     ) -> tuple[RegressorSpec, FittedRegressor, list[tuple[RegressorSpec, float]]]:
    """Fit every spec on ``train`` and keep the lowest validation MSE.

    Ties go to the earliest spec. A spec whose fit raises is recorded with
    MSE ``inf``; if all of them fail, :class:`RegressionError` is raised.
    """
    if not specs:
        raise ValueError("need at least one regressor spec")
    table: list[tuple[RegressorSpec, float]] = []
    best = None
    errors = []
    for spec in specs:
        try:
            model = fit(spec, train)
            mse = validation_mse(model, val)
        except (np.linalg.LinAlgError, ValueError) as exc:
            errors.append(f"{spec.label}: {exc}")
            table.append((spec, math.inf))
            continue
        if not np.isfinite(mse):
            mse = math.inf
        table.append((spec, mse))
        if best is None or mse < best[2]:
            best = (spec, model, mse)
    if best is None:
        raise RegressionError("every regressor failed: " + "; ".join(errors))
    return best[0], best[1], table
