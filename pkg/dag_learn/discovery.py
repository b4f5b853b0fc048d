# dag_learn/discovery.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg, stats
from sklearn.ensemble import RandomForestClassifier

from tabular.tables import RecordTable

from .dag import Edge

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForestParams:
    trees: int = 50
    max_depth: int = 8
    min_leaf: int = 5
    features_per_split: int | None = None  # None -> ceil(sqrt(p)) over one-hot columns
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise ValueError("Forest trees, max_depth and min_leaf must all be >= 1")


@dataclass(frozen=True)
class DiscoveryParams:
    top_m: int = 2
    ols_alpha: float = 0.01
    importance_factor: float = 2.0
    forest: ForestParams = field(default_factory=ForestParams)

    def __post_init__(self):
        if self.top_m < 1:
            raise ValueError(f"top_m must be >= 1, got {self.top_m}")
        if not 0 < self.ols_alpha <= 1:
            raise ValueError(f"ols_alpha must be in (0, 1], got {self.ols_alpha}")
        if self.importance_factor < 0:
            raise ValueError("importance_factor must be >= 0")


@dataclass(frozen=True)
class PredictorRank:
    predictor: str
    statistic: float
    p_value: float | None = None


# --------------------
# Encoding helpers
# --------------------

def _one_hot(codes: np.ndarray, cardinality: int, *, drop_first: bool) -> np.ndarray:
    block = np.eye(cardinality, dtype=float)[codes]
    return block[:, 1:] if drop_first else block


def _design(data: RecordTable, predictors: Sequence[str], *, drop_first: bool) -> tuple[np.ndarray, np.ndarray]:
    """(X, group) where group[j] is the predictor position owning column j."""
    blocks, groups = [], []
    for g, label in enumerate(predictors):
        attr = data.schema.get(label)
        block = _one_hot(data.column(label), attr.cardinality, drop_first=drop_first)
        blocks.append(block)
        groups.append(np.full(block.shape[1], g, dtype=np.int64))
    if not blocks:
        return np.zeros((len(data), 0)), np.zeros(0, dtype=np.int64)
    return np.hstack(blocks), np.concatenate(groups)


def _targets(data: RecordTable, targets: Sequence[str] | None) -> tuple[str, ...]:
    labels = data.labels
    if targets is None:
        return labels
    for t in targets:
        data.schema.index(t)
    return tuple(targets)


def _rank(stats_by_predictor: list[PredictorRank], top_m: int) -> list[PredictorRank]:
    # Stable sort keeps column order among equal statistics.
    return sorted(stats_by_predictor, key=lambda r: -r.statistic)[:top_m]


# --------------------
# OLS + partial F-test
# --------------------

def _independent_columns(X: np.ndarray, names: list[str], target: str) -> np.ndarray:
    """Column indices of a full-rank subset of X, found by pivoted QR."""
    if X.shape[1] == 0:
        return np.zeros(0, dtype=np.int64)
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int((diag > tol).sum())
    keep = np.sort(piv[:rank])
    if rank < X.shape[1]:
        dropped = sorted({names[j] for j in piv[rank:]})
        logger.warning(
            "OLS design for %s is rank deficient; dropped %s collinear column(s) from %s",
            target, X.shape[1] - rank, dropped,
        )
    return keep


def _rss(X: np.ndarray, Y: np.ndarray) -> float:
    coef, *_ = np.linalg.lstsq(X, Y, rcond=None)
    resid = Y - X @ coef
    return float(np.einsum("ij,ij->", resid, resid))


def rank_predictors_ols(data: RecordTable, target: str) -> list[PredictorRank]:
    """
    Partial F statistic per predictor for the model target-indicators ~ one-hot(others).

    Each predictor's level-group is tested jointly against the full model, pooling
    residual sums of squares over the target's indicator columns.
    """
    predictors = [lb for lb in data.labels if lb != target]
    attr = data.schema.get(target)
    Y = _one_hot(data.column(target), attr.cardinality, drop_first=True)
    observed = Y.any(axis=0)
    Y = Y[:, observed]
    if Y.shape[1] == 0 or not predictors:
        return []

    X_raw, group = _design(data, predictors, drop_first=True)
    seen = X_raw.any(axis=0)
    X_raw, group = X_raw[:, seen], group[seen]
    X = np.hstack([np.ones((len(data), 1)), X_raw])
    group = np.concatenate([[-1], group])
    names = ["(intercept)"] + [predictors[g] for g in group[1:]]

    keep = _independent_columns(X, names, target)
    X, group = X[:, keep], group[keep]

    n, p = X.shape
    m_y = Y.shape[1]
    df_resid = n - p
    if df_resid <= 0:
        logger.warning("OLS for %s has no residual degrees of freedom (n=%s, p=%s); skipped", target, n, p)
        return []

    rss_full = _rss(X, Y)
    out = []
    for g, label in enumerate(predictors):
        cols = group == g
        d = int(cols.sum())
        if d == 0:
            out.append(PredictorRank(label, 0.0, 1.0))
            continue
        rss_red = _rss(X[:, ~cols], Y)
        num = max(rss_red - rss_full, 0.0) / (d * m_y)
        den = rss_full / (df_resid * m_y)
        if den <= 1e-12:
            f_stat = math.inf if num > 1e-12 else 0.0
        else:
            f_stat = num / den
        p_value = float(stats.f.sf(f_stat, d * m_y, df_resid * m_y)) if math.isfinite(f_stat) else 0.0
        out.append(PredictorRank(label, float(f_stat), p_value))
    return out


def discover_edges_ols(data: RecordTable, targets: Sequence[str] | None = None, top_m: int = 2, *,
                       alpha: float = 0.01) -> frozenset[Edge]:
    """Edges predictor -> target for the top_m predictors by F statistic with p < alpha."""
    if top_m < 1:
        raise ValueError(f"top_m must be >= 1, got {top_m}")
    edges: set[Edge] = set()
    for target in _targets(data, targets):
        ranked = [r for r in rank_predictors_ols(data, target) if r.p_value is not None and r.p_value < alpha]
        for r in _rank(ranked, top_m):
            edges.add((r.predictor, target))
    logger.info("OLS discovery found %s edge(s)", len(edges))
    return frozenset(edges)


# --------------------
# Random forest importance
# --------------------

def rank_predictors_rf(data: RecordTable, target: str, params: ForestParams | None = None) -> list[PredictorRank] | None:
    """Summed Gini importance per predictor (shares sum to 1), or None for a single-level target."""
    params = params or ForestParams()
    y = data.column(target)
    if np.unique(y).size < 2:
        logger.warning("Random forest target %s has a single observed level; skipped", target)
        return None

    predictors = [lb for lb in data.labels if lb != target]
    if not predictors:
        return []
    X, group = _design(data, predictors, drop_first=False)
    max_features = params.features_per_split or math.ceil(math.sqrt(X.shape[1]))

    forest = RandomForestClassifier(
        n_estimators=params.trees,
        criterion="gini",
        max_depth=params.max_depth,
        min_samples_leaf=params.min_leaf,
        max_features=min(int(max_features), X.shape[1]),
        bootstrap=params.bootstrap,
        random_state=params.seed,
        n_jobs=1,
    )
    forest.fit(X, y)
    importance = np.bincount(group, weights=forest.feature_importances_, minlength=len(predictors))
    return [PredictorRank(label, float(importance[g])) for g, label in enumerate(predictors)]


def discover_edges_rf(data: RecordTable, targets: Sequence[str] | None = None, top_m: int = 2,
                      params: ForestParams | None = None, *, importance_factor: float = 2.0) -> frozenset[Edge]:
    """
    Edges predictor -> target for the top_m predictors by forest importance whose share
    is at least importance_factor times the uniform share 1/m.
    """
    if top_m < 1:
        raise ValueError(f"top_m must be >= 1, got {top_m}")
    edges: set[Edge] = set()
    for target in _targets(data, targets):
        ranked = rank_predictors_rf(data, target, params)
        if not ranked:
            continue
        floor = min(importance_factor / len(ranked), 1.0) - 1e-12
        kept = [r for r in ranked if r.statistic > 0 and r.statistic >= floor]
        for r in _rank(kept, top_m):
            edges.add((r.predictor, target))
    logger.info("Random forest discovery found %s edge(s)", len(edges))
    return frozenset(edges)
