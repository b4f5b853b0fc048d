# dag_learn/scoring.py
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np
from scipy.special import xlogy

from core.exceptions import PopSynthError
from tabular.tables import EmptyTableError, RecordTable

from .dag import Dag


DEFAULT_PARENT_CONFIG_CAP = 1_000_000
_DENSE_LIMIT = 1 << 22


class ComplexityError(PopSynthError):
    pass


def encode_configs(codes: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    """Mixed-radix index of each row's configuration (first column most significant)."""
    n = codes.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for j, r in enumerate(cards):
        out = out * int(r) + codes[:, j]
    return out


def family_counts(child: np.ndarray, r: int, configs: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Non-zero (config, child) joint counts as (keys, counts) with key = config*r + child.
    Keys come back sorted.
    """
    keys = configs * r + child
    if q * r <= _DENSE_LIMIT:
        dense = np.bincount(keys, minlength=q * r)
        nz = np.flatnonzero(dense)
        return nz, dense[nz]
    uniq, counts = np.unique(keys, return_counts=True)
    return uniq, counts


class AicScorer:
    """
    Decomposable AIC under the LL - K convention (higher is better):
    per node, LL = sum n_jc ln(n_jc / n_c) at the MLE and K = (r - 1) * q.

    Local scores are cached per (node, parent set).
    """

    def __init__(self, data: RecordTable, *, parent_config_cap: int | None = None):
        if len(data) == 0:
            raise EmptyTableError("Cannot score a DAG on an empty table")
        self.data = data
        self.labels = data.schema.labels
        self.cards = dict(zip(self.labels, data.schema.cardinalities))
        self._pos = {lb: i for i, lb in enumerate(self.labels)}
        self.parent_config_cap = parent_config_cap or DEFAULT_PARENT_CONFIG_CAP
        self._cache: dict[tuple[str, frozenset], tuple[float, int]] = {}

    def _ordered(self, parents: Iterable[str]) -> tuple[str, ...]:
        return tuple(sorted(set(parents), key=self._pos.__getitem__))

    def parent_configurations(self, parents: Iterable[str]) -> int:
        return math.prod(self.cards[p] for p in parents)

    def check_complexity(self, node: str, parents: Iterable[str]) -> None:
        q = self.parent_configurations(parents)
        if q > self.parent_config_cap:
            raise ComplexityError(
                f"{node}: {q} parent configurations exceed the cap of {self.parent_config_cap}"
            )

    def _family(self, node: str, parents: Iterable[str]) -> tuple[float, int]:
        parents = self._ordered(parents)
        key = (node, frozenset(parents))
        hit = self._cache.get(key)
        if hit is not None:
            return hit

        self.check_complexity(node, parents)
        r = self.cards[node]
        q = self.parent_configurations(parents)
        codes = self.data.codes
        configs = encode_configs(codes[:, [self._pos[p] for p in parents]], [self.cards[p] for p in parents])
        joint_keys, joint = family_counts(codes[:, self._pos[node]], r, configs, q)

        parent_keys = joint_keys // r
        if q <= _DENSE_LIMIT:
            parent_totals = np.bincount(parent_keys, weights=joint)
        else:
            _, inverse = np.unique(parent_keys, return_inverse=True)
            parent_totals = np.bincount(inverse, weights=joint)

        ll = float(xlogy(joint, joint).sum() - xlogy(parent_totals, parent_totals).sum())
        out = (ll, (r - 1) * q)
        self._cache[key] = out
        return out

    def local_log_likelihood(self, node: str, parents: Iterable[str]) -> float:
        return self._family(node, parents)[0]

    def local_parameters(self, node: str, parents: Iterable[str]) -> int:
        return self._family(node, parents)[1]

    def local_score(self, node: str, parents: Iterable[str]) -> float:
        ll, k = self._family(node, parents)
        return ll - k

    def log_likelihood(self, dag: Dag) -> float:
        return math.fsum(self.local_log_likelihood(v, dag.parents(v)) for v in dag.nodes)

    def parameter_count(self, dag: Dag) -> int:
        return sum(self.local_parameters(v, dag.parents(v)) for v in dag.nodes)

    def score(self, dag: Dag) -> float:
        self.require_columns(dag)
        return math.fsum(self.local_score(v, dag.parents(v)) for v in dag.nodes)

    def require_columns(self, dag: Dag) -> None:
        if set(dag.nodes) != set(self.labels):
            raise ValueError(
                f"DAG nodes {sorted(dag.nodes)} do not match data columns {sorted(self.labels)}"
            )


def parameter_count(dag: Dag, cardinalities: dict[str, int]) -> int:
    """K = sum_v (r_v - 1) * q_v."""
    return sum(
        (cardinalities[v] - 1) * math.prod(cardinalities[p] for p in dag.parents(v))
        for v in dag.nodes
    )


def aic_score(dag: Dag, data: RecordTable, *, parent_config_cap: int | None = None) -> float:
    return AicScorer(data, parent_config_cap=parent_config_cap).score(dag)
