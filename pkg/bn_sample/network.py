# bn_sample/network.py
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from core.exceptions import PopSynthError
from dag_learn.dag import Dag
from dag_learn.scoring import encode_configs, family_counts
from tabular.schema import Schema, SchemaError
from tabular.tables import RecordTable

logger = logging.getLogger(__name__)

MODEL_FORMAT = "popsynth.bayesnet"
MODEL_VERSION = 1
PROB_TOL = 1e-9


class ModelFormatError(PopSynthError):
    pass


@dataclass(frozen=True)
class Cpt:
    """
    P(node | parents) stored sparsely: one probability vector per observed parent
    configuration, the uniform vector for every other configuration.
    """

    node: str
    parents: tuple[str, ...]
    cardinality: int
    parent_cardinalities: tuple[int, ...]
    table: Mapping[tuple[int, ...], np.ndarray]

    def __post_init__(self):
        parents = tuple(self.parents)
        pcards = tuple(int(c) for c in self.parent_cardinalities)
        if len(parents) != len(pcards):
            raise ValueError(f"{self.node}: {len(parents)} parents but {len(pcards)} parent cardinalities")
        table = {}
        for config, vec in dict(self.table).items():
            config = tuple(int(c) for c in config)
            if len(config) != len(parents) or any(c < 0 or c >= r for c, r in zip(config, pcards)):
                raise ValueError(f"{self.node}: parent configuration {config} does not fit {parents}")
            vec = np.asarray(vec, dtype=float)
            if vec.shape != (self.cardinality,):
                raise ValueError(f"{self.node}: probability vector of shape {vec.shape}, expected ({self.cardinality},)")
            if (vec < 0).any() or abs(math.fsum(vec) - 1.0) > PROB_TOL:
                raise ValueError(f"{self.node}: row for {config} is not a distribution")
            vec.setflags(write=False)
            table[config] = vec
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "parent_cardinalities", pcards)
        object.__setattr__(self, "table", table)

    @property
    def uniform(self) -> np.ndarray:
        return np.full(self.cardinality, 1.0 / self.cardinality)

    def distribution(self, config: Sequence[int] = ()) -> np.ndarray:
        vec = self.table.get(tuple(int(c) for c in config))
        return self.uniform if vec is None else vec

    @cached_property
    def _lookup(self) -> tuple[np.ndarray, np.ndarray]:
        configs = sorted(self.table)
        if not configs:
            return np.zeros(0, dtype=np.int64), np.zeros((0, self.cardinality))
        keys = encode_configs(
            np.asarray(configs, dtype=np.int64).reshape(len(configs), len(self.parents)), self.parent_cardinalities
        )
        probs = np.vstack([self.table[c] for c in configs])
        order = np.argsort(keys)
        return keys[order], probs[order]

    def probabilities(self, parent_codes: np.ndarray) -> np.ndarray:
        """(n, r) matrix of P(node | parents) for each row of parent codes."""
        parent_codes = np.asarray(parent_codes, dtype=np.int64)
        if parent_codes.ndim != 2 or parent_codes.shape[1] != len(self.parents):
            raise ValueError(f"{self.node}: expected an (n, {len(self.parents)}) parent code array")
        n = parent_codes.shape[0]
        keys, probs = self._lookup
        out = np.tile(self.uniform, (n, 1))
        if keys.size == 0 or n == 0:
            return out
        wanted = encode_configs(parent_codes, self.parent_cardinalities)
        pos = np.minimum(np.searchsorted(keys, wanted), keys.size - 1)
        hit = keys[pos] == wanted
        out[hit] = probs[pos[hit]]
        return out


@dataclass(frozen=True)
class BayesNet:
    """A DAG over a schema plus one Cpt per node, fitted with additive smoothing `alpha`."""

    schema: Schema
    dag: Dag
    cpts: Mapping[str, Cpt]
    alpha: float

    def __post_init__(self):
        if set(self.dag.nodes) != set(self.schema.labels):
            raise SchemaError(f"DAG nodes {sorted(self.dag.nodes)} differ from schema labels {sorted(self.schema.labels)}")
        missing = [v for v in self.dag.nodes if v not in self.cpts]
        if missing:
            raise ValueError(f"No CPT for nodes {missing}")
        for v in self.dag.nodes:
            cpt = self.cpts[v]
            if cpt.parents != self.dag.parents(v):
                raise ValueError(f"{v}: CPT parents {cpt.parents} do not match DAG parents {self.dag.parents(v)}")
            if cpt.cardinality != self.schema.get(v).cardinality:
                raise ValueError(f"{v}: CPT has {cpt.cardinality} levels, schema has {self.schema.get(v).cardinality}")
        object.__setattr__(self, "cpts", dict(self.cpts))

    @property
    def nodes(self) -> tuple[str, ...]:
        return self.schema.labels

    # -------------------------------------------------------------------------
    # JSON
    # -------------------------------------------------------------------------
    def to_dict(self) -> dict:
        cpts = {}
        for v in self.schema.labels:
            cpt = self.cpts[v]
            cpts[v] = {
                "parents": list(cpt.parents),
                "table": [
                    {"config": list(config), "p": [float(x) for x in cpt.table[config]]}
                    for config in sorted(cpt.table)
                ],
            }
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "alpha": self.alpha,
            "schema": self.schema.to_list(),
            "edges": [list(e) for e in self.dag.sorted_edges()],
            "cpts": cpts,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "BayesNet":
        if data.get("format") != MODEL_FORMAT:
            raise ModelFormatError(f"Not a {MODEL_FORMAT} document (format={data.get('format')!r})")
        if data.get("version") != MODEL_VERSION:
            raise ModelFormatError(f"Unsupported model version {data.get('version')!r}; expected {MODEL_VERSION}")
        schema = Schema.from_list(data["schema"])
        dag = Dag(schema.labels, frozenset(tuple(e) for e in data["edges"]))
        cpts = {}
        for v, body in data["cpts"].items():
            parents = tuple(body["parents"])
            cpts[v] = Cpt(
                node=v,
                parents=parents,
                cardinality=schema.get(v).cardinality,
                parent_cardinalities=tuple(schema.get(p).cardinality for p in parents),
                table={tuple(row["config"]): np.asarray(row["p"], dtype=float) for row in body["table"]},
            )
        return cls(schema, dag, cpts, float(data["alpha"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "BayesNet":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ModelFormatError(f"{path}: invalid JSON ({e})")
        return cls.from_dict(data)


# --------------------
# Fitting and likelihood
# --------------------

def _require_columns(dag: Dag, data: RecordTable) -> None:
    if set(dag.nodes) != set(data.labels):
        raise SchemaError(f"DAG nodes {sorted(dag.nodes)} differ from data columns {sorted(data.labels)}")


def fit_cpt(node: str, parents: Sequence[str], data: RecordTable, alpha: float) -> Cpt:
    schema = data.schema
    r = schema.get(node).cardinality
    pcards = tuple(schema.get(p).cardinality for p in parents)
    q = math.prod(pcards)

    configs = encode_configs(data.codes[:, schema.indices(parents)], pcards)
    keys, counts = family_counts(data.column(node), r, configs, q)

    table = {}
    if keys.size:
        config_keys, inverse = np.unique(keys // r, return_inverse=True)
        joint = np.zeros((config_keys.size, r))
        np.add.at(joint, (inverse, keys % r), counts)
        probs = (joint + alpha) / (joint.sum(axis=1, keepdims=True) + alpha * r)
        decoded = np.unravel_index(config_keys, pcards) if parents else ()
        for i in range(config_keys.size):
            config = tuple(int(d[i]) for d in decoded)
            table[config] = probs[i]
    return Cpt(node, tuple(parents), r, pcards, table)


def fit_cpts(dag: Dag, data: RecordTable, alpha: float = 1.0) -> BayesNet:
    """
    P(v = l | c) = (count(v = l, c) + alpha) / (count(c) + alpha * r_v) for every observed
    parent configuration c; unobserved configurations fall back to the uniform vector.
    """
    if not alpha > 0:
        raise ValueError(f"Smoothing alpha must be > 0, got {alpha}")
    _require_columns(dag, data)
    data = data.select(dag.nodes)
    cpts = {v: fit_cpt(v, dag.parents(v), data, alpha) for v in dag.nodes}
    return BayesNet(data.schema, dag, cpts, float(alpha))


def node_log_likelihood(net: BayesNet, node: str, data: RecordTable) -> float:
    cpt = net.cpts[node]
    parent_codes = data.codes[:, data.schema.indices(cpt.parents)]
    probs = cpt.probabilities(parent_codes)
    picked = probs[np.arange(len(data)), data.column(node)]
    with np.errstate(divide="ignore"):
        return float(np.log(picked).sum())


def log_likelihood(net: BayesNet, data: RecordTable) -> float:
    """sum over rows and nodes of ln P(node value | parent values)."""
    _require_columns(net.dag, data)
    return math.fsum(node_log_likelihood(net, v, data) for v in net.dag.nodes)
