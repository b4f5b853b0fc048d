# tabular/schema.py
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from core.exceptions import PopSynthError


HOUSEHOLD = "household"
PERSON = "person"
LEVEL_CHOICES = (HOUSEHOLD, PERSON)


class SchemaError(PopSynthError):
    pass


class RangeError(PopSynthError):
    pass


class LevelError(PopSynthError):
    pass


@dataclass(frozen=True)
class AttributeSpec:
    """
    One attribute of the microdata.

    Categorical attributes carry `levels`; continuous ones carry `bin_edges` and are
    binned at ingestion, so every downstream cell is a category index either way.
    """

    label: str
    level: str = PERSON
    levels: tuple[str, ...] | None = None
    bin_edges: tuple[float, ...] | None = None
    is_conditional: bool = False

    def __post_init__(self):
        if not self.label or not str(self.label).strip():
            raise SchemaError("Attribute label must be non-empty.")
        if self.level not in LEVEL_CHOICES:
            raise SchemaError(f"{self.label}: level must be one of {LEVEL_CHOICES}, got {self.level!r}")

        if (self.levels is None) == (self.bin_edges is None):
            raise SchemaError(f"{self.label}: declare exactly one of levels or bin_edges.")

        if self.levels is not None:
            levels = tuple(str(v) for v in self.levels)
            if not levels:
                raise SchemaError(f"{self.label}: categorical attribute needs at least one level.")
            if any(not v.strip() for v in levels):
                raise SchemaError(f"{self.label}: empty level name.")
            if len(set(levels)) != len(levels):
                raise SchemaError(f"{self.label}: duplicate levels in {levels}.")
            object.__setattr__(self, "levels", levels)
        else:
            edges = tuple(float(e) for e in self.bin_edges)
            if len(edges) < 2:
                raise SchemaError(f"{self.label}: need at least two bin edges.")
            if any(b <= a for a, b in zip(edges, edges[1:])):
                raise SchemaError(f"{self.label}: bin edges must be strictly increasing, got {edges}.")
            object.__setattr__(self, "bin_edges", edges)

    # -------------------------------------------------------------------------
    # Kind
    # -------------------------------------------------------------------------
    @property
    def kind(self) -> str:
        return "categorical" if self.levels is not None else "continuous"

    @property
    def is_continuous(self) -> bool:
        return self.bin_edges is not None

    @property
    def min(self) -> float | None:
        return self.bin_edges[0] if self.bin_edges else None

    @property
    def max(self) -> float | None:
        return self.bin_edges[-1] if self.bin_edges else None

    @property
    def cardinality(self) -> int:
        if self.levels is not None:
            return len(self.levels)
        return len(self.bin_edges) - 1

    @property
    def categories(self) -> tuple[str, ...]:
        """Display names of the category indices (bin labels for continuous attributes)."""
        if self.levels is not None:
            return self.levels
        edges = self.bin_edges
        out = []
        for i, (lo, hi) in enumerate(zip(edges, edges[1:])):
            closing = "]" if i == len(edges) - 2 else ")"
            out.append(f"[{_fmt(lo)},{_fmt(hi)}{closing}")
        return tuple(out)

    def code_of(self, category: str) -> int:
        cats = self.categories
        try:
            return cats.index(str(category))
        except ValueError:
            raise LevelError(f"{self.label}: unknown level {category!r}; expected one of {list(cats)}")

    def relabel(self, label: str) -> "AttributeSpec":
        return replace(self, label=label)

    def to_dict(self) -> dict:
        out = {"label": self.label, "level": self.level}
        if self.levels is not None:
            out["levels"] = list(self.levels)
        else:
            out["bin_edges"] = list(self.bin_edges)
        if self.is_conditional:
            out["is_conditional"] = True
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributeSpec":
        levels = data.get("levels")
        edges = data.get("bin_edges")
        return cls(
            label=str(data.get("label") or "").strip(),
            level=str(data.get("level") or PERSON).strip().lower(),
            levels=tuple(levels) if levels is not None else None,
            bin_edges=tuple(edges) if edges is not None else None,
            is_conditional=bool(data.get("is_conditional", False)),
        )


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


@dataclass(frozen=True)
class Schema:
    attributes: tuple[AttributeSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        attrs = tuple(self.attributes)
        labels = [a.label for a in attrs]
        if len(set(labels)) != len(labels):
            dupes = sorted({x for x in labels if labels.count(x) > 1})
            raise SchemaError(f"Duplicate attribute labels: {dupes}")
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "_index", {a.label: i for i, a in enumerate(attrs)})

    def __len__(self) -> int:
        return len(self.attributes)

    def __iter__(self):
        return iter(self.attributes)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(a.label for a in self.attributes)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(a.cardinality for a in self.attributes)

    @property
    def household_attributes(self) -> tuple[AttributeSpec, ...]:
        return tuple(a for a in self.attributes if a.level == HOUSEHOLD)

    @property
    def person_attributes(self) -> tuple[AttributeSpec, ...]:
        return tuple(a for a in self.attributes if a.level == PERSON)

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise SchemaError(f"Unknown attribute {label!r}; schema has {list(self.labels)}")

    def get(self, label: str) -> AttributeSpec:
        return self.attributes[self.index(label)]

    def indices(self, labels: Iterable[str]) -> list[int]:
        return [self.index(lb) for lb in labels]

    def subset(self, labels: Sequence[str]) -> "Schema":
        return Schema(tuple(self.get(lb) for lb in labels))

    def by_level(self, level: str) -> "Schema":
        return Schema(tuple(a for a in self.attributes if a.level == level))

    def with_conditional(self, labels: Iterable[str]) -> "Schema":
        """Mark the given labels as conditional (generation roots); everything else is cleared."""
        wanted = set(labels)
        missing = wanted - set(self.labels)
        if missing:
            raise SchemaError(f"Conditional labels not in schema: {sorted(missing)}")
        return Schema(tuple(replace(a, is_conditional=a.label in wanted) for a in self.attributes))

    def require_composable(self) -> None:
        if not self.household_attributes:
            raise SchemaError("Schema needs at least one household-level attribute.")
        if not self.person_attributes:
            raise SchemaError("Schema needs at least one person-level attribute for composition.")

    def to_list(self) -> list[dict]:
        return [a.to_dict() for a in self.attributes]

    @classmethod
    def from_list(cls, items: Iterable[Mapping]) -> "Schema":
        return cls(tuple(AttributeSpec.from_dict(x) for x in items))
