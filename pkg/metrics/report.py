# metrics/report.py
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

JSD_MAX = math.sqrt(math.log(2.0))
REPORT_VERSION = 1


@dataclass(frozen=True)
class ComparisonEntry:
    """Closeness of one population to a reference over a set of axes."""

    name: str
    axes: tuple[str, ...]
    srmse: float
    jsd: float
    r_squared: float | None
    cell_count: int
    population: str = "synthetic"
    reference: str = "census"

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(self.axes))
        if self.srmse < 0:
            raise ValueError(f"{self.name}: srmse must be >= 0, got {self.srmse}")
        if not -1e-12 <= self.jsd <= JSD_MAX + 1e-12:
            raise ValueError(f"{self.name}: jsd {self.jsd} outside [0, sqrt(ln 2)]")
        if self.r_squared is not None and self.r_squared > 1 + 1e-12:
            raise ValueError(f"{self.name}: r_squared {self.r_squared} above 1")


@dataclass(frozen=True)
class DiversityEntry:
    attributes: tuple[str, ...]
    entropy: float
    group_count: int
    level: str = "household"
    population: str = "synthetic"
    reference_entropy: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))

    @property
    def delta(self) -> float | None:
        """Relative entropy change against the reference, (E - E_ref) / E_ref."""
        if self.reference_entropy is None or self.reference_entropy <= 0:
            return None
        return (self.entropy - self.reference_entropy) / self.reference_entropy

    def to_dict(self) -> dict:
        out = asdict(self)
        out["delta"] = self.delta
        return out


@dataclass(frozen=True)
class SamplingZeroEntry:
    """Combinations present in the truth but absent from the sample, and how many came back."""

    attributes: tuple[str, ...]
    level: str
    truth_only: int
    recovered: int
    population: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not 0 <= self.recovered <= self.truth_only:
            raise ValueError(f"recovered={self.recovered} must lie in [0, {self.truth_only}]")


@dataclass
class MetricsReport:
    populations: dict[str, dict[str, int]] = field(default_factory=dict)
    comparisons: list[ComparisonEntry] = field(default_factory=list)
    diversity: list[DiversityEntry] = field(default_factory=list)
    associations: list[ComparisonEntry] = field(default_factory=list)
    sampling_zeros: list[SamplingZeroEntry] = field(default_factory=list)

    def comparison(self, name: str, population: str = "synthetic") -> ComparisonEntry:
        for entry in self.comparisons:
            if entry.name == name and entry.population == population:
                return entry
        raise KeyError(f"No comparison {name!r} for population {population!r}")

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "populations": self.populations,
            "comparisons": [asdict(e) for e in self.comparisons],
            "diversity": [e.to_dict() for e in self.diversity],
            "associations": [asdict(e) for e in self.associations],
            "sampling_zeros": [asdict(e) for e in self.sampling_zeros],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        def entries(kind, items):
            out = []
            for item in items:
                item = dict(item)
                item.pop("delta", None)
                out.append(kind(**item))
            return out

        return cls(
            populations={k: dict(v) for k, v in (data.get("populations") or {}).items()},
            comparisons=entries(ComparisonEntry, data.get("comparisons") or []),
            diversity=entries(DiversityEntry, data.get("diversity") or []),
            associations=entries(ComparisonEntry, data.get("associations") or []),
            sampling_zeros=entries(SamplingZeroEntry, data.get("sampling_zeros") or []),
        )

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
