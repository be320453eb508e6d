"""Community-level records: schema, CSV round trip, arm handling, and
the 3x3x3 typology grid used for reporting.

A record is one ZIP-code community: seven covariates, an insurance
outcome (average claims per policy, USD), the program flag, and an
optional outreach-only flag. Loading is forgiving per row (bad rows are
rejected with a reason and counted) but strict about the header.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

COVARIATES = (
    "precipitation_mm",
    "flood_risk",
    "median_income",
    "population",
    "renter_frac",
    "edu_frac",
    "diversity_frac",
)
OUTCOME = "claims_per_policy"
REQUIRED_COLUMNS = ("zip", "treated") + (OUTCOME,) + COVARIATES
OPTIONAL_COLUMNS = ("outreach_only",)

# inclusive numeric bounds per field; None means unbounded on that side
_RANGES = {
    "precipitation_mm": (0.0, None),
    "flood_risk": (0.0, 1.0),
    "median_income": (None, None),  # must be strictly positive, checked below
    "population": (None, None),
    "renter_frac": (0.0, 1.0),
    "edu_frac": (0.0, 1.0),
    "diversity_frac": (0.0, 1.0),
    OUTCOME: (0.0, None),
}
_STRICTLY_POSITIVE = ("median_income", "population")

# heavy-tailed covariates log-transformed before standardization
DEFAULT_LOG_COLUMNS = ("median_income", "population")


def log_column_indices(names: tuple[str, ...] = DEFAULT_LOG_COLUMNS) -> tuple[int, ...]:
    return tuple(COVARIATES.index(n) for n in names)


@dataclass(frozen=True)
class CommunityRecord:
    zip: str
    treated: bool
    claims_per_policy: float
    precipitation_mm: float
    flood_risk: float
    median_income: float
    population: float
    renter_frac: float
    edu_frac: float
    diversity_frac: float
    outreach_only: bool = False

    def covariates(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in COVARIATES])


@dataclass
class LoadResult:
    records: list[CommunityRecord]
    rejects: list[tuple[int, str, str]] = field(default_factory=list)  # (line, field, reason)


def _parse_bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true"):
        return True
    if v in ("0", "false"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_row(row: dict, line: int) -> CommunityRecord:
    zip_code = (row.get("zip") or "").strip()
    if not zip_code:
        raise _RowError("zip", "empty identifier")
    try:
        treated = _parse_bool(row["treated"])
    except ValueError as exc:
        raise _RowError("treated", str(exc))
    outreach = False
    if row.get("outreach_only", "").strip():
        try:
            outreach = _parse_bool(row["outreach_only"])
        except ValueError as exc:
            raise _RowError("outreach_only", str(exc))
    values = {}
    for name in COVARIATES + (OUTCOME,):
        raw = (row.get(name) or "").strip()
        if not raw:
            raise _RowError(name, "missing value")
        try:
            v = float(raw)
        except ValueError:
            raise _RowError(name, f"not a number: {raw!r}")
        if not np.isfinite(v):
            raise _RowError(name, "non-finite value")
        lo, hi = _RANGES[name]
        if lo is not None and v < lo:
            raise _RowError(name, f"{v} below {lo}")
        if hi is not None and v > hi:
            raise _RowError(name, f"{v} above {hi}")
        if name in _STRICTLY_POSITIVE and v <= 0:
            raise _RowError(name, f"{v} must be positive")
        values[name] = v
    return CommunityRecord(
        zip=zip_code, treated=treated, outreach_only=outreach,
        claims_per_policy=values[OUTCOME],
        **{name: values[name] for name in COVARIATES},
    )


class _RowError(Exception):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field_name = field_name
        self.reason = reason


def load_records(path: str | Path) -> LoadResult:
    """Header problems abort; value problems reject the row with a reason."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ConfigError(f"{path}: empty file")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ConfigError(f"{path}: missing required column(s) {missing}")
        result = LoadResult(records=[])
        for i, row in enumerate(reader):
            line = i + 2  # 1-based, after the header
            try:
                result.records.append(_parse_row(row, line))
            except _RowError as exc:
                result.rejects.append((line, exc.field_name, exc.reason))
    return result


def write_records(path: str | Path, records: list[CommunityRecord]) -> None:
    cols = list(REQUIRED_COLUMNS) + list(OPTIONAL_COLUMNS)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in records:
            w.writerow(
                [
                    r.zip,
                    int(r.treated),
                    repr(float(r.claims_per_policy)),
                ]
                + [repr(float(getattr(r, name))) for name in COVARIATES]
                + [int(r.outreach_only)]
            )


def split_arms(records: list[CommunityRecord]) -> tuple[list[CommunityRecord], list[CommunityRecord]]:
    treated = [r for r in records if r.treated]
    control = [r for r in records if not r.treated]
    return treated, control


def records_to_arrays(records: list[CommunityRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Returns (x (n, 7), y (n,)) in COVARIATES order."""
    if not records:
        return np.zeros((0, len(COVARIATES))), np.zeros(0)
    x = np.stack([r.covariates() for r in records])
    y = np.array([r.claims_per_policy for r in records])
    return x, y


# --- typologies: a 3x3x3 grid over income, population size, diversity ---

LEVEL_NAMES = ("low", "mid", "high")

DEFAULT_INCOME_ANCHORS = (40_000.0, 60_000.0, 90_000.0)
DEFAULT_POPULATION_ANCHORS = (2_500.0, 12_000.0, 30_000.0)
DEFAULT_DIVERSITY_ANCHORS = (0.05, 0.15, 0.40)


@dataclass(frozen=True)
class TypologySpec:
    """Anchor values and matching windows. Income and population match
    within a relative band; diversity within an absolute one."""

    income_anchors: tuple[float, float, float] = DEFAULT_INCOME_ANCHORS
    population_anchors: tuple[float, float, float] = DEFAULT_POPULATION_ANCHORS
    diversity_anchors: tuple[float, float, float] = DEFAULT_DIVERSITY_ANCHORS
    income_rel_band: float = 0.25
    population_rel_band: float = 0.25
    diversity_abs_band: float = 0.05

    def __post_init__(self):
        for anchors in (self.income_anchors, self.population_anchors, self.diversity_anchors):
            if len(anchors) != 3 or list(anchors) != sorted(anchors):
                raise ConfigError("typology anchors must be three ascending values")
        if self.income_rel_band <= 0 or self.population_rel_band <= 0 or self.diversity_abs_band <= 0:
            raise ConfigError("typology bands must be positive")

    @classmethod
    def from_percentiles(cls, records: list[CommunityRecord], percentiles=(16, 50, 84)) -> "TypologySpec":
        if not records:
            raise ConfigError("cannot derive typology anchors from zero records")
        x, _ = records_to_arrays(records)
        inc = x[:, COVARIATES.index("median_income")]
        pop = x[:, COVARIATES.index("population")]
        div = x[:, COVARIATES.index("diversity_frac")]
        return cls(
            income_anchors=tuple(float(np.percentile(inc, p)) for p in percentiles),
            population_anchors=tuple(float(np.percentile(pop, p)) for p in percentiles),
            diversity_anchors=tuple(float(np.percentile(div, p)) for p in percentiles),
        )


@dataclass
class Typology:
    income_level: str
    population_level: str
    diversity_level: str
    income_anchor: float
    population_anchor: float
    diversity_anchor: float
    matched_count: int
    fiducial: np.ndarray | None  # component-wise median of matched records

    @property
    def label(self) -> str:
        return f"income={self.income_level}|population={self.population_level}|diversity={self.diversity_level}"

    @property
    def supported(self) -> bool:
        return self.fiducial is not None


def build_typologies(records: list[CommunityRecord], spec: TypologySpec = TypologySpec()) -> list[Typology]:
    """All 27 anchor combinations, income outermost then population then
    diversity, each axis low->mid->high. Cells with no matched records
    get a None fiducial and are reported as unsupported."""
    x, _ = records_to_arrays(records)
    inc = x[:, COVARIATES.index("median_income")] if len(records) else np.zeros(0)
    pop = x[:, COVARIATES.index("population")] if len(records) else np.zeros(0)
    div = x[:, COVARIATES.index("diversity_frac")] if len(records) else np.zeros(0)
    out = []
    for li, a_inc in zip(LEVEL_NAMES, spec.income_anchors):
        m_inc = np.abs(inc - a_inc) <= spec.income_rel_band * a_inc
        for lp, a_pop in zip(LEVEL_NAMES, spec.population_anchors):
            m_pop = np.abs(pop - a_pop) <= spec.population_rel_band * a_pop
            for ld, a_div in zip(LEVEL_NAMES, spec.diversity_anchors):
                m = m_inc & m_pop & (np.abs(div - a_div) <= spec.diversity_abs_band)
                count = int(m.sum())
                fiducial = np.median(x[m], axis=0) if count else None
                out.append(
                    Typology(
                        income_level=li, population_level=lp, diversity_level=ld,
                        income_anchor=a_inc, population_anchor=a_pop,
                        diversity_anchor=a_div, matched_count=count,
                        fiducial=fiducial,
                    )
                )
    return out


def typologies_to_csv(typologies: list[Typology], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["label", "income_level", "population_level", "diversity_level",
             "income_anchor", "population_anchor", "diversity_anchor",
             "matched_count", "supported"]
            + [f"fiducial_{name}" for name in COVARIATES]
        )
        for t in typologies:
            fid = ["" for _ in COVARIATES] if t.fiducial is None else [f"{v:.6g}" for v in t.fiducial]
            w.writerow(
                [t.label, t.income_level, t.population_level, t.diversity_level,
                 f"{t.income_anchor:.6g}", f"{t.population_anchor:.6g}",
                 f"{t.diversity_anchor:.6g}", t.matched_count, int(t.supported)]
                + fid
            )
