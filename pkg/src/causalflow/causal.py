"""Treatment-effect inference on top of trained arm models.

The conditional average treatment effect at x is the Monte Carlo
contrast E[Y | x, treated] - E[Y | x, control], each expectation taken
over draws from that arm's outcome ensemble. Query points must pass a
support gate (both arms' joint covariate flows above a log-density
threshold) before any effect is reported; the outreach-corrected effect
adds a constant dollar offset estimated from outreach-only communities.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import COVARIATES
from .errors import ConfigError, OutOfSupportError
from .flows import flow_from_dict, flow_to_dict
from .flows.io import dump_json, load_json

DEFAULT_SUPPORT_THRESHOLD = -10.0
DEFAULT_N_DRAWS = 10_000

# standard-error factor for a sample median under approximate normality
MEDIAN_SE_FACTOR = float(np.sqrt(np.pi / 2.0))

BUNDLE_FORMAT_VERSION = 1
_BUNDLE_FILES = (
    "q_treated.json",
    "q_control.json",
    "support_treated.json",
    "support_control.json",
)


@dataclass(frozen=True)
class SupportVerdict:
    log_q_treated: float
    log_q_control: float
    threshold: float
    in_support: bool


@dataclass
class CateEstimate:
    x: np.ndarray
    expected_treated: float
    expected_control: float
    cate: float
    cate_prime: float
    mc_se: float
    n_draws: int
    verdict: SupportVerdict
    support_overridden: bool = False


@dataclass
class OutreachResult:
    delta_y: float
    effects: np.ndarray  # observed y - E[Y | x, control], per used record
    median_se: float
    n_used: int
    n_excluded: int


@dataclass
class SweepPoint:
    value: float
    cate: float
    cate_prime: float
    mc_se: float
    in_support: bool
    skipped: bool
    log_q_treated: float = float("nan")
    log_q_control: float = float("nan")
    n_draws: int = 0


@dataclass
class CausalModel:
    """Everything needed to answer effect queries: one outcome ensemble
    and one joint covariate (support) flow per arm, the support
    threshold, and the outreach offset."""

    q_treated: object
    q_control: object
    support_treated: object
    support_control: object
    support_threshold: float = DEFAULT_SUPPORT_THRESHOLD
    delta_y: float = 0.0
    delta_y_source: str = "default"  # "default" | "user" | "estimated"
    metadata: dict = field(default_factory=dict)

    def with_delta_y(self, delta_y: float, source: str) -> "CausalModel":
        if source not in ("default", "user", "estimated"):
            raise ConfigError(f"unknown delta_y source {source!r}")
        return replace(self, delta_y=float(delta_y), delta_y_source=source)


def _as_matrix(x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != len(COVARIATES):
        raise ConfigError(
            f"expected {len(COVARIATES)} covariates per row, got {x.shape[1]}"
        )
    return x


def support_classify_rows(model: CausalModel, x) -> list[SupportVerdict]:
    x = _as_matrix(x)
    lt = model.support_treated.log_prob(x)
    lc = model.support_control.log_prob(x)
    thr = model.support_threshold
    return [
        SupportVerdict(
            log_q_treated=float(a), log_q_control=float(b), threshold=thr,
            in_support=bool(a > thr and b > thr),
        )
        for a, b in zip(lt, lc)
    ]


def support_classify(model: CausalModel, x) -> SupportVerdict:
    """A point is in support only if BOTH arms have seen its neighborhood."""
    return support_classify_rows(model, x)[0]


def percentile_threshold(support_flow, x_train, percentile: float = 1.0) -> float:
    """Data-driven gate: the given percentile of the flow's own training
    log-densities. Pooling both arms' values gives one shared threshold."""
    lp = support_flow.log_prob(_as_matrix(x_train))
    return float(np.percentile(lp, percentile))


def pooled_percentile_threshold(model: CausalModel, x_treated, x_control, percentile: float = 1.0) -> float:
    lp = np.concatenate(
        [
            model.support_treated.log_prob(_as_matrix(x_treated)),
            model.support_control.log_prob(_as_matrix(x_control)),
        ]
    )
    return float(np.percentile(lp, percentile))


def _cate_rows(model: CausalModel, x: np.ndarray, n_draws: int, rng: np.random.Generator):
    """Per-row expected outcomes and the MC standard error of their gap."""
    draws_t = model.q_treated.sample_rows(x, n_draws, rng)
    draws_c = model.q_control.sample_rows(x, n_draws, rng)
    mu_t = draws_t.mean(axis=1)
    mu_c = draws_c.mean(axis=1)
    se = np.sqrt(
        draws_t.var(axis=1, ddof=1) / n_draws + draws_c.var(axis=1, ddof=1) / n_draws
    )
    return mu_t, mu_c, se


def estimate_cate(
    model: CausalModel,
    x,
    n_draws: int = DEFAULT_N_DRAWS,
    rng=None,
    allow_out_of_support: bool = False,
) -> CateEstimate:
    """Monte Carlo effect estimate at a single covariate vector.

    Out-of-support points raise OutOfSupportError unless explicitly
    overridden; an override is recorded on the estimate.
    """
    if n_draws < 2:
        raise ConfigError("n_draws must be >= 2")
    rng = np.random.default_rng(rng)
    x = _as_matrix(x)
    if x.shape[0] != 1:
        raise ConfigError("estimate_cate takes one covariate vector; see cate_table")
    verdict = support_classify(model, x)
    if not verdict.in_support and not allow_out_of_support:
        raise OutOfSupportError(
            f"query point is outside the trained support "
            f"(log q_T = {verdict.log_q_treated:.2f}, "
            f"log q_C = {verdict.log_q_control:.2f}, "
            f"threshold = {verdict.threshold:.2f}); "
            "pass allow_out_of_support to override"
        )
    mu_t, mu_c, se = _cate_rows(model, x, n_draws, rng)
    cate = float(mu_t[0] - mu_c[0])
    return CateEstimate(
        x=x[0], expected_treated=float(mu_t[0]), expected_control=float(mu_c[0]),
        cate=cate, cate_prime=cate + model.delta_y, mc_se=float(se[0]),
        n_draws=n_draws, verdict=verdict,
        support_overridden=bool(not verdict.in_support),
    )


def cate_table(
    model: CausalModel,
    x,
    n_draws: int = DEFAULT_N_DRAWS,
    rng=None,
    allow_out_of_support: bool = False,
) -> list[CateEstimate]:
    """Batched effect estimates; out-of-support rows are estimated only
    under the override, otherwise they raise."""
    rng = np.random.default_rng(rng)
    x = _as_matrix(x)
    verdicts = support_classify_rows(model, x)
    bad = [i for i, v in enumerate(verdicts) if not v.in_support]
    if bad and not allow_out_of_support:
        raise OutOfSupportError(
            f"{len(bad)} of {x.shape[0]} rows outside the trained support "
            f"(first: row {bad[0]}); pass allow_out_of_support to override"
        )
    mu_t, mu_c, se = _cate_rows(model, x, n_draws, rng)
    out = []
    for i, v in enumerate(verdicts):
        cate = float(mu_t[i] - mu_c[i])
        out.append(
            CateEstimate(
                x=x[i], expected_treated=float(mu_t[i]), expected_control=float(mu_c[i]),
                cate=cate, cate_prime=cate + model.delta_y, mc_se=float(se[i]),
                n_draws=n_draws, verdict=v, support_overridden=bool(not v.in_support),
            )
        )
    return out


def estimate_outreach_correction(
    model: CausalModel,
    records,
    n_draws: int = 2_000,
    rng=None,
) -> OutreachResult:
    """Offset from outreach-only communities: the median over records of
    observed outcome minus the control-arm expectation at that record's
    covariates. Records outside the control arm's support are excluded.
    """
    rng = np.random.default_rng(rng)
    if not records:
        raise ConfigError("no outreach records supplied")
    x = np.stack([r.covariates() for r in records])
    y = np.array([r.claims_per_policy for r in records])
    lc = model.support_control.log_prob(x)
    keep = lc > model.support_threshold
    n_excluded = int((~keep).sum())
    if not keep.any():
        raise ConfigError("every outreach record fell outside the control support")
    draws = model.q_control.sample_rows(x[keep], n_draws, rng)
    effects = y[keep] - draws.mean(axis=1)
    n = effects.size
    if n > 1:
        median_se = MEDIAN_SE_FACTOR * float(np.std(effects, ddof=1)) / np.sqrt(n)
    else:
        median_se = float("nan")
    return OutreachResult(
        delta_y=float(np.median(effects)), effects=effects,
        median_se=median_se, n_used=n, n_excluded=n_excluded,
    )


def cate_sweep(
    model: CausalModel,
    base_x,
    axis: str | int,
    grid,
    n_draws: int = DEFAULT_N_DRAWS,
    rng=None,
    allow_out_of_support: bool = False,
) -> list[SweepPoint]:
    """Effect along one covariate axis, other coordinates held at base_x.

    Out-of-support grid points are skipped (NaN effect) rather than
    raising, so a sweep can cross the edge of the data.
    """
    rng = np.random.default_rng(rng)
    base = _as_matrix(base_x)[0]
    if isinstance(axis, str):
        if axis not in COVARIATES:
            raise ConfigError(f"unknown covariate {axis!r}")
        axis_idx = COVARIATES.index(axis)
    else:
        axis_idx = int(axis)
        if not 0 <= axis_idx < len(COVARIATES):
            raise ConfigError(f"covariate index {axis_idx} out of range")
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ConfigError("empty sweep grid")
    x = np.tile(base, (grid.size, 1))
    x[:, axis_idx] = grid
    verdicts = support_classify_rows(model, x)
    ok = np.array([v.in_support for v in verdicts]) | allow_out_of_support
    points = [
        SweepPoint(value=float(g), cate=float("nan"), cate_prime=float("nan"),
                   mc_se=float("nan"), in_support=v.in_support, skipped=True,
                   log_q_treated=v.log_q_treated, log_q_control=v.log_q_control)
        for g, v in zip(grid, verdicts)
    ]
    if ok.any():
        mu_t, mu_c, se = _cate_rows(model, x[ok], n_draws, rng)
        for j, i in enumerate(np.nonzero(ok)[0]):
            cate = float(mu_t[j] - mu_c[j])
            points[i] = SweepPoint(
                value=float(grid[i]), cate=cate, cate_prime=cate + model.delta_y,
                mc_se=float(se[j]), in_support=verdicts[i].in_support, skipped=False,
                log_q_treated=verdicts[i].log_q_treated,
                log_q_control=verdicts[i].log_q_control, n_draws=n_draws,
            )
    return points


def sweep_to_csv(points: list[SweepPoint], axis: str, path: str | Path) -> None:
    """Skipped grid points keep their row (blank effect, zero draws)."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "cate", "cate_prime", "se",
                    "n_t", "n_c", "log_q_t", "log_q_c", "in_support"])
        for p in points:
            w.writerow(
                [axis, f"{p.value:.6g}",
                 "" if np.isnan(p.cate) else f"{p.cate:.6f}",
                 "" if np.isnan(p.cate_prime) else f"{p.cate_prime:.6f}",
                 "" if np.isnan(p.mc_se) else f"{p.mc_se:.6f}",
                 p.n_draws, p.n_draws,
                 f"{p.log_q_treated:.6f}", f"{p.log_q_control:.6f}",
                 int(p.in_support)]
            )


def estimates_to_csv(estimates: list[CateEstimate], path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            list(COVARIATES)
            + ["expected_treated", "expected_control", "cate", "cate_prime",
               "mc_se", "n_draws", "in_support", "support_overridden"]
        )
        for e in estimates:
            w.writerow(
                [f"{v:.6g}" for v in e.x]
                + [f"{e.expected_treated:.6f}", f"{e.expected_control:.6f}",
                   f"{e.cate:.6f}", f"{e.cate_prime:.6f}", f"{e.mc_se:.6f}",
                   e.n_draws, int(e.verdict.in_support), int(e.support_overridden)]
            )


# --- bundle persistence: four flow files plus one manifest ---


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def schema_hash() -> str:
    """Hash of the covariate order and outcome name this package expects."""
    text = ",".join(COVARIATES) + ";claims_per_policy"
    return hashlib.sha256(text.encode()).hexdigest()


def save_model(model: CausalModel, outdir: str | Path) -> Path:
    """Writes the four flow files and a manifest holding the threshold,
    the outreach offset, the schema hash, and per-file content hashes.
    Nothing in the bundle depends on wall-clock time, so identical models
    produce byte-identical bundles."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    dump_json(flow_to_dict(model.q_treated), outdir / "q_treated.json")
    dump_json(flow_to_dict(model.q_control), outdir / "q_control.json")
    dump_json(flow_to_dict(model.support_treated), outdir / "support_treated.json")
    dump_json(flow_to_dict(model.support_control), outdir / "support_control.json")
    manifest = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "covariates": list(COVARIATES),
        "schema_hash": schema_hash(),
        "support_threshold": repr(float(model.support_threshold)),
        "delta_y": repr(float(model.delta_y)),
        "delta_y_source": model.delta_y_source,
        "metadata": model.metadata,
        "files": {name: _sha256(outdir / name) for name in _BUNDLE_FILES},
    }
    dump_json(manifest, outdir / "manifest.json")
    return outdir


def load_model(bundle_dir: str | Path) -> CausalModel:
    """Loads a bundle, verifying every file against the manifest."""
    bundle_dir = Path(bundle_dir)
    if not bundle_dir.is_dir():
        raise ConfigError(f"bundle directory not found: {bundle_dir}")
    manifest = load_json(bundle_dir / "manifest.json")
    if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise ConfigError(f"unsupported bundle format {manifest.get('format_version')!r}")
    if manifest.get("schema_hash") != schema_hash():
        raise ConfigError("bundle schema does not match this package")
    for name, want in manifest["files"].items():
        path = bundle_dir / name
        if not path.exists():
            raise ConfigError(f"bundle file missing: {name}")
        got = _sha256(path)
        if got != want:
            raise ConfigError(f"bundle file corrupt: {name} (hash mismatch)")
    return CausalModel(
        q_treated=flow_from_dict(load_json(bundle_dir / "q_treated.json")),
        q_control=flow_from_dict(load_json(bundle_dir / "q_control.json")),
        support_treated=flow_from_dict(load_json(bundle_dir / "support_treated.json")),
        support_control=flow_from_dict(load_json(bundle_dir / "support_control.json")),
        support_threshold=float(manifest["support_threshold"]),
        delta_y=float(manifest["delta_y"]),
        delta_y_source=manifest["delta_y_source"],
        metadata=manifest.get("metadata", {}),
    )
