"""Maximum-likelihood training: splits, early stopping, random
hyperparameter search, and top-k ensembling.

One arm's outcome model is the product of a random search over flow
architectures; the five best-by-validation flows form an equal-weight
ensemble. Joint covariate flows for the support gate go through the
same machinery with `kind="density"`.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, TrainingAbort
from .flows import (
    ConditionalFlow,
    DensityFlow,
    FlowEnsemble,
    OutcomeTransform,
    Standardizer,
    flow_from_dict,
    flow_to_dict,
)
from .flows.models import ENSEMBLE_SIZE
from .numerics import AdamState, adam_step

# independent seed streams so adding trials never perturbs earlier ones
_ARCH_STREAM = 101
_TRIAL_STREAM = 202


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        f = self.fractions
        if len(f) != 3 or any(v < 0 for v in f):
            raise ConfigError("split fractions must be three non-negative values")
        if abs(sum(f) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(f)}")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if n < 10:
        raise ConfigError(f"need at least 10 records to split, got {n}")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    c1 = int(n * spec.fractions[0])
    c2 = int(n * (spec.fractions[0] + spec.fractions[1]))
    return perm[:c1], perm[c1:c2], perm[c2:]


def split(items, spec: SplitSpec = SplitSpec()):
    """Shuffled train/val/test partition of any indexable sequence."""
    tr, va, te = split_indices(len(items), spec)
    if isinstance(items, np.ndarray):
        return items[tr], items[va], items[te]
    return (
        [items[i] for i in tr],
        [items[i] for i in va],
        [items[i] for i in te],
    )


@dataclass(frozen=True)
class FlowArch:
    """One sampled architecture. `depth` counts conditioner hidden layers;
    `n_bins` only applies to conditional (spline) flows."""

    kind: str
    hidden_width: int
    depth: int
    n_transforms: int
    n_bins: int
    learning_rate: float

    def __post_init__(self):
        if self.kind not in ("conditional", "density"):
            raise ConfigError(f"unknown flow kind {self.kind!r}")
        if min(self.hidden_width, self.depth, self.n_transforms) < 1:
            raise ConfigError("architecture sizes must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden_width": self.hidden_width,
            "depth": self.depth,
            "n_transforms": self.n_transforms,
            "n_bins": self.n_bins,
            "learning_rate": repr(float(self.learning_rate)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FlowArch":
        return cls(
            kind=d["kind"],
            hidden_width=int(d["hidden_width"]),
            depth=int(d["depth"]),
            n_transforms=int(d["n_transforms"]),
            n_bins=int(d["n_bins"]),
            learning_rate=float(d["learning_rate"]),
        )


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 300
    patience: int = 20
    n_trials: int = 40
    seed: int = 0
    workers: int = 1
    # data schema applied inside fit_flow (standardizers are fit on train only)
    outcome_kind: str = "log1p"
    outcome_c: float = 1000.0
    log_columns: tuple[int, ...] = ()
    # random-search space
    widths: tuple[int, ...] = (32, 64, 128)
    depths: tuple[int, ...] = (1, 2)
    transforms: tuple[int, ...] = (2, 3, 4)
    bins: tuple[int, ...] = (4, 8, 16)
    lr_range: tuple[float, float] = (1e-4, 3e-3)

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.n_trials < ENSEMBLE_SIZE:
            raise ConfigError(
                f"n_trials must be >= ensemble size ({ENSEMBLE_SIZE})"
            )
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not (0 < self.lr_range[0] <= self.lr_range[1]):
            raise ConfigError("bad learning-rate range")


@dataclass
class TrainReport:
    arch: FlowArch
    seed: object
    status: str  # "converged" | "max_epochs" | "failed"
    n_epochs: int = 0
    best_epoch: int = 0
    best_val_nll: float = float("inf")
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    wall_seconds: float = 0.0
    message: str = ""


def _build_flow(arch: FlowArch, train, config: TrainConfig, rng: np.random.Generator):
    x, y = train
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mask = np.zeros(x.shape[1], dtype=bool)
    for c in config.log_columns:
        mask[c] = True
    std = Standardizer.fit(x, log_mask=mask)
    hidden = [arch.hidden_width] * arch.depth
    if arch.kind == "conditional":
        if y is None:
            raise ConfigError("conditional flow needs outcomes")
        ot = OutcomeTransform.fit(
            np.asarray(y, dtype=np.float64), kind=config.outcome_kind, c=config.outcome_c
        )
        return ConditionalFlow.create(
            std, ot, n_transforms=arch.n_transforms, n_bins=arch.n_bins,
            hidden_widths=hidden, rng=rng,
        )
    return DensityFlow.create(
        std, n_transforms=arch.n_transforms, hidden_widths=hidden, rng=rng
    )


def _nll(flow, data) -> float:
    x, y = data
    lp = flow.log_prob(y, x) if y is not None else flow.log_prob(x)
    return -float(np.mean(lp))


def _batch_nll_grads(flow, data, idx):
    x, y = data
    if y is not None:
        return flow.nll_and_grads(y[idx], x[idx])
    return flow.nll_and_grads(x[idx])


def fit_flow(train, val, arch: FlowArch, config: TrainConfig, seed) -> tuple[object, TrainReport]:
    """Adam MLE with early stopping on validation NLL.

    `train` / `val` are (x, y) with y=None for joint density flows.
    Stops after `patience` consecutive epochs without strict improvement
    and restores the best-validation parameters. Non-finite losses or
    gradients raise TrainingAbort.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    flow = _build_flow(arch, train, config, rng)
    params = flow.parameters()
    state = AdamState.for_params(params)
    names = flow.parameter_names()
    n_train = len(train[0])
    report = TrainReport(arch=arch, seed=seed, status="max_epochs")
    best_snapshot = [p.copy() for p in params]
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_train)
        epoch_nll = 0.0
        for lo in range(0, n_train, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            nll, grads = _batch_nll_grads(flow, train, idx)
            if not np.isfinite(nll):
                raise TrainingAbort(f"non-finite training loss at epoch {epoch}")
            adam_step(params, grads, state, lr=arch.learning_rate, names=names)
            epoch_nll += nll * len(idx)
        flow.check_finite()
        val_nll = _nll(flow, val)
        if not np.isfinite(val_nll):
            raise TrainingAbort(f"non-finite validation loss at epoch {epoch}")
        report.train_curve.append(epoch_nll / n_train)
        report.val_curve.append(val_nll)
        report.n_epochs = epoch
        if val_nll < report.best_val_nll:
            report.best_val_nll = val_nll
            report.best_epoch = epoch
            best_snapshot = [p.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                report.status = "converged"
                break
    for p, s in zip(params, best_snapshot):
        p[:] = s
    report.wall_seconds = time.perf_counter() - t0
    return flow, report


def sample_archs(config: TrainConfig, kind: str) -> list[FlowArch]:
    """All trial architectures drawn up front from one seed stream, so
    trial i's draw never depends on how earlier trials ran."""
    rng = np.random.default_rng([config.seed, _ARCH_STREAM])
    archs = []
    lo, hi = np.log(config.lr_range[0]), np.log(config.lr_range[1])
    for _ in range(config.n_trials):
        archs.append(
            FlowArch(
                kind=kind,
                hidden_width=int(rng.choice(config.widths)),
                depth=int(rng.choice(config.depths)),
                n_transforms=int(rng.choice(config.transforms)),
                n_bins=int(rng.choice(config.bins)),
                learning_rate=float(np.exp(rng.uniform(lo, hi))),
            )
        )
    return archs


@dataclass
class TrialResult:
    index: int
    arch: FlowArch
    report: TrainReport
    flow: object | None  # None when the trial failed

    @property
    def val_nll(self) -> float:
        return self.report.best_val_nll


@dataclass
class SearchResult:
    trials: list[TrialResult]  # sorted by validation NLL, failures last
    n_failed: int

    def successes(self) -> list[TrialResult]:
        return [t for t in self.trials if t.flow is not None]


def _run_trial(args) -> tuple[int, TrainReport, dict | None]:
    train, val, arch, config, trial_index = args
    seed = [config.seed, _TRIAL_STREAM, trial_index]
    try:
        flow, report = fit_flow(train, val, arch, config, seed)
        return trial_index, report, flow_to_dict(flow)
    except TrainingAbort as exc:
        report = TrainReport(arch=arch, seed=seed, status="failed", message=str(exc))
        return trial_index, report, None


def hyperparameter_search(train, val, config: TrainConfig, kind: str) -> SearchResult:
    """Random search; a trial that aborts is recorded as failed, never
    retried, and ranked below every success."""
    archs = sample_archs(config, kind)
    jobs = [(train, val, arch, config, i) for i, arch in enumerate(archs)]
    results: list[tuple[int, TrainReport, dict | None]] = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_trial, jobs))
    else:
        results = [_run_trial(j) for j in jobs]
    trials = []
    n_failed = 0
    for index, report, flow_dict in sorted(results, key=lambda r: r[0]):
        flow = None if flow_dict is None else flow_from_dict(flow_dict)
        if flow is None:
            n_failed += 1
        trials.append(TrialResult(index=index, arch=archs[index], report=report, flow=flow))
    trials.sort(key=lambda t: (t.flow is None, t.val_nll, t.index))
    return SearchResult(trials=trials, n_failed=n_failed)


def build_ensemble(search: SearchResult, size: int = ENSEMBLE_SIZE) -> tuple[FlowEnsemble, list[TrialResult]]:
    """Equal-weight mixture of the `size` best trials by validation NLL."""
    ok = search.successes()
    if len(ok) < size:
        raise TrainingAbort(
            f"only {len(ok)} trials succeeded; ensemble needs {size}"
        )
    top = ok[:size]
    return FlowEnsemble([t.flow for t in top], required_members=size), top


def best_flow(search: SearchResult):
    """Single best trial; used for the joint covariate (support) flows."""
    ok = search.successes()
    if not ok:
        raise TrainingAbort("all trials failed")
    return ok[0].flow, ok[0]


def density_search_config(config: TrainConfig, n_trials: int | None = None) -> TrainConfig:
    """Support flows reuse the arm's config with a smaller trial budget
    and a deeper transform menu: a 7-D joint fit has to carve structure
    (correlations, holes) that a scalar conditional never needs."""
    n = max(ENSEMBLE_SIZE, n_trials if n_trials is not None else config.n_trials // 4)
    return replace(config, n_trials=n, transforms=(2, 4, 6))
