"""Synthetic subgroup-effect study with correlated, binary and skewed covariates.

Each replicate draws covariates, bins the last covariate into ``G`` groups,
draws group-specific logistic propensity and linear outcome models with
sparse slope deviations, then runs the estimator roster against the
in-sample true group ATTs.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from statistics import NormalDist

import numpy as np
from scipy.stats import ortho_group

from . import estimators as est
from .data import AnalysisSample, standardize_columns
from .errors import PooledWeightsError, ValidationError
from .solver import SolverConfig, solve

# 1-based column indices
DICHOTOMIZED = (1, 11, 21, 32, 41)
SKEWED_STEP = 5
SKEWED_START = 2

ESTIMATORS = (
    "partial",
    "augmented",
    "full",
    "none",
    "ipw_full_interaction",
    "ipw_fixed_effects",
    "ridge_outcome",
)

_TAG_COVARIATES, _TAG_GROUPS, _TAG_MODEL, _TAG_FIT = 0, 1, 2, 3
_MAX_CUT_RETRIES = 100


@dataclass(frozen=True)
class SimConfig:
    n: int = 10000
    d: int = 50
    G: int = 10
    m: int = 500
    seed: int = 0
    estimators: tuple[str, ...] = ESTIMATORS
    pscore_covariates: str = "transformed"
    noise_sd: float = 1.0
    confidence: float = 0.95
    threads: int = 1
    penalty_grid: tuple[float, ...] = est.DEFAULT_PENALTY_GRID

    def __post_init__(self):
        if self.d < 3:
            raise ValidationError("the effect model needs d >= 3")
        if self.n <= self.d:
            raise ValidationError("need n > d")
        if self.G < 2:
            raise ValidationError("need G >= 2")
        if self.n < 2 * self.G:
            raise ValidationError("need at least two units per group on average")
        if self.m < 1:
            raise ValidationError("need at least one replicate")
        if not self.estimators:
            raise ValidationError("estimator roster is empty")
        unknown = sorted(set(self.estimators) - set(ESTIMATORS) - {"oracle"})
        if unknown:
            raise ValidationError(f"unknown estimators {unknown}")
        if self.pscore_covariates not in ("transformed", "raw"):
            raise ValidationError("pscore_covariates must be 'transformed' or 'raw'")
        if self.threads < 1:
            raise ValidationError("threads must be positive")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "penalty_grid", tuple(float(x) for x in self.penalty_grid))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["estimators"] = list(self.estimators)
        out["penalty_grid"] = list(self.penalty_grid)
        return out


def stream(seed: int, replicate: int, tag: int) -> np.random.Generator:
    """Independent generator for one (replicate, stage) pair."""
    return np.random.default_rng(np.random.SeedSequence([seed, replicate, tag]))


def base_spectrum(d: int) -> np.ndarray:
    """Diagonal ``(d - j + 1)^5 / d^5`` for ``j = 1..d``."""
    j = np.arange(1, d + 1)
    return (d - j + 1.0) ** 5 / float(d) ** 5


def transformed_columns(d: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """0-based (dichotomized, exponentiated) columns; dichotomizing wins ties."""
    dich = tuple(j - 1 for j in DICHOTOMIZED if j <= d)
    skew = tuple(j - 1 for j in range(SKEWED_START, d + 1, SKEWED_STEP) if (j - 1) not in dich)
    return dich, skew


@dataclass(frozen=True, eq=False)
class Covariates:
    raw: np.ndarray
    transformed: np.ndarray
    covariance: np.ndarray


def gen_covariates(config: SimConfig, rng: np.random.Generator) -> Covariates:
    """Draw ``X ~ N(0, Q S Q')`` and apply the binary and skewed transforms."""
    n, d = config.n, config.d
    spectrum = base_spectrum(d)
    Q = ortho_group.rvs(d, random_state=rng) if d > 1 else np.ones((1, 1))
    root = Q * np.sqrt(spectrum)
    cov = root @ root.T
    cov = 0.5 * (cov + cov.T)
    X = rng.standard_normal((n, d)) @ root.T
    Xt = X.copy()
    dich, skew = transformed_columns(d)
    for j in dich:
        Xt[:, j] = (X[:, j] >= np.quantile(X[:, j], 0.8)).astype(float)
    for j in skew:
        Xt[:, j] = np.exp(X[:, j])
    return Covariates(X, Xt, cov)


def assign_groups(x_last: np.ndarray, G: int, rng: np.random.Generator) -> np.ndarray:
    """Bin ``x_last`` at ``G - 1`` cuts sampled from a grid of order statistics.

    The grid holds ``n // G`` evenly spaced order statistics; cut sets that
    leave a group empty are redrawn.
    """
    if G < 2:
        raise ValidationError("need G >= 2")
    x_last = np.asarray(x_last, dtype=float)
    n = x_last.size
    xs = np.sort(x_last)
    size = max(n // G, G - 1)
    grid = xs[np.unique(np.round(np.linspace(0, n - 1, size)).astype(int))]
    grid = np.unique(grid)
    if grid.size < G - 1:
        raise ValidationError("too few distinct grid points for the requested groups")
    for _ in range(_MAX_CUT_RETRIES):
        cuts = np.sort(rng.choice(grid, size=G - 1, replace=False))
        labels = np.searchsorted(cuts, x_last, side="right")
        if np.all(np.bincount(labels, minlength=G) > 0):
            return labels
    raise ValidationError(f"could not draw {G} nonempty groups in {_MAX_CUT_RETRIES} attempts")


@dataclass(frozen=True, eq=False)
class ModelParams:
    alpha: np.ndarray
    eta0: np.ndarray
    mu_beta: np.ndarray
    mu_eta: np.ndarray
    U_beta: np.ndarray
    B_beta: np.ndarray
    U_eta: np.ndarray
    B_eta: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return self.mu_beta + self.U_beta * self.B_beta

    @property
    def eta(self) -> np.ndarray:
        return self.mu_eta + self.U_eta * self.B_eta


def draw_params(d: int, G: int, rng: np.random.Generator) -> ModelParams:
    scale = 3.0 / math.sqrt(d)
    return ModelParams(
        alpha=rng.standard_normal(G),
        eta0=rng.standard_normal(G),
        mu_beta=rng.choice([-scale, scale], size=d),
        mu_eta=rng.choice([-scale, scale], size=d),
        U_beta=rng.standard_normal((G, d)),
        B_beta=(rng.random((G, d)) < 0.25).astype(float),
        U_eta=rng.standard_normal((G, d)),
        B_eta=(rng.random((G, d)) < 0.25).astype(float),
    )


@dataclass(frozen=True, eq=False)
class DGPDraw:
    X: np.ndarray
    X_tilde: np.ndarray
    groups: np.ndarray
    W: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    tau: np.ndarray
    propensity: np.ndarray
    params: ModelParams

    @property
    def y(self) -> np.ndarray:
        return np.where(self.W, self.y1, self.y0)

    def true_catt(self, G: int) -> np.ndarray:
        """Per-group mean of ``tau_i`` over treated units (NaN if none)."""
        n1 = np.bincount(self.groups[self.W], minlength=G).astype(float)
        tot = np.bincount(self.groups[self.W], weights=self.tau[self.W], minlength=G)
        with np.errstate(invalid="ignore", divide="ignore"):
            return tot / n1

    def degenerate_groups(self, G: int) -> list[int]:
        n1 = np.bincount(self.groups[self.W], minlength=G)
        n0 = np.bincount(self.groups[~self.W], minlength=G)
        return [int(g) for g in np.flatnonzero((n1 == 0) | (n0 == 0))]


def gen_treatment_and_outcomes(X_tilde: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                               X_raw: np.ndarray | None = None, params: ModelParams | None = None,
                               noise_sd: float = 1.0, pscore_covariates: str = "transformed",
                               G: int | None = None) -> DGPDraw:
    """Group-specific logistic treatment and linear control outcome.

    ``tau_i = X_d - X_3 + 0.3 X_d X_3`` uses the raw covariates; the
    treatment and outcome models use ``X_tilde`` (or raw ``X`` for the
    propensity when ``pscore_covariates='raw'``).
    """
    X_tilde = np.asarray(X_tilde, dtype=float)
    X_raw = X_tilde if X_raw is None else np.asarray(X_raw, dtype=float)
    labels = np.asarray(labels)
    n, d = X_tilde.shape
    G = int(labels.max()) + 1 if G is None else G
    if params is None:
        params = draw_params(d, G, rng)
    Xp = X_raw if pscore_covariates == "raw" else X_tilde
    logit = params.alpha[labels] + np.einsum("ij,ij->i", Xp, params.beta[labels])
    prop = 0.5 * (1.0 + np.tanh(0.5 * logit))
    W = rng.random(n) < prop
    eps = rng.standard_normal(n) * noise_sd
    y0 = params.eta0[labels] + np.einsum("ij,ij->i", X_tilde, params.eta[labels]) + eps
    xd, x3 = X_raw[:, d - 1], X_raw[:, 2]
    tau = xd - x3 + 0.3 * xd * x3
    return DGPDraw(X_raw, X_tilde, labels, W, y0, y0 + tau, tau, prop, params)


# --------------------------------------------------------------------------- harness


@dataclass(frozen=True)
class Record:
    replicate: int
    estimator: str
    group: str
    estimate: float
    truth: float
    se: float


def _tables(names, draw: DGPDraw, config: SimConfig, rep: int):
    """Run the roster on one draw; returns ({name: table or error}, sample)."""
    keep_groups = sorted(set(range(config.G)) - set(draw.degenerate_groups(config.G)))
    rows = np.isin(draw.groups, keep_groups)
    sample = AnalysisSample.from_arrays(
        draw.y[rows], draw.W[rows], draw.groups[rows], draw.X_tilde[rows]
    )
    feats = standardize_columns(sample.X, sample.covariate_names)
    out = {}
    cache = {}
    fold_seed = int(stream(config.seed, rep, _TAG_FIT).integers(2**31))

    def balancing(pooling, rule):
        key = (pooling, rule)
        if key not in cache:
            cfg = SolverConfig(lam=1.0, pooling=pooling, lambda_rule=rule)
            sol = solve(feats, sample, cfg)
            if not sol.converged:
                raise PooledWeightsError(f"{pooling} pooling did not converge: {sol.message}")
            cache[key] = sol
        return cache[key]

    def ridge():
        if "ridge" not in cache:
            cache["ridge"] = est.fit_outcome_ridge(feats, sample, config.penalty_grid, seed=fold_seed)
        return cache["ridge"]

    for name in names:
        try:
            if name == "partial":
                table = est.weighted_means(balancing("partial", "treated"), sample)
            elif name == "augmented":
                sol = balancing("partial", "treated")
                table = est.augment(est.weighted_means(sol, sample), sol, ridge(), feats, sample)
            elif name == "full":
                table = est.weighted_means(balancing("full", "constant"), sample)
            elif name == "none":
                table = est.weighted_means(balancing("none", "treated"), sample)
            elif name in ("ipw_full_interaction", "ipw_fixed_effects"):
                mode = name[len("ipw_"):]
                model = est.fit_propensity(feats, sample, mode, config.penalty_grid, seed=fold_seed)
                table = est.weighted_means(est.ipw_weights(model, feats, sample), sample)
            elif name == "ridge_outcome":
                table = est.outcome_model_estimates(ridge(), feats, sample)
            else:  # oracle
                table = None
            out[name] = table
        except (PooledWeightsError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[name] = exc
    return out, sample


def run_replicate(config: SimConfig, rep: int) -> tuple[list[Record], dict]:
    """All estimator records for replicate ``rep`` plus a drop/failure report."""
    cov = gen_covariates(config, stream(config.seed, rep, _TAG_COVARIATES))
    labels = assign_groups(cov.raw[:, -1], config.G, stream(config.seed, rep, _TAG_GROUPS))
    draw = gen_treatment_and_outcomes(
        cov.transformed, labels, stream(config.seed, rep, _TAG_MODEL), X_raw=cov.raw,
        noise_sd=config.noise_sd, pscore_covariates=config.pscore_covariates, G=config.G,
    )
    dropped = draw.degenerate_groups(config.G)
    truth = draw.true_catt(config.G)
    tables, sample = _tables(config.estimators, draw, config, rep)
    kept = [int(lab) for lab in sample.labels]
    n1 = sample.n1g.astype(float)
    truth_kept = truth[kept]
    truth_overall = float(n1 @ truth_kept / n1.sum())
    records: list[Record] = []
    failures: dict[str, str] = {}
    for name in config.estimators:
        table = tables[name]
        if isinstance(table, Exception):
            failures[name] = f"{type(table).__name__}: {table}"
            continue
        if table is None:
            for k, g in enumerate(kept):
                records.append(Record(rep, name, str(g), float(truth_kept[k]), float(truth_kept[k]), math.nan))
            records.append(Record(rep, name, "overall", truth_overall, truth_overall, math.nan))
            continue
        for k, g in enumerate(kept):
            records.append(Record(rep, name, str(g), float(table.tau[k]), float(truth_kept[k]), float(table.se[k])))
        ov = table.overall()
        records.append(Record(rep, name, "overall", ov.tau, truth_overall, ov.se))
    return records, {"replicate": rep, "dropped_groups": dropped, "failures": failures}


@dataclass(frozen=True)
class Metrics:
    subgroup_mab: float
    subgroup_rmse: float
    overall_abs_bias: float
    overall_rmse: float
    subgroup_coverage: float
    overall_coverage: float
    replicates: int
    failures: int


def _metrics(records: list[Record], z: float, failures: int) -> Metrics:
    sub = [r for r in records if r.group != "overall"]
    ovr = [r for r in records if r.group == "overall"]
    if not ovr:
        nan = math.nan
        return Metrics(nan, nan, nan, nan, nan, nan, 0, failures)
    err_by_group: dict[str, list[float]] = {}
    for r in sub:
        err_by_group.setdefault(r.group, []).append(r.estimate - r.truth)
    mab = float(np.mean([abs(np.mean(v)) for v in err_by_group.values()]))
    sub_err = np.array([r.estimate - r.truth for r in sub])
    ovr_err = np.array([r.estimate - r.truth for r in ovr])

    def coverage(rs):
        se = np.array([r.se for r in rs])
        if not np.all(np.isfinite(se)) or np.all(se == 0):
            return math.nan
        err = np.abs(np.array([r.estimate - r.truth for r in rs]))
        return float(np.mean(err <= z * se))

    return Metrics(
        subgroup_mab=mab,
        subgroup_rmse=float(np.sqrt(np.mean(sub_err**2))),
        overall_abs_bias=float(abs(ovr_err.mean())),
        overall_rmse=float(np.sqrt(np.mean(ovr_err**2))),
        subgroup_coverage=coverage(sub),
        overall_coverage=coverage(ovr),
        replicates=len(ovr),
        failures=failures,
    )


@dataclass(frozen=True, eq=False)
class SimResult:
    config: SimConfig
    metrics: dict[str, Metrics]
    records: tuple[Record, ...]
    reports: tuple[dict, ...]

    def to_dict(self, include_records: bool = False) -> dict:
        out = {
            "config": self.config.to_dict(),
            "metrics": {k: asdict(v) for k, v in self.metrics.items()},
            "replicates": list(self.reports),
        }
        if include_records:
            out["records"] = [asdict(r) for r in self.records]
        return out

    def to_json(self, include_records: bool = False) -> str:
        return json.dumps(self.to_dict(include_records), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Tidy metrics: estimator, metric, value."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["estimator", "metric", "value"])
        for name, m in self.metrics.items():
            for key, value in asdict(m).items():
                writer.writerow([name, key, repr(value)])
        return buf.getvalue()

    def records_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["replicate", "estimator", "group", "estimate", "truth", "se"])
        for r in self.records:
            writer.writerow([r.replicate, r.estimator, r.group, repr(r.estimate), repr(r.truth), repr(r.se)])
        return buf.getvalue()


def run_monte_carlo(config: SimConfig) -> SimResult:
    """Run ``config.m`` replicates; results do not depend on ``config.threads``."""
    reps = range(config.m)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(lambda r: run_replicate(config, r), reps))
    else:
        results = [run_replicate(config, r) for r in reps]
    records = tuple(rec for recs, _ in results for rec in recs)
    reports = tuple(rep for _, rep in results)
    z = NormalDist().inv_cdf(0.5 + config.confidence / 2.0)
    metrics = {}
    for name in config.estimators:
        fails = sum(1 for rep in reports if name in rep["failures"])
        metrics[name] = _metrics([r for r in records if r.estimator == name], z, fails)
    return SimResult(config, metrics, records, reports)
