"""Marginal sensitivity analysis for weighting estimators.

Unobserved confounding of magnitude ``Lambda`` lets each control's weight be
multiplied by an unknown ``c_i`` in ``[1/Lambda, Lambda]``. Within a stratum the
perturbed control mean is the ratio ``sum gamma c Y / sum gamma c``; its
extremes over the box sit at a corner with a single cut in the sorted
outcomes, so each bound costs one sort and two cumulative sums.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import AnalysisSample
from .errors import BootstrapError, PooledWeightsError, ValidationError
from .solver import SolverConfig, WeightSolution, _feature_values, solve

Procedure = Callable[[AnalysisSample, np.ndarray], WeightSolution]

MAX_DROP_FRACTION = 0.10


@dataclass(frozen=True)
class SensitivityConfig:
    lambda_sens: float = 1.0
    bootstrap_reps: int = 1000
    confidence: float = 0.95
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.lambda_sens >= 1.0:
            raise ValidationError("lambda_sens must be at least 1")
        if self.bootstrap_reps < 1:
            raise ValidationError("bootstrap_reps must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValidationError("confidence must lie in (0, 1)")
        if self.threads < 1:
            raise ValidationError("threads must be positive")


@dataclass(frozen=True)
class Target:
    """A set of strata whose effects are pooled with ``n_1g`` weights."""

    name: str
    strata: tuple[str, ...] | None = None

    @classmethod
    def overall(cls) -> "Target":
        return cls("overall")

    @classmethod
    def stratum(cls, label: str) -> "Target":
        return cls(f"stratum={label}", (str(label),))

    @classmethod
    def group(cls, grouping: str, value: str, mapping: Mapping[str, str]) -> "Target":
        members = tuple(sorted(lab for lab, v in mapping.items() if v == value))
        if not members:
            raise ValidationError(f"no strata map to {grouping}={value}")
        return cls(f"{grouping}={value}", members)

    def cells(self, sample: AnalysisSample) -> np.ndarray:
        if self.strata is None:
            return np.arange(sample.K)
        index = {lab: k for k, lab in enumerate(sample.labels)}
        missing = [lab for lab in self.strata if lab not in index]
        if missing:
            raise ValidationError(f"target {self.name!r} references unknown strata {missing}")
        return np.array(sorted(index[lab] for lab in self.strata))


@dataclass(frozen=True)
class SensitivityBounds:
    target: str
    lambda_sens: float
    tau_min: float
    tau_max: float
    L: float = math.nan
    U: float = math.nan
    B: int = 0
    dropped_replicates: int = 0

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "lambda": self.lambda_sens,
            "tau_min": self.tau_min,
            "tau_max": self.tau_max,
            "L": self.L,
            "U": self.U,
            "B": self.B,
            "dropped_replicates": self.dropped_replicates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def ratio_extremes(gamma: np.ndarray, y: np.ndarray, lam: float) -> tuple[float, float]:
    """Min and max of ``sum g c y / sum g c`` over ``c`` in ``[1/lam, lam]^n``.

    The maximum puts ``lam`` on every unit above a cut in sorted ``y`` and
    ``1/lam`` below; the minimum mirrors it. All ``n + 1`` cuts are scanned.
    """
    gamma = np.asarray(gamma, dtype=float)
    y = np.asarray(y, dtype=float)
    if gamma.size == 0 or not gamma.sum() > 0:
        raise ValidationError("control set is empty or carries no weight")
    order = np.argsort(y, kind="stable")
    g, v = gamma[order], y[order]
    gy = g * v
    # prefix sums over the k lowest outcomes, k = 0..n
    low_w = np.concatenate([[0.0], np.cumsum(g)])
    low_wy = np.concatenate([[0.0], np.cumsum(gy)])
    tot_w, tot_wy = low_w[-1], low_wy[-1]
    hi_w, hi_wy = tot_w - low_w, tot_wy - low_wy
    inv = 1.0 / lam
    upper = (inv * low_wy + lam * hi_wy) / (inv * low_w + lam * hi_w)
    lower = (lam * low_wy + inv * hi_wy) / (lam * low_w + inv * hi_w)
    return float(lower.min()), float(upper.max())


def _stratum_extremes(gamma, y_c, strata_c, cells, lam):
    lo = np.empty(cells.size)
    hi = np.empty(cells.size)
    for i, k in enumerate(cells):
        mask = strata_c == k
        lo[i], hi[i] = ratio_extremes(gamma[mask], y_c[mask], lam)
    return lo, hi


def _point_bounds(solution: WeightSolution, sample: AnalysisSample, y: np.ndarray,
                  cells: np.ndarray, lam: float) -> tuple[float, float]:
    ctrl, trt = solution.control_index, sample.treated_index
    n1g = sample.n1g[cells].astype(float)
    wts = n1g / n1g.sum()
    mu1g = np.bincount(sample.strata[trt], weights=y[trt], minlength=sample.K)[cells] / n1g
    lo, hi = _stratum_extremes(solution.gamma, y[ctrl], sample.strata[ctrl], cells, lam)
    mu1 = float(wts @ mu1g)
    return mu1 - float(wts @ hi), mu1 - float(wts @ lo)


def bounds_at_lambda(solution: WeightSolution, sample: AnalysisSample, outcomes=None,
                     target: Target | None = None, config: SensitivityConfig | None = None) -> SensitivityBounds:
    """Worst-case effect bounds at ``config.lambda_sens`` (no resampling)."""
    config = config or SensitivityConfig()
    target = target or Target.overall()
    y = sample.y if outcomes is None else np.asarray(outcomes, dtype=float)
    tau_min, tau_max = _point_bounds(solution, sample, y, target.cells(sample), config.lambda_sens)
    return SensitivityBounds(target.name, config.lambda_sens, tau_min, tau_max)


def stratified_resample(sample: AnalysisSample, rng: np.random.Generator) -> np.ndarray:
    """Row indices drawn with replacement within each stratum x treatment cell."""
    cells = sample.strata * 2 + sample.w
    order = np.argsort(cells, kind="stable")
    bounds = np.flatnonzero(np.diff(cells[order])) + 1
    parts = []
    for members in np.split(order, bounds):
        parts.append(members[rng.integers(0, members.size, members.size)])
    return np.sort(np.concatenate(parts))


def balancing_procedure(features, config: SolverConfig | None = None) -> Procedure:
    """Re-solve balancing weights on resampled rows of fixed features."""
    phi = _feature_values(features)
    config = config or SolverConfig()

    def run(resampled: AnalysisSample, rows: np.ndarray) -> WeightSolution:
        return solve(phi[rows], resampled, config)

    return run


@dataclass(frozen=True, eq=False)
class BootstrapDraws:
    """Converged replicate solutions, reusable across ``Lambda`` values."""

    samples: tuple[AnalysisSample, ...]
    solutions: tuple[WeightSolution, ...]
    B: int
    dropped: int

    def bounds(self, target: Target, lam: float) -> tuple[np.ndarray, np.ndarray]:
        lo = np.empty(len(self.solutions))
        hi = np.empty(len(self.solutions))
        for b, (smp, sol) in enumerate(zip(self.samples, self.solutions)):
            lo[b], hi[b] = _point_bounds(sol, smp, smp.y, target.cells(smp), lam)
        return lo, hi


def _replicate(procedure: Procedure, sample: AnalysisSample, seed: int, b: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
    rows = stratified_resample(sample, rng)
    resampled = sample.take(rows)
    try:
        sol = procedure(resampled, rows)
    except PooledWeightsError:
        return None
    if not sol.converged:
        return None
    return resampled, sol


def bootstrap_draws(procedure: Procedure, sample: AnalysisSample,
                    config: SensitivityConfig | None = None) -> BootstrapDraws:
    """Run ``B`` stratified bootstrap replicates of the weighting procedure.

    Replicate ``b`` draws from ``SeedSequence([seed, b])`` so the result does
    not depend on ``threads``. Failed replicates are dropped and counted;
    more than 10% failures is an error.
    """
    config = config or SensitivityConfig()
    B = config.bootstrap_reps
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(lambda b: _replicate(procedure, sample, config.seed, b), range(B)))
    else:
        results = [_replicate(procedure, sample, config.seed, b) for b in range(B)]
    kept = [r for r in results if r is not None]
    dropped = B - len(kept)
    if dropped > MAX_DROP_FRACTION * B or not kept:
        raise BootstrapError(f"{dropped} of {B} bootstrap replicates failed", dropped, B)
    return BootstrapDraws(tuple(r[0] for r in kept), tuple(r[1] for r in kept), B, dropped)


def bootstrap_ci(procedure: Procedure, sample: AnalysisSample, target: Target | None = None,
                 config: SensitivityConfig | None = None, solution: WeightSolution | None = None,
                 draws: BootstrapDraws | None = None) -> SensitivityBounds:
    """Percentile-bootstrap interval for the sensitivity bounds.

    ``L`` is the lower ``(1-confidence)/2`` percentile of replicate
    ``tau_min`` and ``U`` the upper percentile of replicate ``tau_max``.
    Point bounds come from ``solution`` (solved on the full sample if absent).
    """
    config = config or SensitivityConfig()
    target = target or Target.overall()
    if draws is None:
        draws = bootstrap_draws(procedure, sample, config)
    if solution is None:
        solution = procedure(sample, np.arange(sample.n))
    point = bounds_at_lambda(solution, sample, None, target, config)
    lo, hi = draws.bounds(target, config.lambda_sens)
    tail = 100.0 * (1.0 - config.confidence) / 2.0
    return replace(
        point,
        L=float(np.percentile(lo, tail)),
        U=float(np.percentile(hi, 100.0 - tail)),
        B=draws.B,
        dropped_replicates=draws.dropped,
    )


def difference_bounds(bounds_a: SensitivityBounds, bounds_b: SensitivityBounds) -> SensitivityBounds:
    """Worst-case interval for ``tau_a - tau_b``: ``[L_a - U_b, U_a - L_b]``."""
    if not math.isclose(bounds_a.lambda_sens, bounds_b.lambda_sens, rel_tol=0.0, abs_tol=1e-12):
        raise ValidationError("difference bounds need a common Lambda")
    return SensitivityBounds(
        target=f"{bounds_a.target} - {bounds_b.target}",
        lambda_sens=bounds_a.lambda_sens,
        tau_min=bounds_a.tau_min - bounds_b.tau_max,
        tau_max=bounds_a.tau_max - bounds_b.tau_min,
        L=bounds_a.L - bounds_b.U,
        U=bounds_a.U - bounds_b.L,
        B=min(bounds_a.B, bounds_b.B),
        dropped_replicates=max(bounds_a.dropped_replicates, bounds_b.dropped_replicates),
    )


@dataclass(frozen=True)
class Breakdown:
    lambda_sens: float
    censored: bool = False
    significant: bool = True

    def to_dict(self) -> dict:
        return {"lambda": self.lambda_sens, "censored": self.censored, "significant": self.significant}


def breakdown_lambda(procedure: Procedure, sample: AnalysisSample, target: Target | None = None,
                     grid: Sequence[float] = (), config: SensitivityConfig | None = None,
                     draws: BootstrapDraws | None = None) -> Breakdown:
    """Largest grid ``Lambda`` whose bootstrap lower bound ``L`` stays positive.

    ``L`` is nonincreasing in ``Lambda``, so the grid is bisected. A value
    at the top of the grid is flagged ``censored``; ``L <= 0`` already at
    ``Lambda = 1`` returns 1 flagged not significant.
    """
    config = config or SensitivityConfig()
    target = target or Target.overall()
    grid = [float(x) for x in grid]
    if not grid:
        raise ValidationError("breakdown grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1.0:
        raise ValidationError("breakdown grid must be ascending and start at or above 1")
    if draws is None:
        draws = bootstrap_draws(procedure, sample, config)
    tail = 100.0 * (1.0 - config.confidence) / 2.0

    def lower(lam: float) -> float:
        return float(np.percentile(draws.bounds(target, lam)[0], tail))

    if lower(1.0) <= 0:
        return Breakdown(1.0, censored=False, significant=False)
    if lower(grid[-1]) > 0:
        return Breakdown(grid[-1], censored=True)
    if lower(grid[0]) <= 0:
        return Breakdown(1.0)
    lo, hi = 0, len(grid) - 1  # invariant: L(grid[lo]) > 0 >= L(grid[hi])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if lower(grid[mid]) > 0:
            lo = mid
        else:
            hi = mid
    return Breakdown(grid[lo])


def bound_width(diff: SensitivityBounds) -> float:
    """``max(|L|, |U|)`` of a difference interval."""
    return max(abs(diff.L), abs(diff.U))


def amplification_curve(width: float, delta_grid: Sequence[float]) -> list[tuple[float, float]]:
    """Outcome-coefficient size needed per imbalance ``delta`` to explain ``width``."""
    if not width > 0:
        raise ValidationError("bound width must be positive")
    out = []
    for delta in delta_grid:
        delta = float(delta)
        if delta == 0:
            raise ValidationError("imbalance delta must be nonzero")
        if delta < 0:
            raise ValidationError("imbalance delta must be positive")
        out.append((delta, width / delta))
    return out
