"""Effect estimates from control weights, plus baseline estimators.

Every weighting estimator here imputes the treated units' control mean in
stratum ``g`` as ``mu0_g = (1/n_1g) sum_{i in g, W=0} gamma_i Y_i`` with weights
summing to ``n_1g``. Aggregates over strata weight by ``n_1g``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

import numpy as np

from ._linalg import solve_arrow
from .data import AnalysisSample
from .errors import ConvergenceError, OverlapError, ValidationError
from .solver import WeightSolution, _feature_values, imbalances

RESIDUAL_SOURCES = ("group-mean", "outcome-model")
PROPENSITY_MODES = ("full_interaction", "fixed_effects")
DEFAULT_PENALTY_GRID = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


# --------------------------------------------------------------------------- tables


@dataclass(frozen=True)
class EstimateRow:
    level: str
    group: str
    n1: int
    mu1: float
    mu0: float
    tau: float
    se: float


@dataclass(frozen=True, eq=False)
class EstimateTable:
    """Per-cell estimates with n_1-weighted aggregation.

    Cells are strata for weighting estimators (or grouping levels for the
    regression baseline). ``tau`` is always ``mu1 - mu0``. Aggregate standard
    errors treat cells as independent unless ``tau_cov`` is supplied.
    """

    labels: tuple[str, ...]
    n1g: np.ndarray
    mu1: np.ndarray
    mu0: np.ndarray
    se: np.ndarray
    method: str = "balancing"
    bias_correction: np.ndarray | None = None
    tau_cov: np.ndarray | None = None
    groupings: Mapping[str, Mapping[str, str]] = field(default_factory=dict)

    @property
    def tau(self) -> np.ndarray:
        return self.mu1 - self.mu0

    @property
    def n1(self) -> int:
        return int(self.n1g.sum())

    def aggregate(self, cells: Sequence[int]) -> tuple[float, float, float, float]:
        """(mu1, mu0, tau, se) pooled over ``cells`` with n_1 weights."""
        cells = np.asarray(cells, dtype=int)
        wts = self.n1g[cells] / self.n1g[cells].sum()
        tau = float(wts @ self.tau[cells])
        mu1 = float(wts @ self.mu1[cells])
        if self.tau_cov is not None:
            var = float(wts @ self.tau_cov[np.ix_(cells, cells)] @ wts)
        else:
            var = float(np.sum(wts**2 * self.se[cells] ** 2))
        return mu1, mu1 - tau, tau, math.sqrt(max(var, 0.0))

    def overall(self) -> EstimateRow:
        mu1, mu0, tau, se = self.aggregate(np.arange(len(self.labels)))
        return EstimateRow("overall", "all", self.n1, mu1, mu0, tau, se)

    def with_grouping(self, name: str, mapping: Mapping[str, str]) -> "EstimateTable":
        unknown = sorted(set(mapping) - set(self.labels))
        if unknown:
            raise ValidationError(f"grouping {name!r} references unknown strata {unknown}")
        missing = sorted(set(self.labels) - set(mapping))
        if missing:
            raise ValidationError(f"grouping {name!r} does not assign strata {missing}")
        groupings = dict(self.groupings)
        groupings[name] = dict(mapping)
        return replace(self, groupings=groupings)

    def rows(self) -> list[EstimateRow]:
        out = [
            EstimateRow("stratum", lab, int(self.n1g[k]), float(self.mu1[k]), float(self.mu0[k]),
                        float(self.tau[k]), float(self.se[k]))
            for k, lab in enumerate(self.labels)
        ]
        index = {lab: k for k, lab in enumerate(self.labels)}
        for name, mapping in self.groupings.items():
            for grp in sorted(set(mapping.values())):
                cells = [index[lab] for lab, v in mapping.items() if v == grp]
                mu1, mu0, tau, se = self.aggregate(cells)
                out.append(EstimateRow(name, grp, int(self.n1g[cells].sum()), mu1, mu0, tau, se))
        out.append(self.overall())
        return out

    def to_dict(self) -> dict:
        payload = {
            "method": self.method,
            "rows": [r.__dict__ for r in self.rows()],
        }
        if self.bias_correction is not None:
            payload["bias_correction"] = dict(zip(self.labels, self.bias_correction.tolist()))
        return payload

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["level", "group", "n1", "mu1", "mu0", "tau", "se"])
        for r in self.rows():
            writer.writerow([r.level, r.group, r.n1, repr(r.mu1), repr(r.mu0), repr(r.tau), repr(r.se)])
        return buf.getvalue()


# --------------------------------------------------------------------------- weighting


def _outcomes(sample: AnalysisSample, outcomes) -> np.ndarray:
    y = sample.y if outcomes is None else np.asarray(outcomes, dtype=float)
    if y.shape != (sample.n,):
        raise ValidationError("outcomes must have one entry per unit")
    return y


def _cell_means(sample: AnalysisSample, solution: WeightSolution, y: np.ndarray):
    ctrl, trt = solution.control_index, sample.treated_index
    n1g = sample.n1g.astype(float)
    mu1 = np.bincount(sample.strata[trt], weights=y[trt], minlength=sample.K) / n1g
    mu0 = np.bincount(sample.strata[ctrl], weights=solution.gamma * y[ctrl], minlength=sample.K) / n1g
    return mu1, mu0


def sandwich_se(solution: WeightSolution, sample: AnalysisSample, outcomes=None,
                residual_source: str = "group-mean", outcome_model=None, features=None) -> np.ndarray:
    """Fixed-design robust standard error of each stratum effect.

    ``Var = (1/n_1g^2) sum_t (Y - mu1_g)^2 + (1/n_1g^2) sum_c gamma^2 (Y - r)^2``
    where ``r`` is the weighted control mean or the outcome model prediction.
    """
    if residual_source not in RESIDUAL_SOURCES:
        raise ValidationError(f"residual_source must be one of {RESIDUAL_SOURCES}")
    y = _outcomes(sample, outcomes)
    mu1, mu0 = _cell_means(sample, solution, y)
    ctrl, trt = solution.control_index, sample.treated_index
    if residual_source == "outcome-model":
        if outcome_model is None or features is None:
            raise ValidationError("outcome-model residuals need an outcome model and features")
        phi = _feature_values(features)
        ref = outcome_model.predict(phi[ctrl], sample.strata[ctrl])
    else:
        ref = mu0[sample.strata[ctrl]]
    n1g = sample.n1g.astype(float)
    treated_term = np.bincount(sample.strata[trt], weights=(y[trt] - mu1[sample.strata[trt]]) ** 2,
                               minlength=sample.K)
    control_term = np.bincount(sample.strata[ctrl], weights=solution.gamma**2 * (y[ctrl] - ref) ** 2,
                               minlength=sample.K)
    return np.sqrt((treated_term + control_term) / n1g**2)


def weighted_means(solution: WeightSolution, sample: AnalysisSample, outcomes=None) -> EstimateTable:
    y = _outcomes(sample, outcomes)
    mu1, mu0 = _cell_means(sample, solution, y)
    return EstimateTable(
        labels=sample.labels,
        n1g=sample.n1g.copy(),
        mu1=mu1,
        mu0=mu0,
        se=sandwich_se(solution, sample, y),
        method=solution.method if solution.method != "balancing" else f"balancing-{solution.pooling}",
    )


# --------------------------------------------------------------------------- hierarchical GLMs


class _Hierarchical:
    """Design for ``eta_i = a_g + phi_i . (b + d_g)`` (or ``a_g + phi_i . b``).

    Per-stratum parameters ``A[g] = (a_g, d_g)`` (or just ``a_g``) and a shared
    slope ``b``; ``d_g`` and ``b`` carry a ridge penalty, ``a_g`` does not.
    """

    def __init__(self, phi: np.ndarray, strata: np.ndarray, K: int, interacted: bool):
        self.K, self.p = K, phi.shape[1]
        self.interacted = interacted
        self.q = self.p + 1 if interacted else 1
        order = np.argsort(strata, kind="stable")
        self.order = order
        self.phi = np.ascontiguousarray(phi[order])
        counts = np.bincount(strata, minlength=K)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])

    def n_params(self) -> int:
        return self.K * self.q + self.p

    def split(self, theta):
        return theta[: self.K * self.q].reshape(self.K, self.q), theta[self.K * self.q :]

    def eta(self, theta) -> np.ndarray:
        """Linear predictor in sorted row order."""
        A, b = self.split(theta)
        out = np.empty(self.phi.shape[0])
        for g in range(self.K):
            lo, hi = self.offsets[g], self.offsets[g + 1]
            slope = b + A[g, 1:] if self.interacted else b
            out[lo:hi] = A[g, 0] + self.phi[lo:hi] @ slope
        return out

    def penalty(self, theta, pen) -> float:
        A, b = self.split(theta)
        dev = A[:, 1:] if self.interacted else A[:, :0]
        return 0.5 * pen * (float(b @ b) + float(np.sum(dev * dev)))

    def gradient(self, theta, r, pen) -> np.ndarray:
        A, b = self.split(theta)
        gA = np.zeros((self.K, self.q))
        for g in range(self.K):
            lo, hi = self.offsets[g], self.offsets[g + 1]
            rg = r[lo:hi]
            gA[g, 0] = rg.sum()
            if self.interacted:
                gA[g, 1:] = rg @ self.phi[lo:hi] + pen * A[g, 1:]
        gb = r @ self.phi + pen * b
        return np.concatenate([gA.ravel(), gb])

    def newton_step(self, grad, h, pen) -> np.ndarray:
        K, q, p = self.K, self.q, self.p
        blocks = np.zeros((K, q, q))
        couplings = np.zeros((K, q, p))
        corner = pen * np.eye(p)
        for g in range(K):
            lo, hi = self.offsets[g], self.offsets[g + 1]
            Pg = self.phi[lo:hi]
            hg = h[lo:hi]
            hP = Pg * hg[:, None]
            gram = Pg.T @ hP
            corner += gram
            blocks[g, 0, 0] = hg.sum()
            s = hP.sum(axis=0)
            couplings[g, 0] = s
            if self.interacted:
                blocks[g, 0, 1:] = s
                blocks[g, 1:, 0] = s
                blocks[g, 1:, 1:] = gram + pen * np.eye(p)
                couplings[g, 1:] = gram
        gA, gb = self.split(grad)
        d_g, d_b = solve_arrow(blocks, couplings, corner, gA, gb)
        return -np.concatenate([d_g.ravel(), d_b])


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fit_logistic(design: _Hierarchical, y_sorted: np.ndarray, pen: float,
                  tol: float = 1e-8, max_iter: int = 100) -> np.ndarray:
    """Ridge logistic regression by damped Newton; mean log-loss scale."""
    n = y_sorted.size
    theta = np.zeros(design.n_params())
    rate = y_sorted.mean()
    A, _ = design.split(theta)
    A[:, 0] = math.log(rate / (1 - rate))

    def objective(th):
        eta = design.eta(th)
        return float(np.sum(_log1pexp(eta) - y_sorted * eta)) / n + design.penalty(th, pen)

    f = objective(theta)
    gnorm = math.inf
    for _ in range(max_iter):
        eta = design.eta(theta)
        prob = _sigmoid(eta)
        grad = design.gradient(theta, (prob - y_sorted) / n, pen)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            return theta
        step = design.newton_step(grad, prob * (1 - prob) / n, pen)
        slope = float(grad @ step)
        if not slope < 0:
            step, slope = -grad, -gnorm**2
        t = 1.0
        while t > 1e-12:
            trial = theta + t * step
            ft = objective(trial)
            if ft <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        theta, f = trial, ft
    raise ConvergenceError(f"logistic fit did not converge (gradient norm {gnorm:.3g})", gnorm)


def _fit_ridge(design: _Hierarchical, y_sorted: np.ndarray, pen: float) -> np.ndarray:
    n = y_sorted.size
    theta = np.zeros(design.n_params())
    grad = design.gradient(theta, -y_sorted / n, pen)
    theta = design.newton_step(grad, np.full(n, 1.0 / n), pen)
    resid = design.gradient(theta, (design.eta(theta) - y_sorted) / n, pen)
    scale = 1.0 + float(np.abs(y_sorted).mean())
    if not np.all(np.isfinite(theta)) or np.linalg.norm(resid) > 1e-10 * scale:
        if pen <= 0:
            raise ValidationError("singular ridge design; use a positive penalty")
        theta = theta + design.newton_step(resid, np.full(n, 1.0 / n), pen)
    return theta


def _cv_folds(cells: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold ids spread within each cell; singleton cells are never held out (-1)."""
    rng = np.random.default_rng(seed)
    fold = np.full(cells.size, -1)
    start = 0
    for cell in np.unique(cells):
        idx = np.flatnonzero(cells == cell)
        if idx.size < 2:
            continue
        idx = rng.permutation(idx)
        fold[idx] = (start + np.arange(idx.size)) % folds
        start = (start + idx.size) % folds
    return fold


@dataclass(frozen=True, eq=False)
class PropensityModel:
    mode: str
    intercepts: np.ndarray
    slope: np.ndarray
    deviations: np.ndarray
    penalty: float
    folds: int = 5
    cv_losses: Mapping[float, float] = field(default_factory=dict)

    def linear_predictor(self, phi: np.ndarray, strata: np.ndarray) -> np.ndarray:
        slopes = self.slope + self.deviations[strata]
        return self.intercepts[strata] + np.einsum("ij,ij->i", phi, slopes)

    def predict_proba(self, phi: np.ndarray, strata: np.ndarray) -> np.ndarray:
        return _sigmoid(self.linear_predictor(phi, strata))


def _unsort(design: _Hierarchical, values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    out[design.order] = values
    return out


def _propensity_from_theta(design, theta, mode, pen, folds, losses) -> PropensityModel:
    A, b = design.split(theta)
    dev = A[:, 1:].copy() if design.interacted else np.zeros((design.K, design.p))
    return PropensityModel(mode, A[:, 0].copy(), b.copy(), dev, pen, folds, dict(losses))


def fit_propensity(features, sample: AnalysisSample, mode: str = "full_interaction",
                   penalty_grid: Sequence[float] | None = None, folds: int = 5,
                   seed: int = 0) -> PropensityModel:
    """Ridge-penalized logistic propensity model with stratum intercepts.

    ``full_interaction`` gives each stratum slope ``b + d_g`` (both parts
    penalized); ``fixed_effects`` shares ``b``. With more than one candidate
    penalty, the penalty minimizing ``folds``-fold CV log-loss is refit on
    the full sample.
    """
    if mode not in PROPENSITY_MODES:
        raise ValidationError(f"mode must be one of {PROPENSITY_MODES}")
    phi = _feature_values(features)
    if min(sample.n1, sample.n0) < 2:
        raise ValidationError("need at least two units in each treatment class")
    grid = [float(x) for x in (penalty_grid if penalty_grid is not None else DEFAULT_PENALTY_GRID)]
    if not grid or min(grid) < 0:
        raise ValidationError("penalty grid must be nonempty and nonnegative")
    interacted = mode == "full_interaction"
    y = sample.w.astype(float)
    losses: dict[float, float] = {}
    if len(grid) > 1:
        cells = sample.strata * 2 + sample.w
        fold = _cv_folds(cells, folds, seed)
        for pen in grid:
            total = 0.0
            for f in range(folds):
                test = fold == f
                if not test.any():
                    continue
                train = ~test
                design = _Hierarchical(phi[train], sample.strata[train], sample.K, interacted)
                theta = _fit_logistic(design, y[train][design.order], pen)
                model = _propensity_from_theta(design, theta, mode, pen, folds, {})
                eta = model.linear_predictor(phi[test], sample.strata[test])
                total += float(np.sum(_log1pexp(eta) - y[test] * eta))
            losses[pen] = total / int((fold >= 0).sum())
        best = min(grid, key=lambda pen: (losses[pen], -pen))
    else:
        best = grid[0]
    design = _Hierarchical(phi, sample.strata, sample.K, interacted)
    theta = _fit_logistic(design, y[design.order], best)
    return _propensity_from_theta(design, theta, mode, best, folds, losses)


def odds_weights(propensity: np.ndarray, sample: AnalysisSample, normalize: bool = True) -> np.ndarray:
    """Odds-of-treatment weights ``e/(1-e)`` for the controls.

    ``propensity`` holds one probability per control (``sample.control_index``
    order). With ``normalize`` the weights are rescaled to sum to ``n_1g`` in
    each stratum.
    """
    e = np.asarray(propensity, dtype=float)
    if e.shape != (sample.n0,):
        raise ValidationError("need one propensity score per control unit")
    if np.any(e >= 1.0):
        raise OverlapError(f"{int(np.sum(e >= 1.0))} control units have estimated propensity 1")
    gamma = e / (1.0 - e)
    if normalize:
        strata_c = sample.strata[sample.control_index]
        totals = np.bincount(strata_c, weights=gamma, minlength=sample.K)
        if np.any(totals <= 0):
            raise OverlapError("a stratum has zero total odds weight")
        gamma = gamma * (sample.n1g / totals)[strata_c]
    return gamma


def ipw_weights(model: PropensityModel, features, sample: AnalysisSample, normalize: bool = True) -> WeightSolution:
    """IPW weights packaged like a balancing solution so diagnostics apply."""
    phi = _feature_values(features)
    ctrl = sample.control_index
    eta = model.linear_predictor(phi[ctrl], sample.strata[ctrl])
    e = _sigmoid(eta)
    if np.any(e >= 1.0):
        raise OverlapError(f"{int(np.sum(e >= 1.0))} control units have estimated propensity 1")
    gamma = np.exp(eta)
    if normalize:
        strata_c = sample.strata[ctrl]
        totals = np.bincount(strata_c, weights=gamma, minlength=sample.K)
        gamma = gamma * (sample.n1g / totals)[strata_c]
    local, glob = imbalances(gamma, phi, sample)
    return WeightSolution(
        gamma=gamma,
        control_index=ctrl,
        global_imbalance=glob,
        local_imbalance=local,
        pooling=model.mode,
        lam=model.penalty,
        method=f"ipw-{model.mode}",
        message="hajek" if normalize else "raw odds",
    )


# --------------------------------------------------------------------------- outcome models


class OutcomeModel(Protocol):
    def predict(self, phi: np.ndarray, strata: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class RidgeOutcomeModel:
    """Control-outcome ridge regression with stratum intercepts and slopes."""

    intercepts: np.ndarray
    slope: np.ndarray
    deviations: np.ndarray
    penalty: float
    cv_losses: Mapping[float, float] = field(default_factory=dict)

    def predict(self, phi: np.ndarray, strata: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        return self.intercepts[strata] + np.einsum("ij,ij->i", phi, self.slope + self.deviations[strata])


def _ridge_from_theta(design, theta, pen, losses) -> RidgeOutcomeModel:
    A, b = design.split(theta)
    return RidgeOutcomeModel(A[:, 0].copy(), b.copy(), A[:, 1:].copy(), pen, dict(losses))


def fit_outcome_ridge(features, sample: AnalysisSample, penalty_grid: Sequence[float] | None = None,
                      folds: int = 5, seed: int = 0, outcomes=None) -> RidgeOutcomeModel:
    """Fit ``m0(x, g)`` on control units only, choosing the penalty by CV MSE."""
    phi = _feature_values(features)
    y = _outcomes(sample, outcomes)
    ctrl = sample.control_index
    phi_c, y_c, strata_c = phi[ctrl], y[ctrl], sample.strata[ctrl]
    grid = [float(x) for x in (penalty_grid if penalty_grid is not None else DEFAULT_PENALTY_GRID)]
    if not grid or min(grid) < 0:
        raise ValidationError("penalty grid must be nonempty and nonnegative")
    losses: dict[float, float] = {}
    if len(grid) > 1:
        fold = _cv_folds(strata_c, folds, seed)
        for pen in grid:
            sse = 0.0
            for f in range(folds):
                test = fold == f
                if not test.any():
                    continue
                design = _Hierarchical(phi_c[~test], strata_c[~test], sample.K, True)
                theta = _fit_ridge(design, y_c[~test][design.order], pen)
                model = _ridge_from_theta(design, theta, pen, {})
                sse += float(np.sum((model.predict(phi_c[test], strata_c[test]) - y_c[test]) ** 2))
            losses[pen] = sse / int((fold >= 0).sum())
        best = min(grid, key=lambda pen: (losses[pen], -pen))
    else:
        best = grid[0]
    design = _Hierarchical(phi_c, strata_c, sample.K, True)
    theta = _fit_ridge(design, y_c[design.order], best)
    return _ridge_from_theta(design, theta, best, losses)


def augment(estimates: EstimateTable, solution: WeightSolution, outcome_model, features,
            sample: AnalysisSample, outcomes=None) -> EstimateTable:
    """Bias-correct the weighted control means with an outcome model.

    ``bias_g = mean_{treated in g} m0 - (1/n_1g) sum_{controls in g} gamma m0``
    is added to ``mu0_g``; standard errors use model residuals.
    """
    phi = _feature_values(features)
    y = _outcomes(sample, outcomes)
    ctrl, trt = solution.control_index, sample.treated_index
    m_t = outcome_model.predict(phi[trt], sample.strata[trt])
    m_c = outcome_model.predict(phi[ctrl], sample.strata[ctrl])
    n1g = sample.n1g.astype(float)
    bias = (np.bincount(sample.strata[trt], weights=m_t, minlength=sample.K)
            - np.bincount(sample.strata[ctrl], weights=solution.gamma * m_c, minlength=sample.K)) / n1g
    se = sandwich_se(solution, sample, y, "outcome-model", outcome_model, phi)
    return replace(
        estimates,
        mu0=estimates.mu0 + bias,
        se=se,
        bias_correction=bias,
        method=f"{estimates.method}-augmented",
    )


def outcome_model_estimates(outcome_model, features, sample: AnalysisSample, outcomes=None) -> EstimateTable:
    """Plug-in estimator: average of ``m0`` over the treated units of each stratum.

    Standard errors are not available for this estimator and are reported
    as NaN.
    """
    phi = _feature_values(features)
    y = _outcomes(sample, outcomes)
    trt = sample.treated_index
    n1g = sample.n1g.astype(float)
    mu1 = np.bincount(sample.strata[trt], weights=y[trt], minlength=sample.K) / n1g
    mu0 = np.bincount(sample.strata[trt], weights=outcome_model.predict(phi[trt], sample.strata[trt]),
                      minlength=sample.K) / n1g
    return EstimateTable(sample.labels, sample.n1g.copy(), mu1, mu0, np.full(sample.K, np.nan),
                         method="outcome-ridge")


# --------------------------------------------------------------------------- regression baseline


def linear_regression_baseline(features, sample: AnalysisSample, interaction: str = "none",
                               grouping: str | None = None, outcomes=None) -> EstimateTable:
    """OLS of the outcome on treatment (optionally by grouping level) and features.

    With ``interaction='by-grouping'`` the model has one treatment coefficient
    and one intercept per level of ``grouping``. Standard errors are HC1.
    """
    if interaction not in ("none", "by-grouping"):
        raise ValidationError("interaction must be 'none' or 'by-grouping'")
    phi = _feature_values(features)
    y = _outcomes(sample, outcomes)
    n = sample.n
    if interaction == "none":
        levels_of = np.zeros(n, dtype=int)
        labels = ("all",)
    else:
        if grouping is None:
            raise ValidationError("by-grouping regression needs a grouping variable")
        values = sample.grouping_values(grouping)
        labels = tuple(sorted(set(values.tolist())))
        levels_of = np.searchsorted(np.asarray(labels, dtype=object), values)
    L = len(labels)
    onehot = np.zeros((n, L))
    onehot[np.arange(n), levels_of] = 1.0
    treat = onehot * sample.w[:, None]
    n1 = treat.sum(axis=0)
    n0 = onehot.sum(axis=0) - n1
    if np.any(n1 == 0) or np.any(n0 == 0):
        bad = [labels[k] for k in np.flatnonzero((n1 == 0) | (n0 == 0))]
        raise ValidationError(f"no treatment variation in level(s) {bad}; effect undefined")
    X = np.column_stack([treat, onehot, phi])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValidationError("regression design is rank deficient")
    XtX = X.T @ X
    XtX += 1e-12 * np.trace(XtX) / X.shape[1] * np.eye(X.shape[1])
    bread = np.linalg.inv(XtX)
    coef = bread @ (X.T @ y)
    resid = y - X @ coef
    meat = (X * resid[:, None] ** 2).T @ X
    cov = bread @ meat @ bread * n / (n - X.shape[1])
    tau = coef[:L]
    mu1 = (treat * y[:, None]).sum(axis=0) / n1
    tau_cov = cov[:L, :L]
    return EstimateTable(
        labels=labels,
        n1g=n1.astype(int),
        mu1=mu1,
        mu0=mu1 - tau,
        se=np.sqrt(np.diag(tau_cov)),
        method="regression",
        tau_cov=tau_cov,
    )
