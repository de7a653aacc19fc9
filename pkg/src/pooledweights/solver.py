"""Partially pooled approximate balancing weights, solved through the dual.

Primal problem, for control weights ``gamma``::

    min   sum_g [ 1/2 ||E_g||^2 + lambda_g/2 * sum_{i in g, W_i=0} gamma_i^2 ]
    s.t.  sum_{W_i=0} gamma_i phi_i = sum_{W_i=1} phi_i        (exact global balance)
          sum_{i in g, W_i=0} gamma_i = n_1g                    (fine balance)
          gamma_i >= 0

where ``E_g = sum_{i in g, W_i=0} gamma_i phi_i - sum_{i in g, W_i=1} phi_i`` is
the local imbalance in stratum ``g``. Its Lagrangian dual, minimized over
``(alpha, beta, mu_beta)``::

    sum_g [ 1/(2 lambda_g) sum_{i in g, W_i=0} [alpha_g + beta_g . phi_i]_+^2
            - sum_{i in g, W_i=1} (alpha_g + beta_g . phi_i)
            + 1/2 ||beta_g - mu_beta||^2 ]

has optimal value equal to minus the primal optimum, and the weights are
recovered as ``gamma_i = [alpha_g + beta_g . phi_i]_+ / lambda_g``.

Pooling modes:

* ``partial``: the problem above.
* ``full``: ``beta_g`` forced equal to ``mu_beta`` (drops the local-imbalance
  term; minimum-variance weights with exact global balance).
* ``none``: no global constraint; ``beta_g`` shrinks towards zero and the
  problem separates by stratum.

The dual is piecewise quadratic and C1, so it is minimized with a semismooth
Newton method whose Hessian has block-arrow structure (see ``_linalg``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import optimize, sparse

from . import kernels
from ._linalg import solve_arrow
from .data import AnalysisSample, FeatureMatrix
from .errors import (
    ConstraintViolationError,
    InfeasibleBalanceError,
    NumericError,
    ValidationError,
)

POOLINGS = ("partial", "full", "none")
LAMBDA_RULES = ("stratum", "treated", "constant")

_ARMIJO = 1e-4
_ROUNDOFF = 1e-13
_FEASIBILITY_CHECK_AT = 50


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``lambda_rule`` maps the common ``lam`` to per-stratum penalties:
    ``stratum`` gives ``lam / n_g`` (stratum size), ``treated`` gives
    ``lam / n_1g`` and ``constant`` gives ``lam`` everywhere.
    ``sbw_delta`` is informational only: full pooling corresponds to stable
    balancing weights with an exact (delta = 0) constraint.
    """

    lam: float = 1e4
    pooling: str = "partial"
    lambda_rule: str = "stratum"
    max_iterations: int = 200
    gradient_tolerance: float = 1e-8
    global_balance_tolerance: float = 1e-6
    sbw_delta: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValidationError("lambda must be positive")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}")
        if self.lambda_rule not in LAMBDA_RULES:
            raise ValidationError(f"lambda_rule must be one of {LAMBDA_RULES}")
        if not (self.gradient_tolerance > 0 and self.global_balance_tolerance > 0):
            raise ValidationError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be at least 1")
        if self.sbw_delta < 0:
            raise ValidationError("sbw_delta must be nonnegative")

    def stratum_lambdas(self, sample: AnalysisSample) -> np.ndarray:
        if self.lambda_rule == "stratum":
            return self.lam / sample.ng.astype(float)
        if self.lambda_rule == "treated":
            return self.lam / sample.n1g.astype(float)
        return np.full(sample.K, float(self.lam))


@dataclass
class DualParams:
    alpha: np.ndarray
    beta: np.ndarray
    mu_beta: np.ndarray

    @classmethod
    def zeros(cls, K: int, p: int) -> "DualParams":
        return cls(np.zeros(K), np.zeros((K, p)), np.zeros(p))

    def copy(self) -> "DualParams":
        return DualParams(self.alpha.copy(), self.beta.copy(), self.mu_beta.copy())

    def scaled(self, factor: float) -> "DualParams":
        return DualParams(self.alpha * factor, self.beta * factor, self.mu_beta * factor)

    def to_vector(self, pooling: str) -> np.ndarray:
        if pooling == "full":
            return np.concatenate([self.alpha, self.mu_beta])
        if pooling == "none":
            return np.concatenate([self.alpha, self.beta.ravel()])
        return np.concatenate([self.alpha, self.beta.ravel(), self.mu_beta])

    @classmethod
    def from_vector(cls, vec: np.ndarray, K: int, p: int, pooling: str) -> "DualParams":
        alpha = vec[:K].copy()
        if pooling == "full":
            mu = vec[K : K + p].copy()
            return cls(alpha, np.tile(mu, (K, 1)), mu)
        beta = vec[K : K + K * p].reshape(K, p).copy()
        mu = np.zeros(p) if pooling == "none" else vec[K + K * p :].copy()
        return cls(alpha, beta, mu)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "mu_beta": self.mu_beta.tolist(),
        }


@dataclass(frozen=True, eq=False)
class WeightSolution:
    """Control weights plus the certificates of how they were obtained.

    ``gamma`` is aligned with ``control_index`` (rows of the sample with
    ``W = 0``, ascending); treated units carry weight one implicitly.
    Imbalances are signed and normalized: ``local_imbalance[g]`` by ``n_1g``,
    ``global_imbalance`` by ``n_1``.
    """

    gamma: np.ndarray
    control_index: np.ndarray
    global_imbalance: np.ndarray
    local_imbalance: np.ndarray
    dual: DualParams | None = None
    primal_value: float = math.nan
    dual_value: float = math.nan
    converged: bool = True
    iterations: int = 0
    gradient_norm: float = math.nan
    pooling: str = "partial"
    lam: float = math.nan
    method: str = "balancing"
    message: str = ""

    @property
    def duality_gap(self) -> float:
        return abs(self.primal_value + self.dual_value)

    def unit_weights(self, n: int) -> np.ndarray:
        """Length-``n`` vector: ``gamma`` on controls, one on treated units."""
        out = np.ones(n)
        out[self.control_index] = self.gamma
        return out

    def to_dict(self, sample: AnalysisSample, features: FeatureMatrix | None = None) -> dict:
        names = list(features.names) if features is not None else [
            f"f{j}" for j in range(self.global_imbalance.size)
        ]
        rows = sample.row_ids[self.control_index]
        return {
            "method": self.method,
            "pooling": self.pooling,
            "lambda": self.lam,
            "weights": {str(int(r)): float(v) for r, v in zip(rows, self.gamma)},
            "dual": self.dual.to_dict() if self.dual is not None else None,
            "imbalance": {
                "global": dict(zip(names, self.global_imbalance.tolist())),
                "local": {
                    lab: dict(zip(names, self.local_imbalance[k].tolist()))
                    for k, lab in enumerate(sample.labels)
                },
            },
            "convergence": {
                "converged": bool(self.converged),
                "iterations": int(self.iterations),
                "gradient_norm": float(self.gradient_norm),
                "primal_value": float(self.primal_value),
                "dual_value": float(self.dual_value),
                "message": self.message,
            },
        }

    def to_json(self, sample: AnalysisSample, features: FeatureMatrix | None = None) -> str:
        return json.dumps(self.to_dict(sample, features), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict, sample: AnalysisSample) -> "WeightSolution":
        """Rebuild weights from :meth:`to_dict` output for the same sample."""
        by_row = {int(k): float(v) for k, v in payload["weights"].items()}
        ctrl = sample.control_index
        try:
            gamma = np.array([by_row[int(r)] for r in sample.row_ids[ctrl]])
        except KeyError as exc:
            raise ValidationError(f"weights file lacks control row {exc}") from None
        glob = payload.get("imbalance", {}).get("global", {})
        loc = payload.get("imbalance", {}).get("local", {})
        dual = payload.get("dual")
        conv = payload.get("convergence", {})
        return cls(
            gamma=gamma,
            control_index=ctrl,
            global_imbalance=np.array(list(glob.values()), dtype=float),
            local_imbalance=np.array(
                [list(loc[lab].values()) for lab in sample.labels], dtype=float
            ) if loc else np.zeros((sample.K, 0)),
            dual=DualParams(
                np.array(dual["alpha"]), np.array(dual["beta"]), np.array(dual["mu_beta"])
            ) if dual else None,
            primal_value=conv.get("primal_value", math.nan),
            dual_value=conv.get("dual_value", math.nan),
            converged=conv.get("converged", True),
            iterations=conv.get("iterations", 0),
            gradient_norm=conv.get("gradient_norm", math.nan),
            pooling=payload.get("pooling", "partial"),
            lam=payload.get("lambda", math.nan),
            method=payload.get("method", "balancing"),
        )


def _feature_values(features) -> np.ndarray:
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=float)
    if values.ndim != 2:
        raise ValidationError("features must be a 2-d matrix")
    return values


def imbalances(gamma: np.ndarray, features, sample: AnalysisSample) -> tuple[np.ndarray, np.ndarray]:
    """Signed (local, global) imbalance of control weights ``gamma``.

    Local rows are normalized by ``n_1g``, the global vector by ``n_1``.
    """
    phi = _feature_values(features)
    K, p = sample.K, phi.shape[1]
    ctrl, trt = sample.control_index, sample.treated_index
    E = np.zeros((K, p))
    np.add.at(E, sample.strata[ctrl], gamma[:, None] * phi[ctrl])
    np.subtract.at(E, sample.strata[trt], phi[trt])
    return E / sample.n1g[:, None], E.sum(axis=0) / sample.n1


class _Problem:
    """Sorted, preprocessed view of one balancing problem."""

    def __init__(self, features, sample: AnalysisSample, config: SolverConfig):
        phi = _feature_values(features)
        if phi.shape[0] != sample.n:
            raise ValidationError(
                f"feature matrix has {phi.shape[0]} rows but the sample has {sample.n} units"
            )
        self.sample = sample
        self.config = config
        self.pooling = config.pooling
        self.K, self.p = sample.K, phi.shape[1]
        ctrl = sample.control_index
        self.order = np.argsort(sample.strata[ctrl], kind="stable")
        self.ctrl_sorted = ctrl[self.order]
        self.phi_c = np.ascontiguousarray(phi[self.ctrl_sorted], dtype=np.float64)
        self.offsets = np.concatenate([[0], np.cumsum(sample.n0g)]).astype(np.int64)
        trt = sample.treated_index
        self.S = np.zeros((self.K, self.p))
        np.add.at(self.S, sample.strata[trt], phi[trt])
        self.n1g = sample.n1g.astype(float)
        self.lam_g = config.stratum_lambdas(sample)
        self.inv_lam = np.ascontiguousarray(1.0 / self.lam_g)
        self.feature_names = list(features.names) if isinstance(features, FeatureMatrix) else None

    # -- parameter plumbing

    def dim(self) -> int:
        K, p = self.K, self.p
        return {"partial": K + K * p + p, "full": K + p, "none": K + K * p}[self.pooling]

    def unpack(self, theta: np.ndarray) -> DualParams:
        return DualParams.from_vector(theta, self.K, self.p, self.pooling)

    def check_params(self, params: DualParams) -> None:
        if params.alpha.shape != (self.K,):
            raise ValidationError(f"alpha must have shape ({self.K},)")
        if self.pooling != "full" and params.beta.shape != (self.K, self.p):
            raise ValidationError(f"beta must have shape ({self.K}, {self.p})")
        if self.pooling != "none" and params.mu_beta.shape != (self.p,):
            raise ValidationError(f"mu_beta must have shape ({self.p},)")

    def effective(self, params: DualParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        alpha = np.ascontiguousarray(params.alpha, dtype=float)
        if self.pooling == "full":
            mu = np.asarray(params.mu_beta, dtype=float)
            return alpha, np.ascontiguousarray(np.tile(mu, (self.K, 1))), mu
        beta = np.ascontiguousarray(params.beta, dtype=float)
        mu = np.zeros(self.p) if self.pooling == "none" else np.asarray(params.mu_beta, dtype=float)
        return alpha, beta, mu

    # -- objective

    def _shrink(self, beta, mu) -> float:
        if self.pooling == "full":
            return 0.0
        dev = beta - mu
        return 0.5 * float(np.sum(dev * dev))

    def value(self, params: DualParams) -> float:
        alpha, beta, mu = self.effective(params)
        hinge = kernels.hinge_value(self.phi_c, self.offsets, alpha, beta, self.inv_lam)
        linear = float(self.n1g @ alpha) + float(np.sum(beta * self.S))
        return hinge - linear + self._shrink(beta, mu)

    def value_grad(self, params: DualParams):
        alpha, beta, mu = self.effective(params)
        hinge, ga, gb, u = kernels.hinge_terms(self.phi_c, self.offsets, alpha, beta, self.inv_lam)
        linear = float(self.n1g @ alpha) + float(np.sum(beta * self.S))
        val = hinge - linear + self._shrink(beta, mu)
        ga = ga - self.n1g
        gb = gb - self.S
        if self.pooling == "full":
            grad = DualParams(ga, np.zeros_like(gb), gb.sum(axis=0))
        elif self.pooling == "none":
            grad = DualParams(ga, gb + beta, np.zeros(self.p))
        else:
            grad = DualParams(ga, gb + (beta - mu), self.K * mu - beta.sum(axis=0))
        return val, grad, u

    # -- Newton step

    def _active_moments(self, u: np.ndarray):
        """Per-stratum count, sum and Gram matrix over rows with u > 0.

        A stratum with no active row borrows its largest-u row so that every
        block stays positive definite; the step is still a descent direction.
        """
        K, p = self.K, self.p
        counts = np.zeros(K)
        sums = np.zeros((K, p))
        grams = np.zeros((K, p, p))
        for g in range(K):
            lo, hi = self.offsets[g], self.offsets[g + 1]
            ug = u[lo:hi]
            act = ug > 0
            if not act.any():
                act = np.zeros_like(act)
                act[int(np.argmax(ug))] = True
            Z = self.phi_c[lo:hi][act]
            counts[g] = Z.shape[0]
            sums[g] = Z.sum(axis=0)
            grams[g] = Z.T @ Z
        return counts, sums, grams

    def newton_direction(self, grad: DualParams, u: np.ndarray, gnorm: float) -> np.ndarray:
        K, p = self.K, self.p
        counts, sums, grams = self._active_moments(u)
        c = self.inv_lam
        if self.pooling == "full":
            blocks = (c * counts)[:, None, None]
            couplings = (c[:, None] * sums)[:, None, :]
            corner = np.einsum("k,kpq->pq", c, grams)
            scale = max(1.0, float(np.trace(corner)) / max(p, 1))
            corner = corner + (1e-10 * scale + 1e-6 * min(gnorm, 1.0) * scale) * np.eye(p)
            d_g, d_b = solve_arrow(blocks, couplings, corner, grad.alpha[:, None], grad.mu_beta)
            return -np.concatenate([d_g[:, 0], d_b])
        q = p + 1
        # gradient-scaled damping keeps the model Hessian nonsingular when
        # strata have too few active rows to pin down alpha_g and mu_beta
        damp = 1e-10 + 1e-6 * min(gnorm, 1.0)
        blocks = np.empty((K, q, q))
        blocks[:, 0, 0] = c * counts
        blocks[:, 0, 1:] = c[:, None] * sums
        blocks[:, 1:, 0] = c[:, None] * sums
        blocks[:, 1:, 1:] = c[:, None, None] * grams + np.eye(p)
        blocks += damp * np.eye(q)
        rhs = np.concatenate([grad.alpha[:, None], grad.beta], axis=1)
        if self.pooling == "none":
            d_g, _ = solve_arrow(blocks, None, None, rhs, None)
            return -np.concatenate([d_g[:, 0], d_g[:, 1:].ravel()])
        couplings = np.zeros((K, q, p))
        couplings[:, 1:, :] = -np.eye(p)
        corner = (K + damp) * np.eye(p)
        d_g, d_b = solve_arrow(blocks, couplings, corner, rhs, grad.mu_beta)
        return -np.concatenate([d_g[:, 0], d_g[:, 1:].ravel(), d_b])

    # -- recovery

    def polish_alpha(self, params: DualParams) -> DualParams:
        """Set each alpha_g so that the stratum weights sum to n_1g exactly."""
        alpha, beta, mu = self.effective(params)
        new_alpha = alpha.copy()
        for g in range(self.K):
            lo, hi = self.offsets[g], self.offsets[g + 1]
            v = np.sort(self.phi_c[lo:hi] @ beta[g])[::-1]
            target = self.n1g[g] * self.lam_g[g]
            k = np.arange(1, v.size + 1)
            cand = (target - np.cumsum(v)) / k
            nxt = np.append(v[1:], -np.inf)
            ok = (cand + v > 0) & (cand + nxt <= 0)
            new_alpha[g] = cand[int(np.argmax(ok))] if ok.any() else alpha[g]
        out = params.copy()
        out.alpha = new_alpha
        return out

    def gamma(self, params: DualParams) -> np.ndarray:
        """Weights in ``sample.control_index`` order."""
        alpha, beta, _ = self.effective(params)
        gamma_sorted = np.empty(self.phi_c.shape[0])
        for g in range(self.K):
            lo, hi = self.offsets[g], self.offsets[g + 1]
            ug = self.phi_c[lo:hi] @ beta[g] + alpha[g]
            gamma_sorted[lo:hi] = np.maximum(ug, 0.0) / self.lam_g[g]
        out = np.empty_like(gamma_sorted)
        out[self.order] = gamma_sorted
        return out

    def primal_value(self, gamma: np.ndarray) -> float:
        strata_c = self.sample.strata[self.sample.control_index]
        variance = 0.5 * float(np.sum(self.lam_g[strata_c] * gamma**2))
        if self.pooling == "full":
            return variance
        phi = self.phi_c[np.argsort(self.order)]
        E = -self.S.copy()
        np.add.at(E, strata_c, gamma[:, None] * phi)
        return 0.5 * float(np.sum(E * E)) + variance

    def feature_name(self, j: int) -> str:
        return self.feature_names[j] if self.feature_names else f"feature {j}"


def check_feasibility(features, sample: AnalysisSample, tolerance: float = 1e-6):
    """Phase-one LP: can nonnegative fine-balanced weights balance globally?

    Returns ``(feasible, worst_feature_index, worst_violation)`` with the
    violation in standardized (per treated unit) units.
    """
    phi = _feature_values(features)
    ctrl, trt = sample.control_index, sample.treated_index
    n0, p, K = ctrl.size, phi.shape[1], sample.K
    target = phi[trt].sum(axis=0)
    strata_c = sample.strata[ctrl]
    balance = sparse.hstack(
        [sparse.csr_matrix(phi[ctrl].T), sparse.eye(p), -sparse.eye(p)], format="csr"
    )
    sums = sparse.hstack(
        [
            sparse.csr_matrix((np.ones(n0), (strata_c, np.arange(n0))), shape=(K, n0)),
            sparse.csr_matrix((K, 2 * p)),
        ],
        format="csr",
    )
    A = sparse.vstack([balance, sums], format="csr")
    b = np.concatenate([target, sample.n1g.astype(float)])
    cost = np.concatenate([np.zeros(n0), np.ones(2 * p)])
    res = optimize.linprog(cost, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if res.status != 0:
        raise NumericError(f"feasibility LP failed: {res.message}")
    slack = (res.x[n0 : n0 + p] - res.x[n0 + p :]) / sample.n1
    worst = int(np.argmax(np.abs(slack)))
    return bool(np.abs(slack).max() <= tolerance), worst, float(abs(slack[worst]))


def dual_objective(params: DualParams, features, sample: AnalysisSample, config: SolverConfig) -> float:
    prob = _Problem(features, sample, config)
    prob.check_params(params)
    return prob.value(params)


def dual_gradient(params: DualParams, features, sample: AnalysisSample, config: SolverConfig) -> DualParams:
    """Exact gradient of :func:`dual_objective`.

    Under full pooling the ``mu_beta`` entry is the total derivative through
    the tied ``beta_g`` and ``beta`` is zero; under no pooling ``mu_beta`` is
    zero.
    """
    prob = _Problem(features, sample, config)
    prob.check_params(params)
    return prob.value_grad(params)[1]


def primal_objective(gamma: np.ndarray, features, sample: AnalysisSample, config: SolverConfig,
                     sum_tolerance: float = 1e-8) -> float:
    """Canonical primal value of ``gamma``; raises if a constraint is violated."""
    prob = _Problem(features, sample, config)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (sample.n0,):
        raise ValidationError(f"gamma must have one entry per control ({sample.n0})")
    violated = []
    if np.any(gamma < 0):
        violated.append(f"nonnegativity ({int(np.sum(gamma < 0))} negative weights)")
    sums = np.bincount(sample.strata[sample.control_index], weights=gamma, minlength=sample.K)
    bad = np.abs(sums - sample.n1g) > sum_tolerance * np.maximum(1.0, sample.n1g)
    for k in np.flatnonzero(bad):
        violated.append(f"stratum {sample.labels[k]!r} weights sum to {sums[k]:.10g}, not {sample.n1g[k]}")
    if config.pooling != "none":
        _, glob = imbalances(gamma, features, sample)
        for j in np.flatnonzero(np.abs(glob) > config.global_balance_tolerance):
            violated.append(f"global balance on {prob.feature_name(j)} off by {glob[j]:.3g}")
    if violated:
        raise ConstraintViolationError("; ".join(violated), violated)
    return prob.primal_value(gamma)


def solve(features, sample: AnalysisSample, config: SolverConfig | None = None,
          warm_start: DualParams | None = None) -> WeightSolution:
    """Minimize the dual from zero (or ``warm_start``) and recover weights.

    Raises :class:`InfeasibleBalanceError` when no nonnegative fine-balanced
    weights achieve exact global balance.
    """
    config = config or SolverConfig()
    prob = _Problem(features, sample, config)
    if warm_start is None:
        params = DualParams.zeros(prob.K, prob.p)
    else:
        prob.check_params(warm_start)
        params = warm_start.copy()
    theta = params.to_vector(prob.pooling)

    converged = False
    message = ""
    feasibility_checked = False
    gnorm = math.inf
    it = 0
    for it in range(1, config.max_iterations + 1):
        params = prob.unpack(theta)
        val, grad, u = prob.value_grad(params)
        if not math.isfinite(val):
            raise NumericError("dual objective is not finite")
        gvec = grad.to_vector(prob.pooling)
        gnorm = float(np.linalg.norm(gvec))
        if gnorm <= config.gradient_tolerance * (1.0 + abs(val)) and (
            prob.pooling == "none"
            or np.abs(_global_residual(grad, prob.pooling)).max() <= 1e-2 * config.global_balance_tolerance * prob.n1g.sum()
        ):
            converged = True
            break
        if it == _FEASIBILITY_CHECK_AT and prob.pooling != "none":
            _raise_if_infeasible(features, sample, prob, config)
            feasibility_checked = True
        step = prob.newton_direction(grad, u, gnorm)
        trial = _line_search(prob, theta, val, gvec, step)
        if trial is None:
            trial = _line_search(prob, theta, val, gvec, -gvec / max(gnorm, 1.0))
        if trial is None:
            message = "line search failed"
            break
        theta = trial
    else:
        message = f"no convergence in {config.max_iterations} iterations"

    if not converged and prob.pooling != "none" and not feasibility_checked:
        _raise_if_infeasible(features, sample, prob, config)

    params = prob.polish_alpha(prob.unpack(theta))
    val, grad, _ = prob.value_grad(params)
    gnorm = float(np.linalg.norm(grad.to_vector(prob.pooling)))
    gamma = prob.gamma(params)
    local, glob = imbalances(gamma, features, sample)
    if converged and prob.pooling != "none":
        worst = int(np.argmax(np.abs(glob)))
        if abs(glob[worst]) > config.global_balance_tolerance:
            converged = False
            message = (
                f"global imbalance {glob[worst]:.3g} on {prob.feature_name(worst)} "
                f"exceeds tolerance {config.global_balance_tolerance:g}"
            )
    return WeightSolution(
        gamma=gamma,
        control_index=sample.control_index,
        global_imbalance=glob,
        local_imbalance=local,
        dual=params,
        primal_value=prob.primal_value(gamma),
        dual_value=val,
        converged=converged,
        iterations=it,
        gradient_norm=gnorm,
        pooling=prob.pooling,
        lam=config.lam,
        message=message or "converged",
    )


def _global_residual(grad: DualParams, pooling: str) -> np.ndarray:
    """Raw global imbalance of the weights implied by the current iterate."""
    if pooling == "full":
        return grad.mu_beta
    return grad.beta.sum(axis=0) + grad.mu_beta


def _line_search(prob: _Problem, theta, val, gvec, step, max_halvings: int = 60):
    """Armijo backtracking; ``None`` if no acceptable step was found.

    Near the optimum of a stiff problem the predicted decrease can fall below
    the rounding error of the objective. A step whose value change is within
    that noise is then accepted if it reduces the gradient norm instead.
    """
    slope = float(gvec @ step)
    if not slope < 0:
        return None
    noise = _ROUNDOFF * (1.0 + abs(val))
    gnorm = float(np.linalg.norm(gvec))
    t = 1.0
    for _ in range(max_halvings):
        trial = theta + t * step
        if np.array_equal(trial, theta):
            return None
        trial_val = prob.value(prob.unpack(trial))
        if abs(trial_val - val) <= noise:
            trial_grad = prob.value_grad(prob.unpack(trial))[1].to_vector(prob.pooling)
            if np.linalg.norm(trial_grad) < (1.0 - _ARMIJO) * gnorm:
                return trial
        elif trial_val <= val + _ARMIJO * t * slope:
            return trial
        t *= 0.5
    return None


def _raise_if_infeasible(features, sample, prob: _Problem, config: SolverConfig) -> None:
    feasible, worst, violation = check_feasibility(features, sample, config.global_balance_tolerance)
    if not feasible:
        name = prob.feature_name(worst)
        raise InfeasibleBalanceError(
            f"exact global balance is infeasible; worst feature {name} "
            f"(minimum achievable imbalance {violation:.4g})",
            feature=name,
            violation=violation,
        )


@dataclass(frozen=True)
class SweepPoint:
    lam: float
    local_imbalance: float
    global_imbalance: float
    ess: float
    converged: bool


def sweep_lambda(features, sample: AnalysisSample, grid: Sequence[float],
                 config: SolverConfig | None = None) -> list[SweepPoint]:
    """Solve along an ascending lambda grid with warm starts.

    ``local_imbalance`` is ``sqrt(sum_g ||E_g||^2)`` in raw (unnormalized)
    feature sums, ``global_imbalance`` the L2 norm of the normalized global
    imbalance and ``ess`` the Kish effective sample size of all controls.
    """
    grid = [float(x) for x in grid]
    if not grid:
        raise ValidationError("lambda grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValidationError("lambda grid must be strictly ascending")
    config = config or SolverConfig()
    out = []
    warm = None
    prev = None
    for lam in grid:
        cfg = replace(config, lam=lam)
        start = warm.scaled(lam / prev) if warm is not None else None
        sol = solve(features, sample, cfg, warm_start=start)
        E = sol.local_imbalance * sample.n1g[:, None]
        out.append(
            SweepPoint(
                lam=lam,
                local_imbalance=float(np.sqrt(np.sum(E * E))),
                global_imbalance=float(np.linalg.norm(sol.global_imbalance)),
                ess=float(sol.gamma.sum() ** 2 / np.sum(sol.gamma**2)),
                converged=sol.converged,
            )
        )
        warm, prev = sol.dual, lam
    return out
