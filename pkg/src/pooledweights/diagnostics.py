"""Balance, overlap and precision diagnostics for a set of control weights."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .data import AnalysisSample, FeatureMatrix
from .errors import DegenerateStratumError, ValidationError
from .solver import WeightSolution, _feature_values, imbalances

HISTOGRAM_BINS = 20


def _names(features, p: int) -> tuple[str, ...]:
    if isinstance(features, FeatureMatrix):
        return tuple(features.names)
    return tuple(f"f{j}" for j in range(p))


def uniform_weights(sample: AnalysisSample) -> np.ndarray:
    """Pre-weighting baseline: every control in ``g`` gets ``n_1g / n_0g``."""
    strata_c = sample.strata[sample.control_index]
    return (sample.n1g / sample.n0g)[strata_c].astype(float)


@dataclass(frozen=True, eq=False)
class BalanceReport:
    """Absolute imbalances in standardized-mean-difference units.

    ``local[g, j]`` is normalized by ``n_1g`` and ``global_[j]`` by ``n_1``;
    the ``pre_`` fields hold the same quantities under uniform weights.
    """

    feature_names: tuple[str, ...]
    labels: tuple[str, ...]
    local: np.ndarray
    global_: np.ndarray
    pre_local: np.ndarray
    pre_global: np.ndarray

    @property
    def local_norm(self) -> np.ndarray:
        return np.linalg.norm(self.local, axis=1)

    @property
    def pre_local_norm(self) -> np.ndarray:
        return np.linalg.norm(self.pre_local, axis=1)

    @property
    def global_norm(self) -> float:
        return float(np.linalg.norm(self.global_))

    def max_global(self) -> float:
        return float(self.global_.max(initial=0.0))

    def to_dict(self) -> dict:
        names = self.feature_names
        return {
            "global": dict(zip(names, self.global_.tolist())),
            "global_unweighted": dict(zip(names, self.pre_global.tolist())),
            "local": {lab: dict(zip(names, self.local[k].tolist())) for k, lab in enumerate(self.labels)},
            "local_unweighted": {
                lab: dict(zip(names, self.pre_local[k].tolist())) for k, lab in enumerate(self.labels)
            },
            "local_norm": dict(zip(self.labels, self.local_norm.tolist())),
            "local_norm_unweighted": dict(zip(self.labels, self.pre_local_norm.tolist())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Tidy rows: scope, stratum, feature, weighted, unweighted."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scope", "stratum", "feature", "weighted", "unweighted"])
        for j, name in enumerate(self.feature_names):
            writer.writerow(["global", "", name, repr(float(self.global_[j])), repr(float(self.pre_global[j]))])
        for k, lab in enumerate(self.labels):
            for j, name in enumerate(self.feature_names):
                writer.writerow(["local", lab, name, repr(float(self.local[k, j])), repr(float(self.pre_local[k, j]))])
        return buf.getvalue()


def balance_report(solution: WeightSolution, features, sample: AnalysisSample) -> BalanceReport:
    phi = _feature_values(features)
    if phi.shape[0] != sample.n:
        raise ValidationError("feature rows do not match the sample")
    if solution.gamma.shape != (sample.n0,):
        raise ValidationError("weights do not match the sample's control units")
    local, glob = imbalances(solution.gamma, phi, sample)
    pre_local, pre_glob = imbalances(uniform_weights(sample), phi, sample)
    return BalanceReport(
        feature_names=_names(features, phi.shape[1]),
        labels=sample.labels,
        local=np.abs(local),
        global_=np.abs(glob),
        pre_local=np.abs(pre_local),
        pre_global=np.abs(pre_glob),
    )


def kish_ess(weights: np.ndarray) -> float:
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    weights = np.asarray(weights, dtype=float)
    top = float(np.abs(weights).max()) if weights.size else 0.0
    if top == 0.0:
        raise DegenerateStratumError("all weights are zero")
    # rescale so tiny weights do not underflow when squared
    scaled = weights / top
    return float(scaled.sum() ** 2 / np.dot(scaled, scaled))


@dataclass(frozen=True, eq=False)
class OverlapReport:
    """Per-stratum weight dispersion.

    Histograms are over normalized weights ``gamma / n_1g`` with shared edges;
    exact zeros are excluded from the bins and counted in ``zeros``.
    """

    labels: tuple[str, ...]
    n0g: np.ndarray
    ess: np.ndarray
    ess_overall: float
    threshold: float
    fraction_above: np.ndarray
    max_normalized_weight: np.ndarray
    bin_edges: np.ndarray
    histogram: np.ndarray
    zeros: np.ndarray

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "ess_overall": self.ess_overall,
            "bin_edges": self.bin_edges.tolist(),
            "strata": {
                lab: {
                    "n0": int(self.n0g[k]),
                    "ess": float(self.ess[k]),
                    "fraction_above_threshold": float(self.fraction_above[k]),
                    "max_normalized_weight": float(self.max_normalized_weight[k]),
                    "histogram": self.histogram[k].tolist(),
                    "zeros": int(self.zeros[k]),
                }
                for k, lab in enumerate(self.labels)
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Tidy rows: stratum, metric, value (histogram bins as ``bin_<i>``)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stratum", "metric", "value"])
        writer.writerow(["overall", "ess", repr(self.ess_overall)])
        for k, lab in enumerate(self.labels):
            writer.writerow([lab, "n0", int(self.n0g[k])])
            writer.writerow([lab, "ess", repr(float(self.ess[k]))])
            writer.writerow([lab, "fraction_above_threshold", repr(float(self.fraction_above[k]))])
            writer.writerow([lab, "max_normalized_weight", repr(float(self.max_normalized_weight[k]))])
            writer.writerow([lab, "zeros", int(self.zeros[k])])
            for b, count in enumerate(self.histogram[k]):
                writer.writerow([lab, f"bin_{b}", int(count)])
        return buf.getvalue()


def ess(solution: WeightSolution, sample: AnalysisSample, threshold: float = 0.001) -> OverlapReport:
    """Effective sample size and weight-concentration summaries.

    A control counts as "above threshold" when ``gamma_i / n_1g > threshold``.
    """
    gamma = np.asarray(solution.gamma, dtype=float)
    if gamma.shape != (sample.n0,):
        raise ValidationError("weights do not match the sample's control units")
    strata_c = sample.strata[sample.control_index]
    K = sample.K
    sums = np.bincount(strata_c, weights=gamma, minlength=K)
    squares = np.bincount(strata_c, weights=gamma * gamma, minlength=K)
    dead = np.flatnonzero(squares == 0)
    if dead.size:
        raise DegenerateStratumError(
            f"all weights are zero in stratum {sample.labels[dead[0]]!r}"
        )
    normalized = gamma / sample.n1g[strata_c]
    above = np.bincount(strata_c, weights=(normalized > threshold).astype(float), minlength=K)
    max_norm = np.zeros(K)
    np.maximum.at(max_norm, strata_c, normalized)
    top = float(normalized.max())
    edges = np.linspace(0.0, top, HISTOGRAM_BINS + 1)
    positive = normalized > 0
    bins = np.clip(np.searchsorted(edges, normalized[positive], side="right") - 1, 0, HISTOGRAM_BINS - 1)
    hist = np.zeros((K, HISTOGRAM_BINS), dtype=int)
    np.add.at(hist, (strata_c[positive], bins), 1)
    zeros = np.bincount(strata_c[~positive], minlength=K)
    return OverlapReport(
        labels=sample.labels,
        n0g=sample.n0g.copy(),
        ess=sums**2 / squares,
        ess_overall=kish_ess(gamma),
        threshold=threshold,
        fraction_above=above / sample.n0g,
        max_normalized_weight=max_norm,
        bin_edges=edges,
        histogram=hist,
        zeros=zeros,
    )
