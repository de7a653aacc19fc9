"""Analysis samples and covariate feature maps.

An :class:`AnalysisSample` holds outcome, treatment, stratum and covariates as
flat numpy arrays. Strata are re-coded to dense integer ids ``0..K-1`` in
sorted label order; strata without treated units are dropped (and reported),
strata without controls are rejected.

Features are built by :func:`build_features`: raw covariates, natural cubic
spline blocks and covariate-by-grouping interactions, then standardized to
mean zero and population variance one.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DegenerateKnotsError, ParseError, SchemaError, ValidationError

DEFAULT_KNOTS = 5


@dataclass(frozen=True)
class UnitRecord:
    outcome: float
    treated: bool
    subgroup: str
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class Schema:
    """Column roles for CSV ingestion.

    ``covariates=None`` means every column not named elsewhere is a numeric
    covariate. ``groupings`` are extra categorical columns, read as strings,
    that may be used for interaction features or aggregation.
    """

    outcome: str = "y"
    treatment: str = "w"
    subgroup: str = "g"
    covariates: tuple[str, ...] | None = None
    groupings: tuple[str, ...] = ()

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "Schema":
        known = {"outcome", "treatment", "subgroup", "covariates", "groupings"}
        extra = set(mapping) - known
        if extra:
            raise SchemaError(f"unknown schema keys: {sorted(extra)}")
        kwargs = dict(mapping)
        if kwargs.get("covariates") is not None:
            kwargs["covariates"] = tuple(kwargs["covariates"])
        if "groupings" in kwargs:
            kwargs["groupings"] = tuple(kwargs["groupings"])
        return cls(**kwargs)

    @classmethod
    def load(cls, source: str | Path | None) -> "Schema":
        """Read a schema from a JSON file path or an inline JSON object."""
        if source is None:
            return cls()
        text = str(source)
        if text.lstrip().startswith("{"):
            return cls.from_mapping(json.loads(text))
        return cls.from_mapping(json.loads(Path(text).read_text(encoding="utf-8")))


@dataclass(frozen=True, eq=False)
class AnalysisSample:
    y: np.ndarray
    w: np.ndarray
    strata: np.ndarray
    labels: tuple[str, ...]
    X: np.ndarray
    covariate_names: tuple[str, ...]
    groupings: Mapping[str, np.ndarray] = field(default_factory=dict)
    dropped: tuple[str, ...] = ()
    row_ids: np.ndarray | None = None
    subgroup_name: str = "g"

    def __post_init__(self):
        n = self.y.shape[0]
        if self.X.ndim != 2 or self.X.shape[0] != n:
            raise ValidationError("covariate matrix must have one row per unit")
        if self.X.shape[1] != len(self.covariate_names):
            raise ValidationError("covariate names do not match covariate columns")
        if self.w.shape != (n,) or self.strata.shape != (n,):
            raise ValidationError("treatment and stratum vectors must have one entry per unit")
        if not np.all(np.isfinite(self.y)):
            raise ValidationError("outcomes must be finite")
        if not np.all(np.isfinite(self.X)):
            raise ValidationError("covariates must be finite")
        K = len(self.labels)
        if n and (self.strata.min() < 0 or self.strata.max() >= K):
            raise ValidationError("stratum ids must be dense in 0..K-1")
        n1g = np.bincount(self.strata[self.w], minlength=K)
        n0g = np.bincount(self.strata[~self.w], minlength=K)
        if np.any(n1g == 0):
            bad = [self.labels[k] for k in np.flatnonzero(n1g == 0)]
            raise ValidationError(f"strata without treated units: {bad}")
        if np.any(n0g == 0):
            bad = [self.labels[k] for k in np.flatnonzero(n0g == 0)]
            raise ValidationError(
                f"strata without control units (control mean undefined): {bad}"
            )
        if self.row_ids is None:
            object.__setattr__(self, "row_ids", np.arange(n))
        for arr in (self.y, self.w, self.strata, self.X, self.row_ids):
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def K(self) -> int:
        return len(self.labels)

    @property
    def n1(self) -> int:
        return int(self.w.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def n1g(self) -> np.ndarray:
        return np.bincount(self.strata[self.w], minlength=self.K)

    @property
    def n0g(self) -> np.ndarray:
        return np.bincount(self.strata[~self.w], minlength=self.K)

    @property
    def ng(self) -> np.ndarray:
        return np.bincount(self.strata, minlength=self.K)

    @property
    def control_index(self) -> np.ndarray:
        return np.flatnonzero(~self.w)

    @property
    def treated_index(self) -> np.ndarray:
        return np.flatnonzero(self.w)

    def counts(self) -> dict[str, dict[str, int]]:
        n1g, n0g = self.n1g, self.n0g
        return {
            lab: {"n1": int(n1g[k]), "n0": int(n0g[k])} for k, lab in enumerate(self.labels)
        }

    def with_outcomes(self, y: np.ndarray) -> "AnalysisSample":
        return AnalysisSample(
            y=np.asarray(y, dtype=float).copy(),
            w=self.w.copy(),
            strata=self.strata.copy(),
            labels=self.labels,
            X=self.X.copy(),
            covariate_names=self.covariate_names,
            groupings=dict(self.groupings),
            dropped=self.dropped,
            row_ids=self.row_ids.copy(),
            subgroup_name=self.subgroup_name,
        )

    def take(self, rows: np.ndarray) -> "AnalysisSample":
        """Rows ``rows`` (repeats allowed), keeping stratum coding and labels."""
        rows = np.asarray(rows)
        return AnalysisSample(
            y=self.y[rows].copy(),
            w=self.w[rows].copy(),
            strata=self.strata[rows].copy(),
            labels=self.labels,
            X=self.X[rows].copy(),
            covariate_names=self.covariate_names,
            groupings={k: v[rows].copy() for k, v in self.groupings.items()},
            dropped=self.dropped,
            row_ids=self.row_ids[rows].copy(),
            subgroup_name=self.subgroup_name,
        )

    def stratum_labels(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=object)[self.strata]

    def grouping_values(self, name: str) -> np.ndarray:
        if name == self.subgroup_name:
            return self.stratum_labels().astype(str)
        try:
            return self.groupings[name]
        except KeyError:
            raise SchemaError(f"unknown grouping variable {name!r}") from None

    @classmethod
    def from_arrays(
        cls,
        y: Sequence[float],
        w: Sequence[bool],
        subgroup: Sequence,
        X: np.ndarray,
        covariate_names: Sequence[str] | None = None,
        groupings: Mapping[str, Sequence] | None = None,
        row_ids: Sequence[int] | None = None,
        subgroup_name: str = "g",
    ) -> "AnalysisSample":
        """Validate raw arrays, drop strata with no treated units, code strata."""
        y = np.asarray(y, dtype=float)
        w = np.asarray(w)
        if w.dtype != bool:
            if not np.all(np.isin(w, (0, 1))):
                raise ValidationError("treatment must be coded 0/1")
            w = w.astype(bool)
        labels = np.asarray([str(s) for s in subgroup], dtype=object)
        if np.any(labels == ""):
            raise ValidationError("subgroup labels must be non-empty")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if covariate_names is None:
            covariate_names = [f"x{j + 1}" for j in range(X.shape[1])]
        row_ids = np.arange(len(y)) if row_ids is None else np.asarray(row_ids)
        groupings = {k: np.asarray([str(v) for v in vals], dtype=object) for k, vals in (groupings or {}).items()}

        uniq = sorted(set(labels.tolist()))
        treated_labels = set(labels[w].tolist())
        dropped = tuple(lab for lab in uniq if lab not in treated_labels)
        keep = np.isin(labels, list(treated_labels))
        kept_labels = tuple(lab for lab in uniq if lab in treated_labels)
        code = {lab: k for k, lab in enumerate(kept_labels)}
        strata = np.fromiter((code[lab] for lab in labels[keep]), dtype=np.intp, count=int(keep.sum()))
        return cls(
            y=y[keep].copy(),
            w=w[keep].copy(),
            strata=strata,
            labels=kept_labels,
            X=X[keep].copy(),
            covariate_names=tuple(covariate_names),
            groupings={k: v[keep].copy() for k, v in groupings.items()},
            dropped=dropped,
            row_ids=row_ids[keep].copy(),
            subgroup_name=subgroup_name,
        )

    @classmethod
    def from_units(cls, units: Iterable[UnitRecord], covariate_names: Sequence[str] | None = None) -> "AnalysisSample":
        units = list(units)
        if not units:
            raise ValidationError("no units")
        lengths = {len(u.covariates) for u in units}
        if len(lengths) != 1:
            raise ValidationError("covariate vectors differ in length across units")
        return cls.from_arrays(
            y=[u.outcome for u in units],
            w=[bool(u.treated) for u in units],
            subgroup=[u.subgroup for u in units],
            X=np.array([u.covariates for u in units], dtype=float).reshape(len(units), -1),
            covariate_names=covariate_names,
        )


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"row {row}: column {column!r} has non-numeric value {text!r}", row=row) from None
    if not np.isfinite(value):
        raise ParseError(f"row {row}: column {column!r} is not finite", row=row)
    return value


def load_csv(path: str | Path, schema: Schema | None = None, read_outcome: bool = True) -> AnalysisSample:
    """Read a CSV (one header row, UTF-8, '.' decimals) into a validated sample.

    Row numbers in error messages are 0-based data rows (header excluded).
    With ``read_outcome=False`` the outcome column is neither required nor
    parsed and outcomes are set to zero, so weights built from the result
    cannot depend on outcomes.
    """
    schema = schema or Schema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    for role in ("outcome", "treatment", "subgroup") if read_outcome else ("treatment", "subgroup"):
        col = getattr(schema, role)
        if col not in header:
            raise SchemaError(f"missing {role} column {col!r}")
    for col in schema.groupings:
        if col not in header:
            raise SchemaError(f"missing grouping column {col!r}")
    reserved = {schema.outcome, schema.treatment, schema.subgroup, *schema.groupings}
    if schema.covariates is None:
        covs = [c for c in header if c not in reserved]
    else:
        covs = list(schema.covariates)
        missing = [c for c in covs if c not in header]
        if missing:
            raise SchemaError(f"missing covariate columns {missing}")
    if not covs:
        raise SchemaError("schema names no covariate columns")

    n = len(rows)
    y = np.empty(n)
    w = np.empty(n, dtype=bool)
    g = []
    X = np.empty((n, len(covs)))
    groupings = {c: [] for c in schema.groupings}
    for i, rec in enumerate(rows):
        if read_outcome:
            raw_y = (rec.get(schema.outcome) or "").strip()
            if raw_y == "":
                raise ParseError(f"row {i}: missing outcome value", row=i)
            y[i] = _parse_float(raw_y, schema.outcome, i)
        else:
            y[i] = 0.0
        raw_w = (rec.get(schema.treatment) or "").strip()
        wv = _parse_float(raw_w, schema.treatment, i) if raw_w else None
        if wv not in (0.0, 1.0):
            raise ParseError(f"row {i}: treatment must be 0 or 1, got {raw_w!r}", row=i)
        w[i] = wv == 1.0
        lab = (rec.get(schema.subgroup) or "").strip()
        if not lab:
            raise ParseError(f"row {i}: empty subgroup label", row=i)
        g.append(lab)
        for j, c in enumerate(covs):
            X[i, j] = _parse_float((rec.get(c) or "").strip(), c, i)
        for c in schema.groupings:
            groupings[c].append((rec.get(c) or "").strip())
    return AnalysisSample.from_arrays(
        y, w, g, X, covariate_names=covs, groupings=groupings, subgroup_name=schema.subgroup
    )


# --------------------------------------------------------------------------- features


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Immutable transformed covariates with the parameters that produced them.

    ``kept`` indexes the columns of the pre-standardization matrix that
    survived (constant columns are dropped); ``means``/``scales`` are aligned
    with ``kept``.
    """

    values: np.ndarray
    names: tuple[str, ...]
    means: np.ndarray
    scales: np.ndarray
    kept: np.ndarray
    dropped: tuple[str, ...] = ()
    provenance: tuple[dict, ...] = ()

    def __post_init__(self):
        for arr in (self.values, self.means, self.scales, self.kept):
            arr.flags.writeable = False

    @property
    def p(self) -> int:
        return int(self.values.shape[1])

    def transform(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        return (raw[:, self.kept] - self.means) / self.scales

    def take(self, rows: np.ndarray) -> "FeatureMatrix":
        """Row subset without refitting standardization."""
        return FeatureMatrix(
            values=self.values[np.asarray(rows)].copy(),
            names=self.names,
            means=self.means.copy(),
            scales=self.scales.copy(),
            kept=self.kept.copy(),
            dropped=self.dropped,
            provenance=self.provenance,
        )

    def provenance_json(self) -> str:
        return json.dumps(list(self.provenance), indent=2, sort_keys=True)


def standardize_columns(raw: np.ndarray, names: Sequence[str] | None = None, provenance: Sequence[dict] | None = None) -> FeatureMatrix:
    """Center and scale columns to mean 0, population variance 1.

    Constant columns are dropped and listed in ``FeatureMatrix.dropped``.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 2 or raw.size == 0:
        raise ValidationError("cannot standardize an empty matrix")
    if not np.all(np.isfinite(raw)):
        raise ValidationError("non-finite values in feature matrix")
    if names is None:
        names = [f"f{j}" for j in range(raw.shape[1])]
    names = list(names)
    # constant up to floating-point resolution counts as constant
    spread = raw.std(axis=0)
    constant = (np.ptp(raw, axis=0) == 0) | (spread <= 1e-12 * np.abs(raw).max(axis=0))
    kept = np.flatnonzero(~constant)
    means = raw[:, kept].mean(axis=0)
    scales = spread[kept]
    values = (raw[:, kept] - means) / scales
    prov = tuple(provenance[j] for j in kept) if provenance is not None else tuple(
        {"name": names[j], "kind": "raw", "source": names[j]} for j in kept
    )
    return FeatureMatrix(
        values=values,
        names=tuple(names[j] for j in kept),
        means=means,
        scales=scales,
        kept=kept,
        dropped=tuple(names[j] for j in np.flatnonzero(constant)),
        provenance=prov,
    )


def quantile_knots(x: np.ndarray, knot_count: int = DEFAULT_KNOTS) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if knot_count < 3:
        raise DegenerateKnotsError("a natural cubic spline needs at least 3 knots")
    if np.unique(x).size < knot_count:
        raise DegenerateKnotsError(
            f"{np.unique(x).size} distinct values cannot support {knot_count} knots"
        )
    knots = np.quantile(x, np.linspace(0.0, 1.0, knot_count))
    if np.any(np.diff(knots) <= 0):
        raise DegenerateKnotsError("sample quantiles collide; use fewer knots")
    return knots


def natural_cubic_basis(x: np.ndarray, knot_count: int = DEFAULT_KNOTS, knots: np.ndarray | None = None) -> np.ndarray:
    """Truncated-power natural cubic spline basis without the intercept.

    Returns ``len(x) x (K - 1)`` columns: ``x`` itself followed by the ``K - 2``
    functions ``d_k(x) - d_{K-1}(x)``, where
    ``d_k(x) = ((x - t_k)_+^3 - (x - t_K)_+^3) / (t_K - t_k)``. Each column is
    linear beyond the boundary knots. Knots default to equally spaced sample
    quantiles of ``x``.
    """
    x = np.asarray(x, dtype=float)
    if knots is None:
        knots = quantile_knots(x, knot_count)
    knots = np.asarray(knots, dtype=float)
    if knots.size < 3 or np.any(np.diff(knots) <= 0):
        raise DegenerateKnotsError("knots must be strictly increasing, at least 3")
    last = knots[-1]
    cubes = np.maximum(x[:, None] - knots[None, :-1], 0.0) ** 3
    tail = np.maximum(x - last, 0.0) ** 3
    d = (cubes - tail[:, None]) / (last - knots[:-1])
    return np.column_stack([x, d[:, :-1] - d[:, -1:]])


@dataclass(frozen=True)
class FeatureSpec:
    standardize: bool = True
    include_raw: bool = True
    splines: tuple[tuple[str, int], ...] = ()
    interactions: tuple[tuple[tuple[str, ...], str], ...] = ()

    @classmethod
    def from_mapping(cls, mapping: Mapping) -> "FeatureSpec":
        return cls(
            standardize=bool(mapping.get("standardize", True)),
            include_raw=bool(mapping.get("include_raw", True)),
            splines=tuple((str(c), int(k)) for c, k in mapping.get("splines", ())),
            interactions=tuple(
                (tuple(cols), str(grp)) for cols, grp in mapping.get("interactions", ())
            ),
        )

    def validate(self, sample: AnalysisSample) -> None:
        cols = set(sample.covariate_names)
        for col, k in self.splines:
            if col not in cols:
                raise SchemaError(f"spline column {col!r} is not a covariate")
            if k < 3:
                raise DegenerateKnotsError(f"spline on {col!r} needs knot_count >= 3, got {k}")
        for group_cols, grp in self.interactions:
            for col in group_cols:
                if col not in cols:
                    raise SchemaError(f"interaction column {col!r} is not a covariate")
            sample.grouping_values(grp)
        if not self.include_raw and not self.splines and not self.interactions:
            raise ValidationError("feature spec produces no columns")


def build_features(sample: AnalysisSample, spec: FeatureSpec | None = None) -> FeatureMatrix:
    spec = spec or FeatureSpec()
    spec.validate(sample)
    col_index = {c: j for j, c in enumerate(sample.covariate_names)}
    blocks: list[np.ndarray] = []
    names: list[str] = []
    prov: list[dict] = []
    if spec.include_raw:
        blocks.append(sample.X)
        names.extend(sample.covariate_names)
        prov.extend({"name": c, "kind": "raw", "source": c} for c in sample.covariate_names)
    for col, k in spec.splines:
        x = sample.X[:, col_index[col]]
        knots = quantile_knots(x, k)
        basis = natural_cubic_basis(x, knots=knots)
        blocks.append(basis)
        for j in range(basis.shape[1]):
            nm = f"{col}_ns{j + 1}"
            names.append(nm)
            prov.append({"name": nm, "kind": "spline", "source": col, "knots": knots.tolist()})
    for group_cols, grp in spec.interactions:
        levels_of = sample.grouping_values(grp)
        levels = sorted(set(levels_of.tolist()))
        for col in group_cols:
            x = sample.X[:, col_index[col]]
            for lev in levels:
                mask = levels_of == lev
                blocks.append((x * mask)[:, None])
                nm = f"{col}:{grp}={lev}"
                names.append(nm)
                prov.append({"name": nm, "kind": "interaction", "source": f"{col}*{grp}"})
    raw = np.column_stack(blocks) if blocks else np.empty((sample.n, 0))
    if spec.standardize:
        return standardize_columns(raw, names, prov)
    p = raw.shape[1]
    return FeatureMatrix(
        values=raw.copy(),
        names=tuple(names),
        means=np.zeros(p),
        scales=np.ones(p),
        kept=np.arange(p),
        provenance=tuple(prov),
    )
