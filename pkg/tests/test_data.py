import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import natural_spline_oracle
from pooledweights.data import (
    AnalysisSample,
    FeatureSpec,
    Schema,
    UnitRecord,
    build_features,
    load_csv,
    natural_cubic_basis,
    quantile_knots,
    standardize_columns,
)
from pooledweights.errors import DegenerateKnotsError, ParseError, SchemaError, ValidationError


def write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


SIX_ROWS = [
    (1.0, 1, "a", 0.5),
    (0.0, 0, "a", 0.1),
    (2.0, 0, "a", 0.9),
    (3.0, 1, "b", 1.5),
    (1.0, 0, "b", 1.1),
    (0.5, 1, "b", 2.0),
]


class TestLoadCsv:
    def test_counts_on_six_rows(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", ["y", "w", "g", "x"], SIX_ROWS)
        s = load_csv(path)
        assert s.K == 2 and s.labels == ("a", "b")
        assert s.n == 6 and s.n1 == 3 and s.n0 == 3
        assert s.n1g.tolist() == [1, 2]
        assert s.n0g.tolist() == [2, 1]
        assert s.n1g.sum() == s.n1

    def test_control_only_stratum_is_dropped_and_reported(self, tmp_path):
        rows = SIX_ROWS + [(0.0, 0, "c", 0.3), (1.0, 0, "c", 0.2)]
        s = load_csv(write_csv(tmp_path / "d.csv", ["y", "w", "g", "x"], rows))
        assert s.dropped == ("c",)
        assert s.K == 2 and s.n == 6

    def test_missing_outcome_names_row(self, tmp_path):
        rows = [list(r) for r in SIX_ROWS]
        rows[3][0] = ""
        with pytest.raises(ParseError) as info:
            load_csv(write_csv(tmp_path / "d.csv", ["y", "w", "g", "x"], rows))
        assert info.value.row == 3
        assert "row 3" in str(info.value)

    def test_non_numeric_covariate(self, tmp_path):
        rows = [list(r) for r in SIX_ROWS]
        rows[4][3] = "abc"
        with pytest.raises(ParseError) as info:
            load_csv(write_csv(tmp_path / "d.csv", ["y", "w", "g", "x"], rows))
        assert info.value.row == 4

    def test_missing_column(self, tmp_path):
        path = write_csv(tmp_path / "d.csv", ["y", "w", "grp", "x"], SIX_ROWS)
        with pytest.raises(SchemaError):
            load_csv(path)
        s = load_csv(path, Schema(subgroup="grp"))
        assert s.K == 2

    def test_treated_only_stratum_is_an_error(self, tmp_path):
        rows = SIX_ROWS + [(0.0, 1, "c", 0.3)]
        with pytest.raises(ValidationError, match="without control"):
            load_csv(write_csv(tmp_path / "d.csv", ["y", "w", "g", "x"], rows))

    def test_outcome_column_not_read_on_request(self, tmp_path):
        rows = [list(r) for r in SIX_ROWS]
        rows[0][0] = "not-a-number"
        s = load_csv(write_csv(tmp_path / "d.csv", ["y", "w", "g", "x"], rows), read_outcome=False)
        assert np.all(s.y == 0)

    def test_schema_inline_and_file(self, tmp_path):
        inline = Schema.load('{"outcome": "out", "covariates": ["a"]}')
        assert inline.outcome == "out" and inline.covariates == ("a",)
        p = tmp_path / "schema.json"
        p.write_text(json.dumps({"treatment": "t"}))
        assert Schema.load(str(p)).treatment == "t"
        with pytest.raises(SchemaError):
            Schema.from_mapping({"bogus": 1})


def test_from_units_matches_arrays():
    units = [UnitRecord(float(y), bool(w), g, (x,)) for y, w, g, x in SIX_ROWS]
    s = AnalysisSample.from_units(units)
    assert s.n1g.tolist() == [1, 2]
    with pytest.raises(ValidationError):
        AnalysisSample.from_units([UnitRecord(0.0, True, "a", (1.0,)), UnitRecord(0.0, False, "a", (1.0, 2.0))])


class TestStandardize:
    def test_three_values(self):
        fm = standardize_columns(np.array([[1.0], [2.0], [3.0]]))
        np.testing.assert_allclose(fm.values[:, 0], [-1.224745, 0.0, 1.224745], atol=1e-6)

    def test_constant_column_dropped(self):
        fm = standardize_columns(np.array([[5.0, 1.0], [5.0, 2.0], [5.0, 4.0]]), ["c", "v"])
        assert fm.names == ("v",)
        assert fm.dropped == ("c",)

    def test_deterministic(self):
        raw = np.random.default_rng(0).normal(size=(50, 3))
        a, b = standardize_columns(raw), standardize_columns(raw)
        assert a.values.tobytes() == b.values.tobytes()

    def test_round_trip(self):
        raw = np.random.default_rng(1).normal(size=(40, 3)) * [1, 10, 0.1] + [0, 5, -2]
        fm = standardize_columns(raw)
        assert np.array_equal(fm.transform(raw), fm.values)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (12, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_moments(self, raw):
        fm = standardize_columns(raw)
        if fm.p == 0:
            return
        assert np.all(np.abs(fm.values.mean(axis=0)) <= 1e-10)
        assert np.all(np.abs(fm.values.var(axis=0) - 1) <= 1e-8)

    def test_row_permutation_equivariance(self):
        raw = np.random.default_rng(2).normal(size=(30, 2))
        perm = np.random.default_rng(3).permutation(30)
        np.testing.assert_allclose(standardize_columns(raw[perm]).values, standardize_columns(raw).values[perm],
                                   atol=1e-14)


class TestSpline:
    def test_linear_function_in_span(self):
        x = np.linspace(0, 1, 60)
        B = natural_cubic_basis(x, 5)
        coef, *_ = np.linalg.lstsq(np.column_stack([np.ones_like(x), B]), x, rcond=None)
        resid = x - np.column_stack([np.ones_like(x), B]) @ coef
        assert np.abs(resid).max() <= 1e-10

    def test_linear_beyond_boundary(self):
        rng = np.random.default_rng(4)
        knots = quantile_knots(rng.normal(size=300), 5)
        h = 0.01
        for x0 in (knots[0] - 1.0, knots[-1] + 1.0, knots[-1] + 5.0):
            pts = np.array([x0 - h, x0, x0 + h])
            B = natural_cubic_basis(pts, knots=knots)
            second = B[0] - 2 * B[1] + B[2]
            assert np.abs(second).max() <= 1e-6

    def test_matches_truncated_power_oracle(self):
        rng = np.random.default_rng(5)
        knots = quantile_knots(rng.gamma(2.0, size=500), 6)
        grid = np.linspace(-1, 12, 101)
        np.testing.assert_allclose(natural_cubic_basis(grid, knots=knots), natural_spline_oracle(grid, knots),
                                   atol=1e-8, rtol=0)

    def test_shape_and_quantile_knots(self):
        x = np.arange(100.0)
        knots = quantile_knots(x, 5)
        np.testing.assert_allclose(knots, np.quantile(x, [0, 0.25, 0.5, 0.75, 1.0]))
        assert natural_cubic_basis(x, 5).shape == (100, 4)

    def test_degenerate_knots(self):
        with pytest.raises(DegenerateKnotsError):
            natural_cubic_basis(np.array([1.0, 1.0, 2.0, 2.0]), 3)
        with pytest.raises(DegenerateKnotsError):
            natural_cubic_basis(np.arange(10.0), 2)


class TestBuildFeatures:
    @pytest.fixture
    def sample(self):
        rng = np.random.default_rng(6)
        n = 60
        g = np.repeat(["s1", "s2", "s3"], 20)
        w = np.tile([1, 0, 0], 20)
        X = np.column_stack([rng.normal(size=n), rng.gamma(2, size=n), np.full(n, 3.0)])
        region = np.where(g == "s1", "north", "south")
        return AnalysisSample.from_arrays(rng.normal(size=n), w, g, X, ["a", "b", "const"],
                                          groupings={"region": region})

    def test_raw_only_is_standardized_copy(self, sample):
        fm = build_features(sample)
        ref = standardize_columns(sample.X, sample.covariate_names)
        assert fm.names == ("a", "b")
        np.testing.assert_array_equal(fm.values, ref.values)

    def test_interaction_columns(self, sample):
        fm = build_features(sample, FeatureSpec(include_raw=False, standardize=False,
                                                interactions=((("a",), "region"),)))
        assert fm.names == ("a:region=north", "a:region=south")
        north = sample.grouping_values("region") == "north"
        np.testing.assert_array_equal(fm.values[:, 0], sample.X[:, 0] * north)
        np.testing.assert_array_equal(fm.values[:, 1], sample.X[:, 0] * ~north)

    def test_column_count(self, sample):
        spec = FeatureSpec.from_mapping({"splines": [["b", 5]], "interactions": [[["a", "b"], "region"]]})
        fm = build_features(sample, spec)
        assert fm.p == 3 + (5 - 1) + 2 * 2 - 1
        kinds = [p["kind"] for p in json.loads(fm.provenance_json())]
        assert kinds.count("spline") == 4 and kinds.count("interaction") == 4

    def test_spec_validation(self, sample):
        with pytest.raises(SchemaError):
            build_features(sample, FeatureSpec(splines=(("zzz", 4),)))
        with pytest.raises(DegenerateKnotsError):
            build_features(sample, FeatureSpec(splines=(("a", 2),)))
        with pytest.raises(SchemaError):
            build_features(sample, FeatureSpec(interactions=((("a",), "nope"),)))

    def test_subset_refit_equals_direct(self, sample):
        keep = np.flatnonzero(sample.strata != 0)
        sub = AnalysisSample.from_arrays(sample.y[keep], sample.w[keep], sample.stratum_labels()[keep],
                                         sample.X[keep], sample.covariate_names)
        direct = standardize_columns(sample.X[keep], sample.covariate_names)
        np.testing.assert_array_equal(build_features(sub).values, direct.values)
