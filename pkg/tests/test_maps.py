import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferlab.maps import (
    COS_SHIFT,
    Branch,
    Observable,
    PiecewiseAffineMap1D,
    eval_observable,
    load_observable_csv,
    make_double_tent,
    make_doubling,
    make_identity_2d,
    make_product_doubling,
    make_skew_expanding_2d,
    map_from_name,
    observable_from_name,
    piecewise_from_arrays,
)


class TestDoubleTent:
    def test_first_branch(self):
        assert make_double_tent(2.1)(0.1) == pytest.approx(0.21, abs=1e-15)

    def test_second_branch_at_quarter(self):
        assert make_double_tent(2.1)(0.25) == pytest.approx(0.525, abs=1e-15)

    def test_third_branch_left_endpoint(self):
        assert make_double_tent(2.0)(0.5) == 1.0

    def test_last_point_maps_to_one(self):
        assert make_double_tent(2.1)(1.0) == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("a", [1.0, 0.5, -2.0])
    def test_rejects_non_expanding(self, a):
        with pytest.raises(ValueError, match="expanding"):
            make_double_tent(a)

    def test_rejects_large_slope(self):
        with pytest.raises(ValueError, match="leave"):
            make_double_tent(4.01)

    def test_slope_four_is_allowed(self):
        T = make_double_tent(4.0)
        assert T.gamma_min == 4.0

    def test_gamma_min_stored(self):
        assert make_double_tent(2.1).gamma_min == 2.1

    @given(st.floats(0.0, 1.0))
    def test_symmetry(self, x):
        # T(1 - x) = 1 - T(x) away from the branch junctions
        T = make_double_tent(2.1)
        if min(abs(x - c) for c in (0.25, 0.5, 0.75)) < 1e-9:
            return
        assert T(1.0 - x) == pytest.approx(1.0 - T(x), abs=1e-12)

    @given(st.floats(1.0001, 4.0), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20))
    def test_image_stays_in_unit_interval(self, a, xs):
        y = make_double_tent(a)(np.array(xs))
        assert np.all(y >= -1e-12) and np.all(y <= 1 + 1e-12)

    def test_vectorised_matches_scalar(self):
        T = make_double_tent(2.1)
        xs = np.linspace(0, 1, 101)
        assert np.array_equal(T(xs), np.array([T(x) for x in xs]))


class TestPiecewiseValidation:
    def test_gap_between_branches(self):
        with pytest.raises(ValueError, match="share an endpoint"):
            PiecewiseAffineMap1D((Branch(0.0, 0.4, 2.0, 0.0), Branch(0.5, 1.0, 2.0, -1.0)))

    def test_must_cover_unit_interval(self):
        with pytest.raises(ValueError, match="start at 0"):
            PiecewiseAffineMap1D((Branch(0.0, 0.5, 2.0, 0.0),))

    def test_escaping_branch_is_named(self):
        with pytest.raises(ValueError, match="branch 1"):
            piecewise_from_arrays([0, 0.5, 1], [2.0, 2.0], [0.0, -0.5])

    def test_contracting_branch(self):
        with pytest.raises(ValueError, match="not expanding"):
            piecewise_from_arrays([0, 0.5, 1], [2.0, 0.5], [0.0, 0.5])

    def test_from_arrays_length_mismatch(self):
        with pytest.raises(ValueError):
            piecewise_from_arrays([0, 1], [2.0, 2.0], [0.0])

    def test_doubling(self):
        T = make_doubling()
        assert T(0.3) == pytest.approx(0.6)
        assert T(0.75) == pytest.approx(0.5)

    def test_branch_index_last_branch_owns_one(self):
        T = make_double_tent(2.1)
        assert list(T.branch_index(np.array([0.0, 0.25, 0.5, 0.75, 1.0]))) == [0, 1, 2, 3, 3]


class TestObservables:
    def test_sin(self):
        assert eval_observable(Observable("sin2pi"), 0.25) == pytest.approx(1.0)

    def test_indicator_split(self):
        g = Observable("indicator_half")
        assert g(0.5) == 1.0
        assert g(0.50001) == -1.0

    def test_linear(self):
        assert Observable("linear")(0.0) == -1.0

    def test_cos_shift(self):
        assert Observable("cos2pi")(0.0) == pytest.approx(1.0 - COS_SHIFT)

    def test_outside_domain(self):
        with pytest.raises(ValueError):
            Observable("sin2pi")(1.5)

    def test_table_outside_domain(self):
        g = Observable("table", values=(1.0, 2.0))
        with pytest.raises(ValueError):
            g(-0.1)
        assert g(0.2) == 1.0 and g(0.7) == 2.0 and g(1.0) == 2.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown observable kind"):
            Observable("tan")

    def test_custom_expression(self):
        g = observable_from_name("x**2")
        assert g.kind == "custom"
        assert g(0.5) == pytest.approx(0.25)

    def test_custom_has_no_builtins(self):
        g = Observable("custom", expression="__import__('os')")
        with pytest.raises(Exception):
            g(0.5)

    @pytest.mark.parametrize("alias,kind", [("indicator", "indicator_half"), ("cos", "cos2pi"), ("sin", "sin2pi")])
    def test_aliases(self, alias, kind):
        assert observable_from_name(alias).kind == kind

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown observable"):
            observable_from_name("bogus")

    def test_csv_roundtrip(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text("cell,value\n1,0.5\n2,-0.25\n3,1e-3\n")
        g = load_observable_csv(p)
        assert g.values == (0.5, -0.25, 1e-3)

    def test_csv_missing_cell(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text("1,0.5\n3,1.0\n")
        with pytest.raises(ValueError, match="cells must be exactly"):
            load_observable_csv(p)

    def test_csv_duplicate_cell(self, tmp_path):
        p = tmp_path / "g.csv"
        p.write_text("1,0.5\n1,1.0\n")
        with pytest.raises(ValueError, match="duplicate"):
            load_observable_csv(p)

    @given(st.floats(0.0, 1.0))
    def test_indicator_is_plus_minus_one(self, x):
        assert Observable("indicator_half")(x) == (1.0 if x <= 0.5 else -1.0)


class TestMaps2D:
    def test_product_doubling(self):
        T = make_product_doubling()
        assert np.allclose(T(np.array([[0.3, 0.8]])), [[0.6, 0.6]])

    def test_identity(self):
        pts = np.random.default_rng(0).uniform(size=(10, 2))
        assert np.array_equal(make_identity_2d()(pts), pts)

    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30))
    @settings(max_examples=50)
    def test_skew_lands_in_square(self, pts):
        img = make_skew_expanding_2d()(np.array(pts))
        assert np.all((img >= 0) & (img <= 1))

    def test_registry(self):
        assert map_from_name("double-tent", {"a": 2.5}).params == {"a": 2.5}
        assert map_from_name("identity", dim=2).name
        with pytest.raises(ValueError, match="unknown"):
            map_from_name("logistic")
