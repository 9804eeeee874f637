from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferlab.maps import Observable, make_double_tent, make_doubling, make_identity_2d, make_product_doubling, make_skew_expanding_2d
from transferlab.ulam import (
    CubePartition,
    build_ulam_1d,
    build_ulam_2d,
    cell_midpoints,
    cells_in_interval,
    discretize_observable,
)


def exact_ulam(branches, n):
    """Ulam matrix in rational arithmetic.

    ``branches`` holds ``(left, right, slope, intercept)`` as Fractions.
    """
    P = [[F(0)] * n for _ in range(n)]
    for i in range(n):
        c0, c1 = F(i, n), F(i + 1, n)
        for left, right, slope, icpt in branches:
            a, b = max(left, c0), min(right, c1)
            if a >= b:
                continue
            y0, y1 = sorted((slope * a + icpt, slope * b + icpt))
            for j in range(n):
                ov = min(y1, F(j + 1, n)) - max(y0, F(j, n))
                if ov > 0:
                    P[i][j] += ov / abs(slope) * n
    return P


def tent_branches(a):
    a = F(a)
    return [
        (F(0), F(1, 4), a, F(0)),
        (F(1, 4), F(1, 2), -a, a / 2),
        (F(1, 2), F(3, 4), -a, 1 + a / 2),
        (F(3, 4), F(1), a, 1 - a),
    ]


class TestExact1D:
    def test_doubling_two_cells(self):
        P = build_ulam_1d(make_doubling(), 2).matrix.toarray()
        assert np.allclose(P, 0.5, atol=1e-15, rtol=0)

    def test_tent_four_cells_first_row(self):
        P = build_ulam_1d(make_double_tent(2.1), 4).matrix.toarray()
        assert np.allclose(P[0], [10 / 21, 10 / 21, 1 / 21, 0], atol=1e-15, rtol=0)

    def test_oracle_agrees_on_first_row(self):
        row = exact_ulam(tent_branches(F(21, 10)), 4)[0]
        assert row == [F(10, 21), F(10, 21), F(1, 21), F(0)]

    @pytest.mark.parametrize("n", [3, 7, 16, 40, 101])
    def test_matches_rational_oracle(self, n):
        P = build_ulam_1d(make_double_tent(2.1), n).matrix.toarray()
        Q = np.array(exact_ulam(tent_branches(F(21, 10)), n), dtype=float)
        assert np.max(np.abs(P - Q)) < 1e-13

    @pytest.mark.parametrize("a", ["1.5", "2.5", "3.3", "4"])
    def test_other_slopes_match_oracle(self, a):
        n = 24
        P = build_ulam_1d(make_double_tent(float(a)), n).matrix.toarray()
        Q = np.array(exact_ulam(tent_branches(F(a)), n), dtype=float)
        assert np.max(np.abs(P - Q)) < 1e-13

    def test_single_cell(self):
        assert build_ulam_1d(make_double_tent(2.1), 1).matrix.toarray().tolist() == [[1.0]]

    @pytest.mark.parametrize("n", [0, -3])
    def test_rejects_bad_n(self, n):
        with pytest.raises(ValueError):
            build_ulam_1d(make_double_tent(2.1), n)

    @given(st.floats(1.01, 4.0), st.integers(2, 300))
    @settings(max_examples=60, deadline=None)
    def test_row_stochastic_and_local(self, a, n):
        T = make_double_tent(a)
        P = build_ulam_1d(T, n)
        assert P.matrix.data.min() >= 0
        assert np.max(np.abs(P.row_sums() - 1)) <= 1e-12
        assert P.nnz_per_row().max() <= 2 * len(T.branches) + 1

    @given(st.integers(2, 200))
    @settings(max_examples=30, deadline=None)
    def test_doubling_preserves_lebesgue(self, n):
        # Lebesgue measure is invariant, so the uniform vector is a left fixed point
        P = build_ulam_1d(make_doubling(), n).matrix
        assert np.allclose(P.T @ np.ones(n), np.ones(n), atol=1e-12)

    @pytest.mark.parametrize("n", [50, 200])
    def test_refinement_tower(self, n):
        # the coarse matrix is the conditional expectation of the fine one
        T = make_double_tent(2.1)
        Pc = build_ulam_1d(T, n).matrix.toarray()
        Pf = build_ulam_1d(T, 2 * n).matrix.toarray()
        agg = Pf.reshape(2 * n, n, 2).sum(axis=2)
        coarse = agg.reshape(n, 2, n).mean(axis=1)
        assert np.max(np.abs(coarse - Pc)) < 1e-12

    def test_meta(self):
        P = build_ulam_1d(make_double_tent(2.1), 10)
        assert P.meta["assembly"] == "exact-1d"
        assert P.meta["params"] == {"a": 2.1}
        assert P.partition.n == 10


class TestSampled2D:
    def test_product_doubling_uniform(self):
        P = build_ulam_2d(make_product_doubling(), 2, samples_per_cell=16, rng_seed=0)
        assert np.allclose(P.matrix.toarray(), 0.25, atol=1e-15)

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_identity(self, n):
        P = build_ulam_2d(make_identity_2d(), n, samples_per_cell=9, rng_seed=0)
        assert np.array_equal(P.matrix.toarray(), np.eye(n * n))

    def test_regularity(self):
        c = CubePartition(2, 10)
        assert c.regularity == pytest.approx(np.sqrt(2))
        assert c.diameter / c.inscribed_diameter == pytest.approx(np.sqrt(2))

    def test_seed_reproducible(self):
        T = make_skew_expanding_2d()
        A = build_ulam_2d(T, 6, samples_per_cell=7, rng_seed=3).matrix
        B = build_ulam_2d(T, 6, samples_per_cell=7, rng_seed=3).matrix
        assert (A != B).nnz == 0

    def test_rows_stochastic(self):
        P = build_ulam_2d(make_skew_expanding_2d(), 8, samples_per_cell=25, rng_seed=1, jitter=0.5)
        P.check_stochastic()
        assert P.meta["seed"] == 1

    def test_escape_reports_point(self):
        from transferlab.maps import Map2D

        bad = Map2D(lambda p: 2.0 * p, False, "bad")
        with pytest.raises(ValueError, match="outside"):
            build_ulam_2d(bad, 2, samples_per_cell=4, rng_seed=0)

    def test_product_doubling_sequence_is_cauchy(self):
        # the invariant density is uniform, so successive refinements agree
        T = make_product_doubling()
        from transferlab.statistics import invariant_density

        dens = [invariant_density(build_ulam_2d(T, n, 16, 0)) for n in (2, 4, 8)]
        for v in dens:
            assert np.allclose(v, 1.0, atol=1e-10)


class TestObservableDiscretisation:
    def test_sin_two_cells(self):
        assert np.allclose(discretize_observable(Observable("sin2pi"), 2).values, [1, -1], atol=1e-15)

    def test_indicator_four_cells(self):
        assert discretize_observable(Observable("indicator_half"), 4).values.tolist() == [1, 1, -1, -1]

    def test_linear_midpoint(self):
        assert discretize_observable(Observable("linear"), 1000).values[499] == pytest.approx(-0.001, abs=1e-15)

    @given(st.integers(1, 500), st.sampled_from(["cos2pi", "linear", "sin2pi", "indicator_half"]))
    @settings(max_examples=40, deadline=None)
    def test_centering(self, n, kind):
        rng = np.random.default_rng(n)
        v = rng.uniform(0.1, 2.0, n)
        v *= n / v.sum()
        gc = discretize_observable(Observable(kind), n).centered(v)
        assert abs(gc.values @ v / n) <= 1e-12

    def test_recentering_is_idempotent(self):
        v = np.linspace(0.5, 1.5, 10)
        g = discretize_observable(Observable("linear"), 10)
        once = g.centered(v)
        twice = once.centered(v)
        assert np.allclose(once.values, twice.values, atol=1e-15)

    def test_cells_in_interval(self):
        assert cells_in_interval(4, 0.0, 0.5).tolist() == [0, 1]
        assert np.allclose(cell_midpoints(4), [0.125, 0.375, 0.625, 0.875])
