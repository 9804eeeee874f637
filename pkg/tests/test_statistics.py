import math

import numpy as np
import pytest

from transferlab.maps import Observable, make_doubling
from transferlab.statistics import (
    birkhoff_variance_mc,
    consistency_check_rate_vs_escape,
    escape_rate,
    rate_function,
    variance,
)
from transferlab.twist import leading_eigendata, twist
from transferlab.ulam import DiscretizedObservable, build_ulam_1d, discretize_observable

# an exact eigenvector: the uniform density on [0, 1/2] loses 1 - 2/2.1 of its mass per step
ESCAPE_HALF = math.log(1.05)


class TestVariance:
    def test_sin_1000(self, P1000):
        assert variance(P1000, Observable("sin2pi")).sigma2 == pytest.approx(6.4959, abs=5e-4)

    def test_indicator_200(self, P200):
        assert variance(P200, Observable("indicator_half")).sigma2 == pytest.approx(17.006, abs=5e-4)

    def test_constant_observable(self, P1000):
        rep = variance(P1000, Observable("custom", expression="3.0 + 0*x"))
        assert abs(rep.sigma2) <= 1e-12

    def test_invariants(self, P1000):
        for kind in ("cos2pi", "linear", "sin2pi", "indicator_half"):
            rep = variance(P1000, Observable(kind))
            assert rep.sigma2 >= -1e-10
            assert abs(rep.dlam) <= 1e-8

    def test_against_log_lambda_second_difference(self, P1000, v1000):
        g = discretize_observable(Observable("sin2pi"), 1000).centered(v1000)
        h = 1e-4

        def L(z):
            return math.log(leading_eigendata(twist(P1000, g, z), tol=1e-15).lam)

        fd = (L(h) - 2 * L(0.0) + L(-h)) / h**2
        s2 = variance(P1000, g, eig_tol=1e-15).sigma2
        assert abs(s2 - fd) <= 1e-5 * s2

    def test_resolvent_route(self, P1000):
        rep = variance(P1000, Observable("linear"), eig_tol=1e-14, cross_check=True)
        assert rep.sigma2_resolvent == pytest.approx(rep.sigma2, rel=1e-8)

    def test_lu_and_gmres_agree(self, P1000):
        a = variance(P1000, Observable("cos2pi"), method="lu").sigma2
        b = variance(P1000, Observable("cos2pi"), method="gmres").sigma2
        assert a == pytest.approx(b, rel=1e-10)

    @pytest.mark.parametrize("n", [64, 256, 2048])
    def test_doubling_linear(self, n):
        # 2x - 1 under the doubling map has correlations 2^-k / 3, so sigma^2 = 1;
        # on n dyadic cells the Ulam chain gives (1 - 1/n)^2
        P = build_ulam_1d(make_doubling(), n)
        assert variance(P, Observable("linear")).sigma2 == pytest.approx((1 - 1 / n) ** 2, abs=1e-12)

    def test_row(self, P200):
        row = variance(P200, Observable("sin2pi")).as_row()
        assert row["n"] == 200 and row["observable"] == "sin2pi"


@pytest.fixture(scope="module")
def sin_rate(P1000):
    return rate_function(np.round(np.arange(0, 0.81, 0.05), 12), P1000, Observable("sin2pi"))


class TestRateFunction:
    def test_zero(self, sin_rate):
        assert abs(sin_rate.r[0]) <= 1e-10
        assert abs(sin_rate.z_star[0]) <= 1e-8

    def test_convex(self, sin_rate):
        assert np.all(np.diff(sin_rate.r, 2) >= -1e-8)

    def test_z_star_monotone(self, sin_rate):
        assert np.all(np.diff(sin_rate.z_star) >= 0)

    def test_all_ok(self, sin_rate):
        assert sin_rate.status == ["ok"] * len(sin_rate.s_grid)
        assert not sin_rate.failed.any()

    def test_quadratic_law(self, P1000):
        s2 = variance(P1000, Observable("linear")).sigma2
        r = rate_function([0.01], P1000, Observable("linear"), opt_tol=1e-10).r[0]
        assert abs(r * 2 * s2 / 0.01**2 - 1) <= 0.05

    def test_negative_side(self, P1000):
        res = rate_function([-0.3, 0.3], P1000, Observable("linear"))
        assert res.r[0] > 0 and res.z_star[0] < 0

    def test_escape_value(self, P1000):
        res = rate_function([1 - 1e-15], P1000, Observable("indicator_half"), opt_tol=1e-13, eig_tol=1e-14)
        assert res.r[0] == pytest.approx(0.04879016416945, abs=1e-11)

    @pytest.mark.parametrize("s", [1.2, 1.5])
    def test_saturated_beyond_range(self, P200, s):
        res = rate_function([s], P200, Observable("indicator_half"), z_bounds=(-10, 10))
        assert res.status == ["saturated"]
        assert res.z_star[0] == 10
        assert res.saturated.all()

    def test_max_iter_recorded(self, P200):
        res = rate_function([0.5, 0.6], P200, Observable("indicator_half"), opt_tol=1e-16, max_iter=2)
        assert res.status == ["max_iter", "max_iter"]
        assert np.all(np.isfinite(res.r))

    def test_warm_start_same_answer(self, P200):
        grid = np.linspace(0, 0.8, 9)
        warm = rate_function(grid, P200, Observable("sin2pi"), opt_tol=1e-10)
        cold = rate_function(grid, P200, Observable("sin2pi"), opt_tol=1e-10, warm_start=False)
        assert np.allclose(warm.r, cold.r, atol=1e-12)
        assert warm.iterations.sum() <= cold.iterations.sum()


class TestEscape:
    def test_half_interval(self, P1000):
        rep = escape_rate(P1000, (0.0, 0.5), eig_tol=1e-14)
        assert rep.escape_rate == pytest.approx(0.04879016416943, abs=1e-11)
        assert rep.escape_rate == pytest.approx(ESCAPE_HALF, abs=1e-14)
        assert 0 < rep.lambda_sub <= 1

    def test_int_endpoints_mean_interval(self, P200):
        assert escape_rate(P200, (0, 0.5)).region.size == 100

    def test_full_region(self, P200):
        rep = escape_rate(P200, np.arange(200))
        assert rep.escape_rate == 0.0 and rep.lambda_sub == 1.0

    def test_doubling_single_cell(self, doubling2):
        assert escape_rate(doubling2, [0]).escape_rate == pytest.approx(math.log(2), abs=1e-15)

    def test_transient_region(self):
        # cell 1 of the 4-cell doubling matrix maps into cells 2 and 3 only
        P = build_ulam_1d(make_doubling(), 4)
        assert escape_rate(P, [1]).escape_rate == math.inf
        assert escape_rate(P, [1, 2]).escape_rate == pytest.approx(math.log(2))

    def test_empty(self, P200):
        with pytest.raises(ValueError):
            escape_rate(P200, (0.9999, 1.0))

    def test_out_of_range(self, P200):
        with pytest.raises(ValueError):
            escape_rate(P200, [0, 200])


class TestConsistency:
    def test_n1000(self, P1000):
        assert consistency_check_rate_vs_escape(P1000) <= 2e-14

    def test_n200(self, P200):
        assert consistency_check_rate_vs_escape(P200) <= 1e-12

    def test_wrong_region_disagrees(self, P1000):
        assert consistency_check_rate_vs_escape(P1000, region=(0.0, 0.25)) > 1e-3


class TestMonteCarlo:
    def test_small_run_near_ulam(self, tent, P1000):
        est, se = birkhoff_variance_mc(tent, Observable("cos2pi"), n_steps=400_000, chains=200, batch=200)
        ref = variance(P1000, Observable("cos2pi")).sigma2
        assert se > 0
        assert abs(est - ref) <= 4 * se + 0.02

    def test_needs_two_batches(self, tent):
        with pytest.raises(ValueError, match="two batches"):
            birkhoff_variance_mc(tent, Observable("sin2pi"), n_steps=1000, chains=10, batch=100)

    def test_seeded(self, tent):
        a = birkhoff_variance_mc(tent, Observable("sin2pi"), n_steps=20_000, chains=10, batch=100, seed=4)
        b = birkhoff_variance_mc(tent, Observable("sin2pi"), n_steps=20_000, chains=10, batch=100, seed=4)
        assert a == b


def test_invariant_density_symmetric(P1000, v1000):
    # the map commutes with x -> 1 - x, so the density does too
    assert np.allclose(v1000, v1000[::-1], atol=1e-10)
    assert np.all(v1000 >= 0)


def test_table_observable_equals_named(P200):
    g = discretize_observable(Observable("sin2pi"), 200)
    a = variance(P200, DiscretizedObservable(g.values.copy())).sigma2
    b = variance(P200, Observable("sin2pi")).sigma2
    assert a == b
