import math

import numpy as np
import pytest

from lib.conditioning import (
    ConditioningProblem,
    choose_h,
    condition_sweep,
    conditional_mean,
    conditional_mean_dependent_counterexample,
    conditional_mean_monte_carlo,
    conditional_mean_report,
    dependent_problem,
    log_abs_expm1,
    make_scheme,
    region4_tail_bound,
    region_decomposition,
    theorem6_ratio_diagnostic,
)
from lib.distributions import make_distribution
from utils.errors import InvalidParameterError


@pytest.fixture
def heavy_x():
    return make_distribution("pareto:1.5,1")


class TestHelpers:
    def test_log_abs_expm1_both_signs(self):
        values = log_abs_expm1(np.array([1.0, -1.0]))
        assert values[0] == pytest.approx(math.log(math.e - 1))
        assert values[1] == pytest.approx(math.log(1 - math.exp(-1)))

    def test_log_abs_expm1_tiny_argument(self):
        assert float(log_abs_expm1(1e-300)) == pytest.approx(math.log(1e-300), rel=1e-9)

    def test_scheme_validation(self):
        with pytest.raises(InvalidParameterError):
            make_scheme("cubic")
        with pytest.raises(InvalidParameterError):
            make_scheme("sqrt", p=1.0)
        with pytest.raises(InvalidParameterError):
            make_scheme("custom")

    def test_custom_scheme(self):
        scheme = make_scheme("custom", custom=lambda t: t / 4)
        assert scheme.boundaries(8.0)["r3"][:2] == (2.0, 6.0)


class TestHeavyErrorConditioning:
    def test_conditional_mean_vanishes(self, normal, heavy_x):
        report = conditional_mean_report(ConditioningProblem(normal, heavy_x, 1e6))
        assert abs(report["conditional_mean"]) <= 0.01
        assert report["denominator"] == pytest.approx(1.0, abs=0.01)

    def test_sweep_shrinks(self, normal, heavy_x):
        table = condition_sweep(normal, heavy_x, [1e2, 1e4, 1e6])
        means = table["conditional_mean"].abs().to_numpy()
        assert means[-1] < means[0]
        assert {"r1_numerator", "r4_numerator", "r3_lemma2_ratio", "denominator_mid"} <= set(table.columns)

    def test_region3_rate_kept_in_log_space(self, normal, heavy_x):
        table = condition_sweep(normal, heavy_x, [1e5, 10**5.5, 1e6])
        logs = table["r3_lemma2_log"].to_numpy()
        assert np.all(np.isfinite(logs))
        assert np.all(np.diff(logs) < 0)

    def test_region4_columns_use_scheme_p(self, normal, heavy_x):
        table = condition_sweep(normal, heavy_x, [100.0, 1e4], make_scheme("sqrt", p=2.0))
        assert table["r4_dominated_bound"].tolist() == pytest.approx([1e-2, 1e-4])
        assert np.all(np.diff(table["r4_tail_ratio_log"].to_numpy()) < 0)

    def test_region_triangle_bound(self, normal, heavy_x):
        report = region_decomposition(ConditioningProblem(normal, heavy_x, 1e4), make_scheme("sqrt"))
        assert report.triangle_holds
        assert report.h == pytest.approx(100.0)
        assert list(report.table["region"]) == ["r1", "r2", "r3", "r4"]

    def test_region_needs_independence(self):
        with pytest.raises(InvalidParameterError):
            region_decomposition(dependent_problem(5.0), make_scheme("sqrt"))

    def test_choose_h_flat(self, heavy_x):
        choice = choose_h(heavy_x, "sqrt")
        assert choice.decreasing
        assert choice.h_below_half_t

    def test_region4_bound(self, normal, heavy_x):
        table = region4_tail_bound(normal, heavy_x, 1.5, [10.0, 100.0, 1000.0])
        assert table.attrs["first_trend"] == "decreasing"
        assert table.attrs["dominance_trend"] == "decreasing-to-zero"

    def test_point_mass_v(self, heavy_x):
        v = make_distribution("point_mass:0.5")
        assert conditional_mean(ConditioningProblem(v, heavy_x, 100.0)) == pytest.approx(0.5)


class TestLightErrorConditioning:
    grid = [5.0, 10.0, 15.0, 20.0]

    def test_mean_grows(self, exponential, normal):
        means = condition_sweep(exponential, normal, self.grid)["conditional_mean"].to_numpy()
        assert np.all(np.diff(means) > 0)
        assert means[-1] - means[0] > 3

    def test_ratio_drops(self, exponential, normal):
        table = theorem6_ratio_diagnostic(exponential, normal, 1.0, self.grid)
        ratio = table["ratio"].to_numpy()
        assert ratio[0] >= 10 * ratio[-1]
        assert table["ratio_within_bound"].all()
        assert table["mean_above_bound"].all()
        assert table.attrs["hypothesis_vanishing"]

    def test_monte_carlo_agrees(self, exponential, normal):
        problem = ConditioningProblem(exponential, normal, 5.0)
        mc = conditional_mean_monte_carlo(problem, samples=500_000, seed=7)
        assert mc.feasible
        assert abs(conditional_mean(problem) - mc.estimate) <= 4 * mc.standard_error

    def test_monte_carlo_refused_for_rare_events(self, normal, heavy_x):
        mc = conditional_mean_monte_carlo(ConditioningProblem(normal, heavy_x, 1e6), samples=1000)
        assert not mc.feasible
        assert mc.detail["acceptance_probability"] < 1e-5


class TestDependentCounterexample:
    def test_mean_bounded_and_increasing(self):
        values = [conditional_mean_dependent_counterexample(t) for t in (10.0, 20.0, 30.0)]
        assert all(0 < v <= 1 for v in values)
        assert values[0] < values[1] < values[2]

    def test_mean_tends_to_upper_edge(self):
        assert conditional_mean_dependent_counterexample(30.0) > 0.8

    def test_report_routes_to_dependent_law(self):
        report = conditional_mean_report(dependent_problem(10.0))
        assert report["conditional_mean"] == pytest.approx(conditional_mean_dependent_counterexample(10.0))

    @pytest.mark.slow
    def test_monte_carlo_agrees(self):
        exact = conditional_mean_dependent_counterexample(2.0)
        mc = conditional_mean_monte_carlo(dependent_problem(2.0), samples=2_000_000, seed=11)
        assert mc.feasible
        assert abs(exact - mc.estimate) <= 4 * mc.standard_error

    def test_v_needs_mean(self, heavy_x):
        with pytest.raises(InvalidParameterError):
            ConditioningProblem(make_distribution("pareto:1"), heavy_x, 10.0)
