import math

import numpy as np
import pytest

from database.schema.models import MixtureKlInput, TailUpweightConfig
from lib.distributions import DiscreteDistribution, make_distribution
from lib.tilting import (
    build_tail_upweighted,
    conditioning_kl,
    exp_tilt,
    kl_regularized_optimum,
    mean_cross_check,
    mixture_kl,
    sweep_upweighting,
    tilt_frontier,
    upweight_bounds,
    upweighted_kl,
)
from utils.errors import DivergentNormalizerError, InvalidParameterError, ThresholdTooDeepError


class TestTailUpweighted:
    def test_mass_above_threshold(self, student_t):
        p = build_tail_upweighted(student_t, c=1.0, t=1e3)
        assert float(p.tail(1e3)) == pytest.approx(1e-3)
        assert p.mass == pytest.approx(1e-3)

    def test_gamma_changes_mass(self, student_t):
        p = build_tail_upweighted(student_t, c=1.0, t=100.0, gamma=0.5)
        assert p.mass == pytest.approx(0.1)

    def test_threshold_must_exceed_c(self, student_t):
        with pytest.raises(InvalidParameterError):
            build_tail_upweighted(student_t, c=2.0, t=2.0)

    def test_gamma_range(self, student_t):
        with pytest.raises(InvalidParameterError):
            build_tail_upweighted(student_t, c=1.0, t=10.0, gamma=1.5)

    def test_base_without_mean(self):
        with pytest.raises(InvalidParameterError):
            build_tail_upweighted(make_distribution("pareto:1"), c=1.0, t=10.0)

    def test_threshold_too_deep(self, normal):
        with pytest.raises(ThresholdTooDeepError):
            build_tail_upweighted(normal, c=1.0, t=40.0)

    def test_mean_cross_check(self, student_t):
        check = mean_cross_check(build_tail_upweighted(student_t, c=1.0, t=100.0))
        assert check["ok"]
        assert check["mean_decomposition"] == pytest.approx(check["mean_quadrature"], rel=1e-6)

    def test_broken_mass_fails_cross_check(self, student_t):
        check = mean_cross_check(build_tail_upweighted(student_t, c=1.0, t=100.0), mass_scale=1.5)
        assert not check["ok"]

    def test_bounds(self, student_t):
        p = build_tail_upweighted(student_t, c=1.0, t=100.0)
        bounds = upweight_bounds(p)
        assert bounds["bounds_apply"]
        assert p.mean >= bounds["mean_lower_bound"] - 1e-12
        assert upweighted_kl(p) <= bounds["kl_upper_bound"] + 1e-12

    def test_sampling_respects_mass(self, student_t, rng):
        p = build_tail_upweighted(student_t, c=1.0, t=10.0)
        above = float(np.mean(p.sample(rng, 20_000) > 10.0))
        assert above == pytest.approx(0.1, abs=0.01)

    def test_discrete_base(self):
        base = DiscreteDistribution([0.0, 20.0], [0.99, 0.01])
        p = build_tail_upweighted(base, c=1.0, t=10.0)
        assert p.mean == pytest.approx(2.0)
        assert mean_cross_check(p)["ok"]

    def test_config_model_rejects_low_threshold(self):
        with pytest.raises(ValueError):
            TailUpweightConfig(base="student_t:3", c=2.0, t=1.0)


class TestUpweightSweep:
    def test_heavy_base_kl_vanishes(self, student_t):
        table = sweep_upweighting(student_t, 1.0, 1.0, [10.0, 100.0, 1000.0, 10000.0])
        kl = table["kl_exact"].to_numpy()
        assert np.all(np.diff(kl) < 0)
        assert kl[-1] < 0.05
        assert table["mean_decomposition"].iloc[-1] >= 0.95

    def test_slower_decay_grows_mean(self, student_t):
        table = sweep_upweighting(student_t, 1.0, 0.8, [10.0, 100.0, 1000.0, 10000.0])
        assert np.all(np.diff(table["mean_decomposition"].to_numpy()) > 0)

    def test_light_base_kl_grows(self, normal):
        kl = [upweighted_kl(build_tail_upweighted(normal, 1.0, t)) for t in (20.0, 30.0)]
        assert kl[0] > 5
        assert kl[1] > kl[0]

    def test_columns(self, student_t):
        table = sweep_upweighting(student_t, 1.0, 1.0, [10.0])
        assert ["t", "mass", "mean_decomposition", "mean_quadrature", "kl_exact"] == list(table.columns[:5])


class TestExponentialTilt:
    def test_gaussian_tilt(self, normal):
        tilt = exp_tilt(normal, 0.5)
        assert tilt.tilted_mean == pytest.approx(0.5, abs=1e-6)
        assert tilt.kl == pytest.approx(0.125, abs=1e-6)

    def test_zero_rate_is_identity(self, normal):
        tilt = exp_tilt(normal, 0.0)
        assert tilt.kl == 0.0
        assert tilt.tilted_mean == pytest.approx(0.0)

    def test_pareto_normalizer_diverges(self, pareto):
        with pytest.raises(DivergentNormalizerError):
            exp_tilt(pareto, 0.1)

    def test_discrete_tilt(self):
        base = make_distribution("point_mass:3")
        tilt = exp_tilt(base, 2.0)
        assert tilt.tilted_mean == pytest.approx(3.0)
        assert tilt.kl == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("s", [4.0, 8.0])
    def test_steep_gaussian_tilt(self, normal, s):
        tilt = exp_tilt(normal, s)
        assert tilt.tilted_mean == pytest.approx(s, abs=1e-5)
        assert tilt.kl == pytest.approx(s * s / 2, rel=1e-6)

    @pytest.mark.parametrize("spec, s", [("normal:0,1", 1.5), ("exponential:1", 0.3)])
    def test_log_normalizer_slope_is_tilted_mean(self, spec, s):
        base = make_distribution(spec)
        step = 1e-3
        slope = (exp_tilt(base, s + step).log_normalizer - exp_tilt(base, s - step).log_normalizer) / (2 * step)
        assert slope == pytest.approx(exp_tilt(base, s).tilted_mean, abs=1e-5)

    def test_frontier(self, normal):
        frame = tilt_frontier(normal, [0.0, 0.5, 1.0])
        assert frame["kl"].tolist() == pytest.approx([0.0, 0.125, 0.5], abs=1e-6)

    def test_kl_regularized_optimum(self, normal):
        result = kl_regularized_optimum(normal, normal, 0.5)
        assert result["expected_v"] == pytest.approx(2.0, abs=1e-5)
        assert result["kl"] == pytest.approx(4.0, abs=1e-5)

    @pytest.mark.parametrize("beta", [1.0, 0.5, 0.25, 0.125, 0.0625])
    def test_optimum_as_beta_halves(self, normal, beta):
        result = kl_regularized_optimum(normal, normal, beta)
        assert result["expected_v"] == pytest.approx(1 / beta, abs=1e-5)
        assert result["expected_u"] == pytest.approx(2 / beta, abs=1e-5)
        assert result["kl"] == pytest.approx(1 / beta**2, rel=1e-6)

    def test_beta_positive(self, normal):
        with pytest.raises(InvalidParameterError):
            kl_regularized_optimum(normal, normal, 0.0)


class TestMixtureKl:
    def test_first_order_value(self):
        result = mixture_kl(MixtureKlInput(alpha=0.01, log_q=-1339.70))
        assert result["first_order_kl"] == pytest.approx(13.35, abs=0.01)
        assert result["first_order_regime"]

    def test_reward_gain(self):
        result = mixture_kl(MixtureKlInput(alpha=0.01, log_q=-1339.70, delta_reward=1.9048))
        assert result["expected_reward_gain"] == pytest.approx(0.019048)

    def test_exact_tracks_first_order(self):
        result = mixture_kl(MixtureKlInput(alpha=0.01, log_q=-1339.70))
        assert result["exact_kl"] >= result["first_order_kl"] - 0.01

    def test_outside_first_order_regime(self):
        result = mixture_kl(MixtureKlInput(alpha=0.25, log_q=math.log(0.5)))
        assert not result["first_order_regime"]
        assert result["exact_kl"] >= 0.0

    def test_conditioning_comparison(self, normal):
        result = mixture_kl(MixtureKlInput(alpha=0.01, log_q=-50.0), base=normal)
        assert float(-normal.log_tail(result["conditioning_threshold"])) == pytest.approx(result["exact_kl"], rel=1e-6)
        assert result["conditioning_gain"] > 0

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            MixtureKlInput(alpha=1.0, log_q=-1.0)


class TestConditioningKl:
    def test_exponential(self, exponential):
        result = conditioning_kl(exponential, 2.0)
        assert result["kl"] == pytest.approx(2.0)
        assert result["mean_gain"] == pytest.approx(2.0, rel=1e-6)
