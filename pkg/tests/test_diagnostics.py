import math

import numpy as np
import pytest

from database.files import ArtifactStore
from database.schema.models import SampleSet
from lib.diagnostics import TailDiagnostics, default_k_grid, quantile_grid
from lib.distributions import make_distribution
from services.scoring import verdict_engine
from utils.errors import EmptySampleFileError, InsufficientPositiveTailError, InvalidParameterError, SampleParseError


@pytest.fixture
def engine(tmp_path):
    return TailDiagnostics(ArtifactStore(tmp_path / "artifacts"))


@pytest.fixture
def pareto_grid():
    return quantile_grid(make_distribution("pareto:1.5"), 10_000)


@pytest.fixture
def normal_grid():
    return quantile_grid(make_distribution("normal:0,1"), 10_000)


class TestIngestion:
    def test_csv_single_column(self, engine, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("1.0\n2.0\n3.0\n")
        sample = engine.ingest_samples(path)
        assert sample.values == (1.0, 2.0, 3.0)
        assert sample.source == str(path)

    def test_csv_comment_lines_skipped(self, engine, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("# exported\n4.5\n-1\n")
        assert engine.ingest_samples(path).values == (4.5, -1.0)

    def test_nan_reports_row(self, engine, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("NaN\n1.0\n")
        with pytest.raises(SampleParseError) as e:
            engine.ingest_samples(path)
        assert e.value.row == 1

    def test_text_cell_reports_row(self, engine, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("1.0\n2.0\nabc\n")
        with pytest.raises(SampleParseError) as e:
            engine.ingest_samples(path)
        assert e.value.row == 3

    def test_empty_file(self, engine, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(EmptySampleFileError):
            engine.ingest_samples(path)

    def test_missing_file(self, engine, tmp_path):
        with pytest.raises(SampleParseError):
            engine.ingest_samples(tmp_path / "missing.csv")

    def test_json_array(self, engine, tmp_path):
        path = tmp_path / "s.json"
        path.write_text("[1, 2.5, -3]")
        assert engine.ingest_samples(path, "json_array").values == (1.0, 2.5, -3.0)

    def test_json_rejects_booleans(self, engine, tmp_path):
        path = tmp_path / "s.json"
        path.write_text("[1, 2, true]")
        with pytest.raises(SampleParseError) as e:
            engine.ingest_samples(path, "json_array")
        assert e.value.row == 3

    def test_json_must_be_array(self, engine, tmp_path):
        path = tmp_path / "s.json"
        path.write_text('{"values": [1]}')
        with pytest.raises(SampleParseError):
            engine.ingest_samples(path, "json_array")

    def test_unknown_format(self, engine, tmp_path):
        with pytest.raises(InvalidParameterError):
            engine.ingest_samples(tmp_path / "s.csv", "parquet")

    @pytest.mark.parametrize("fmt", ["csv_single_column", "json_array"])
    def test_export_then_ingest(self, engine, tmp_path, fmt):
        sample = engine.generate_samples("student_t:3", 50, seed=4)
        path = engine.export_samples(sample, tmp_path / f"out.{fmt}", fmt)
        assert engine.ingest_samples(path, fmt).values == sample.values

    def test_generate_is_seeded(self, engine):
        first = engine.generate_samples("pareto:2", 100, seed=9)
        second = engine.generate_samples("pareto:2", 100, seed=9)
        assert first.values == second.values
        assert first.source == "generated:pareto:2"

    def test_sample_set_rejects_non_finite(self):
        with pytest.raises(ValueError):
            SampleSet(values=(1.0, math.inf))


class TestHillEstimator:
    @pytest.mark.parametrize("alpha", [1.0, 1.5, 2.0])
    def test_exact_grid(self, engine, alpha):
        grid = quantile_grid(make_distribution(f"pareto:{alpha}"), 100_000)
        point = engine.hill_estimator(grid, [100])[0]
        assert point.hill_estimate == pytest.approx(1 / alpha, abs=0.02)
        assert point.standard_error == pytest.approx(point.hill_estimate / 10)

    def test_sampled_pareto(self, engine):
        sample = engine.generate_samples("pareto:2", 100_000, seed=1)
        estimate = engine.hill_estimator(sample, [1000])[0].hill_estimate
        assert abs(estimate - 0.5) <= 3 * 0.5 / math.sqrt(1000)

    def test_k_out_of_range(self, engine, pareto_grid):
        with pytest.raises(InvalidParameterError):
            engine.hill_estimator(pareto_grid, [1])
        with pytest.raises(InvalidParameterError):
            engine.hill_estimator(pareto_grid, [pareto_grid.size])

    def test_insufficient_positive_tail(self, engine):
        values = np.concatenate([np.zeros(90), np.ones(10)])
        with pytest.raises(InsufficientPositiveTailError):
            engine.hill_estimator(values, [20])

    def test_default_k_grid(self):
        grid = default_k_grid(100_000)
        assert grid[0] == 10
        assert grid[-1] == 10_000
        assert grid == sorted(set(grid))

    def test_curve_sorted_by_k(self, engine, pareto_grid):
        curve = engine.hill_estimator(pareto_grid, [500, 20, 100])
        assert [p.k for p in curve] == [20, 100, 500]

    def test_hill_tail_anchor(self, engine, pareto_grid):
        tail = engine.hill_tail(pareto_grid, k=100)
        assert float(tail.log_tail(tail.threshold)) == pytest.approx(math.log(100 / 10_000))
        assert tail.inverse_log_tail(math.log(0.01)) == pytest.approx(tail.threshold)
        assert tail.gamma == pytest.approx(1 / 1.5, abs=0.03)


class TestProbabilityPlots:
    def test_normal_plot_linear_for_normal(self, engine, normal_grid):
        qq = engine.probability_plot(normal_grid, "normal")
        assert qq.linearity > 0.999
        assert len(qq.theoretical) == len(qq.empirical) == normal_grid.size

    def test_curvature_signs(self, engine, normal_grid, pareto_grid):
        light = engine.probability_plot(normal_grid, "exponential_right_half")
        heavy = engine.probability_plot(pareto_grid, "exponential_right_half")
        assert light.curvature_sign == "bending_down"
        assert heavy.curvature_sign == "bending_up"
        assert light.curvature == pytest.approx(-0.196, abs=0.01)

    def test_exponential_is_flat(self, engine):
        grid = quantile_grid(make_distribution("exponential:1"), 10_000)
        assert engine.probability_plot(grid, "exponential_right_half").curvature_sign == "flat"

    def test_too_few_samples(self, engine):
        with pytest.raises(InvalidParameterError):
            engine.probability_plot(np.arange(10.0), "normal")

    def test_unknown_kind(self, engine, normal_grid):
        with pytest.raises(InvalidParameterError):
            engine.probability_plot(normal_grid, "gumbel")


class TestTailVerdict:
    def test_pareto_grid_heavy(self, engine, pareto_grid):
        report = engine.build_tail_report(SampleSet(values=tuple(pareto_grid), source="grid"))
        assert report.verdict == "consistent-with-heavy"
        assert [r["rule"] for r in report.rule_trace] == [
            "hill_stabilization",
            "exp_plot_curvature",
            "top_spacing",
            "normal_plot_linearity",
        ]

    def test_normal_grid_light(self, engine, normal_grid):
        assert engine.classify(normal_grid) == "consistent-with-light"

    def test_isolated_extremes_ambiguous(self, engine):
        body = quantile_grid(make_distribution("normal:0,1"), 9_990)
        extremes = quantile_grid(make_distribution("pareto:1.5"), 10)
        values = np.concatenate([body, extremes])
        assert engine.top_spacing_ratio(values) >= verdict_engine.thresholds["top_spacing_ratio"]
        assert engine.classify(values) == "ambiguous"

    def test_affine_invariance(self, engine, normal_grid):
        assert engine.classify(3.0 * normal_grid + 5.0) == engine.classify(normal_grid)

    def test_report_and_classify_agree(self, engine, normal_grid):
        report = engine.build_tail_report(SampleSet(values=tuple(normal_grid)))
        assert report.verdict == engine.classify(normal_grid)

    def test_verdict_needs_curve(self, engine, normal_grid):
        qq = engine.probability_plot(normal_grid, "normal")
        with pytest.raises(InvalidParameterError):
            engine.tail_verdict([], qq, qq, 1.0)


class TestVerdictEngine:
    def test_decision_table(self):
        assert verdict_engine.make_decision(True, "bending_up", False) == "consistent-with-heavy"
        assert verdict_engine.make_decision(False, "bending_down", False) == "consistent-with-light"
        assert verdict_engine.make_decision(False, "bending_down", True) == "ambiguous"
        assert verdict_engine.make_decision(True, "flat", False) == "ambiguous"

    def test_stabilization(self):
        k = list(range(10, 90, 10))
        assert verdict_engine.stabilization(k, [0.5] * 8)["stabilized"]
        assert not verdict_engine.stabilization(k, [0.1 * i for i in range(1, 9)])["stabilized"]

    def test_explanation_mentions_rules(self):
        result = verdict_engine.evaluate([10, 20, 30, 40], [0.5, 0.5, 0.5, 0.5], 0.3, 1.0)
        assert result["verdict"] == "consistent-with-heavy"
        assert "hill_stabilization=stabilized" in result["explanation"]

    def test_isolated_extreme_blocks_light(self):
        drifting = [0.1 * i for i in range(1, 9)]
        k = list(range(10, 90, 10))
        assert verdict_engine.evaluate(k, drifting, -0.2, 3.0)["verdict"] == "consistent-with-light"
        result = verdict_engine.evaluate(k, drifting, -0.2, 10.0)
        assert result["verdict"] == "ambiguous"
        assert result["rule_trace"][2]["outcome"] == "isolated_extreme"


@pytest.mark.slow
class TestReplication:
    def test_standard_error_matches_spread(self, engine):
        result = engine.hill_replication(2.0, 10_000, 200, reps=200, seed=3)
        assert abs(result["sd_ratio"] - 1) <= 0.2

    @pytest.mark.parametrize("spec, expected", [("pareto:1.5", "consistent-with-heavy"), ("normal:0,1", "consistent-with-light")])
    def test_verdict_accuracy(self, engine, spec, expected):
        result = engine.verdict_accuracy(spec, expected, 100_000, reps=200, seed=5)
        assert result["accuracy"] >= 0.95
