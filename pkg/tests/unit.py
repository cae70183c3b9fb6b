import json

import pytest

from lib.diagnostics import quantile_grid
from lib.distributions import make_distribution


def summary(result):
    return json.loads(result.stdout)


class TestTiltRoutes:
    def test_tilt_sweep_success(self, cli):
        result = cli("tilt-sweep", "--base", "student_t:3", "--t", "10,100,1000,10000")
        assert result.exit_code == 0, result.output
        body = summary(result)
        assert body["kl_decreasing"]
        assert body["final_kl"] < 0.05
        assert body["rows"] == 4

    def test_threshold_below_c(self, cli):
        result = cli("tilt-sweep", "--c", "2", "--t", "1,3")
        assert result.exit_code == 1

    def test_light_base_refused(self, cli):
        result = cli("tilt-sweep", "--base", "normal:0,1", "--t", "2,3")
        assert result.exit_code == 1

    def test_threshold_too_deep(self, cli):
        result = cli("tilt-sweep", "--base", "normal:0,1", "--allow-light", "--t", "40")
        assert result.exit_code == 2

    def test_config_file(self, cli, tmp_path):
        config = tmp_path / "light.json"
        config.write_text(json.dumps({"base": "normal:0,1", "allow_light": True, "c": 0.5, "t_grid": "1,2,3,4"}))
        result = cli("tilt-sweep", "--config", str(config))
        assert result.exit_code == 0, result.output
        assert not summary(result)["kl_decreasing"]

    def test_flags_override_config(self, cli, tmp_path):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"c": 50.0, "t_grid": [10.0, 100.0]}))
        result = cli("tilt-sweep", "--config", str(config), "--c", "1")
        assert result.exit_code == 0, result.output

    def test_artifacts_are_deterministic(self, cli, tmp_path):
        path = tmp_path / "out" / "tilt_sweep.csv"
        assert cli("tilt-sweep", "--t", "10,100").exit_code == 0
        first = path.read_bytes()
        assert cli("tilt-sweep", "--t", "10,100").exit_code == 0
        assert path.read_bytes() == first
        assert first.startswith(b"# artifact: tilt_sweep.csv")


class TestConditionRoutes:
    def test_heavy_error(self, cli):
        result = cli("condition-sweep", "--t", "100,10000,1000000")
        assert result.exit_code == 0, result.output
        assert abs(summary(result)["final_conditional_mean"]) <= 0.01

    def test_light_error(self, cli):
        result = cli("condition-sweep", "--v", "exponential:1", "--x", "normal:0,1", "--t", "5,10,15,20")
        assert result.exit_code == 0, result.output
        assert summary(result)["mean_increasing"]

    def test_dependent(self, cli):
        result = cli("condition-sweep", "--dependent", "--t", "10,20,30")
        assert result.exit_code == 0, result.output
        body = summary(result)
        assert body["dependence"] == "vshaped_counterexample"
        assert 0 < body["final_conditional_mean"] <= 1

    def test_bad_scheme(self, cli):
        assert cli("condition-sweep", "--scheme", "cubic", "--t", "10").exit_code == 1

    def test_unsorted_grid(self, cli):
        assert cli("condition-sweep", "--t", "100,10").exit_code == 1


class TestMdpRoutes:
    def test_token_chain_demo(self, cli):
        result = cli("mdp-demo")
        assert result.exit_code == 0, result.output
        body = summary(result)
        assert body["found"] is not None
        assert body["lift_round_trip_tv"] < 1e-10
        assert abs(body["kl_chain_rule"]["residual"]) < 1e-10

    def test_instance_round_trip(self, cli, tmp_path):
        instance = tmp_path / "chain.json"
        first = cli("mdp-demo", "--write-instance", str(instance))
        assert first.exit_code == 0, first.output
        second = cli("mdp-demo", "--instance", str(instance))
        assert second.exit_code == 0, second.output
        assert summary(second)["trajectories"] == summary(first)["trajectories"]

    def test_invalid_instance(self, cli, tmp_path):
        instance = tmp_path / "broken.json"
        instance.write_text(json.dumps({"states": ["s"], "actions": ["a"]}))
        assert cli("mdp-demo", "--instance", str(instance)).exit_code == 1


class TestTailsRoutes:
    def test_pareto_grid_file(self, cli, tmp_path):
        path = tmp_path / "grid.csv"
        path.write_text("\n".join(repr(float(v)) for v in quantile_grid(make_distribution("pareto:1.5"), 10_000)))
        result = cli("tails", "--input", str(path))
        assert result.exit_code == 0, result.output
        assert summary(result)["verdict"] == "consistent-with-heavy"
        assert (tmp_path / "out" / "hill.csv").exists()

    def test_generated_with_export(self, cli, tmp_path):
        export = tmp_path / "samples.csv"
        result = cli("tails", "--generate", "normal:0,1", "--n", "2000", "--seed", "3", "--export", str(export))
        assert result.exit_code == 0, result.output
        assert len(export.read_text().splitlines()) == 2000

    def test_nan_row(self, cli, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("NaN\n1.0\n")
        result = cli("tails", "--input", str(path))
        assert result.exit_code == 1

    def test_explicit_k_grid(self, cli):
        result = cli("tails", "--generate", "pareto:2", "--n", "5000", "--k-grid", "20,50,100")
        assert result.exit_code == 0, result.output
        trace = summary(result)["rule_trace"]
        assert trace[0]["rule"] == "hill_stabilization"

    def test_needs_input(self, cli):
        assert cli("tails").exit_code == 1


class TestKlRoutes:
    def test_mixture_example(self, cli):
        result = cli("kl-calc", "--alpha", "0.01", "--log-q=-1339.70", "--delta-reward", "1.9048")
        assert result.exit_code == 0, result.output
        body = summary(result)
        assert body["first_order_kl"] == pytest.approx(13.35, abs=0.01)
        assert body["expected_reward_gain"] == pytest.approx(0.019048)

    def test_conditioning_comparison(self, cli):
        result = cli("kl-calc", "--alpha", "0.01", "--log-q=-50", "--base", "normal:0,1")
        assert result.exit_code == 0, result.output
        assert summary(result)["conditioning_gain"] > 0

    def test_alpha_out_of_range(self, cli):
        assert cli("kl-calc", "--alpha", "1.5").exit_code == 1


class TestVerifyRoutes:
    def test_mdp_suite(self, cli):
        result = cli("verify", "--only", "mdp")
        assert result.exit_code == 0, result.output
        body = summary(result)
        assert body["passed"]
        assert [s["suite"] for s in body["suites"]] == ["mdp"]

    def test_broken_formula_exits_3(self, cli):
        result = cli("verify", "--only", "tilting", "--break-tilt-formula")
        assert result.exit_code == 3
        assert not summary(result)["passed"]

    def test_unknown_suite(self, cli):
        assert cli("verify", "--only", "astrology").exit_code == 1

    @pytest.mark.slow
    def test_full_run(self, cli):
        result = cli("verify")
        assert result.exit_code == 0, result.output


def test_version(runner):
    from main import app

    result = runner.invoke(app, ["--version"])
    assert result.exit_code == 0
    assert "goodhart-tails" in result.stdout


if __name__ == "__main__":
    pytest.main(["-v"])
