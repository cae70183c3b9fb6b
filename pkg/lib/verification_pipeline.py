import math
import time
from typing import Any, Callable, Dict, List

import numpy as np
from rich.console import Console
from rich.table import Table
from scipy import stats
from tqdm import tqdm

from database.schema.models import MixtureKlInput
from lib import conditioning, diagnostics, distributions, mdp, tilting
from services.quadrature import quadrature
from settings import DEFAULT_SEED
from utils.errors import DivergentNormalizerError, InvalidParameterError, LabError, SuiteFailureError
from utils.logger import get_logger

logger = get_logger(__name__)

SUITES = ("distributions", "tilting", "conditioning", "mdp", "diagnostics")


def _check(name: str, passed: bool, measured: Any, expected: str) -> Dict[str, Any]:
    return {"name": name, "passed": bool(passed), "measured": measured, "expected": expected}


def _strictly(values, op=np.less) -> bool:
    values = np.asarray(values, dtype=float)
    return bool(len(values) > 1 and np.all(op(values[1:], values[:-1])))


class VerificationPipeline:
    """Runs each module's property suite at desk scale and collects pass/fail per invariant."""

    def __init__(self, seed: int | None = None, workers: int | None = None, mass_scale: float = 1.0):
        self.seed = DEFAULT_SEED if seed is None else seed
        self.workers = workers
        # != 1 breaks the upweighted-mean formula; negative control for the tilting suite
        self.mass_scale = mass_scale
        self.suites: Dict[str, Callable[[], List[Dict[str, Any]]]] = {
            "distributions": self.distributions_suite,
            "tilting": self.tilting_suite,
            "conditioning": self.conditioning_suite,
            "mdp": self.mdp_suite,
            "diagnostics": self.diagnostics_suite,
        }

    def run(self, only: List[str] | None = None) -> Dict[str, Any]:
        selected = list(only) if only else list(SUITES)
        unknown = [s for s in selected if s not in self.suites]
        if unknown:
            raise InvalidParameterError("only", unknown, f"unknown suite; expected any of {', '.join(SUITES)}")

        results = []
        for name in tqdm(selected, desc="verify", unit="suite", leave=False):
            started = time.perf_counter()
            try:
                checks = self.suites[name]()
            except LabError as e:
                logger.error(f"suite {name} aborted: {e}")
                checks = [_check(f"{name}_completed", False, f"{type(e).__name__}: {e}", "suite runs to completion")]
            seconds = time.perf_counter() - started
            passed = all(c["passed"] for c in checks)
            logger.info(f"suite {name}: {'pass' if passed else 'FAIL'} in {seconds:.1f}s")
            results.append({"suite": name, "passed": passed, "checks": checks})

        return {"seed": self.seed, "passed": all(r["passed"] for r in results), "suites": results}

    # --- suites ---------------------------------------------------------------------

    def distributions_suite(self) -> List[Dict[str, Any]]:
        checks = []
        specs = ["normal:0,1", "exponential:1", "pareto:1.5", "student_t:3", "lognormal:0,1", "weibull_stretched:0.5"]
        for i, spec in enumerate(specs):
            d = distributions.make_distribution(spec)
            sample = d.sample(np.random.default_rng([self.seed, i]), 20_000)
            p_value = float(stats.kstest(sample, d.cdf).pvalue)
            checks.append(_check(f"ks_consistency[{spec}]", p_value > 1e-3, p_value, "KS p-value > 1e-3"))

            lo, hi = d.support
            mass = quadrature.log_integrate(d.log_pdf, lo, hi, (lo, float(d.quantile(0.5)), hi))
            total = math.exp(mass.log_value)
            checks.append(_check(f"density_normalization[{spec}]", abs(total - 1) < 1e-6, total, "|∫f - 1| < 1e-6"))

        pareto = distributions.subexponential_ratio(distributions.make_distribution("pareto:1.5"), 1e3)
        checks.append(
            _check("subexponential_ratio[pareto:1.5, x=1e3]", abs(pareto.estimate / 2 - 1) < 0.05, pareto.estimate, "2 ± 5%")
        )
        x = 30.0
        expo = distributions.subexponential_ratio(distributions.make_distribution("exponential:1"), x)
        checks.append(
            _check(
                f"subexponential_ratio[exponential:1, x={x:g}]",
                abs(expo.estimate / (1 + x) - 1) < 0.05,
                expo.estimate,
                f"{1 + x:g} ± 5%",
            )
        )

        for spec, expected in (("pareto:1.5", "heavy"), ("student_t:3", "heavy"), ("normal:0,1", "light")):
            verdict = distributions.is_heavy_tailed(distributions.make_distribution(spec)).classification
            checks.append(_check(f"is_heavy_tailed[{spec}]", verdict == expected, verdict, expected))
        return checks

    def tilting_suite(self) -> List[Dict[str, Any]]:
        checks = []
        base = distributions.make_distribution("student_t:3")
        t_grid = [10.0, 1e2, 1e3, 1e4]
        for gamma in (0.8, 1.0):
            table = tilting.sweep_upweighting(base, 1.0, gamma, t_grid, self.workers, self.mass_scale)
            kl = table["kl_exact"].to_numpy()
            checks.append(_check(f"upweight_kl_decreasing[gamma={gamma:g}]", _strictly(kl), kl.tolist(), "strictly decreasing"))
            checks.append(_check(f"upweight_kl_final[gamma={gamma:g}]", kl[-1] < 0.05, float(kl[-1]), "< 0.05 nats"))
            rel = (table["mean_decomposition"] - table["mean_quadrature"]).abs() / table["mean_quadrature"].abs()
            checks.append(
                _check(
                    f"upweight_mean_cross_check[gamma={gamma:g}]",
                    bool((rel <= tilting.MEAN_CHECK_RTOL).all()),
                    float(rel.max()),
                    f"relative difference <= {tilting.MEAN_CHECK_RTOL:g}",
                )
            )
            means = table["mean_decomposition"].to_numpy()
            if gamma == 1.0:
                checks.append(_check("upweight_mean_final[gamma=1]", means[-1] >= 0.95, float(means[-1]), ">= 0.95"))
            else:
                checks.append(
                    _check("upweight_mean_increasing[gamma=0.8]", _strictly(means, np.greater), means.tolist(), "strictly increasing")
                )

        mix = tilting.mixture_kl(MixtureKlInput(alpha=0.01, log_q=-1339.70))
        checks.append(
            _check("mixture_kl_first_order", abs(mix["first_order_kl"] - 13.35) <= 0.01, mix["first_order_kl"], "13.35 ± 0.01")
        )
        checks.append(
            _check(
                "mixture_kl_exact_vs_first_order",
                mix["exact_kl"] >= mix["first_order_kl"] - 0.01,
                mix["exact_kl"],
                ">= first order - 0.01",
            )
        )

        gaussian = distributions.make_distribution("normal:0,1")
        for s in (0.25, 0.5, 1.0):
            tilt = tilting.exp_tilt(gaussian, s)
            checks.append(_check(f"gaussian_tilt_mean[s={s:g}]", abs(tilt.tilted_mean - s) < 1e-5, tilt.tilted_mean, f"{s:g}"))
            checks.append(_check(f"gaussian_tilt_kl[s={s:g}]", abs(tilt.kl - s * s / 2) < 1e-5, tilt.kl, f"{s * s / 2:g}"))

        betas = [1.0 / 2**i for i in range(5)]
        expected_v = [tilting.kl_regularized_optimum(gaussian, gaussian, b)["expected_v"] for b in betas]
        checks.append(
            _check("kl_optimum_value_increasing", _strictly(expected_v, np.greater), expected_v, "strictly increasing as beta halves")
        )
        off = max(abs(v - 1 / b) for v, b in zip(expected_v, betas))
        checks.append(_check("kl_optimum_value_exact", off < 1e-5, off, "|E[V] - 1/beta| < 1e-5"))

        step, s = 1e-3, 1.0
        slope = (tilting.exp_tilt(gaussian, s + step).log_normalizer - tilting.exp_tilt(gaussian, s - step).log_normalizer) / (
            2 * step
        )
        mean = tilting.exp_tilt(gaussian, s).tilted_mean
        checks.append(_check("tilt_cumulant_slope[s=1]", abs(slope - mean) < 1e-5, slope, f"{mean:.6g} ± 1e-5"))

        try:
            tilting.exp_tilt(distributions.make_distribution("pareto:1.5"), 0.1)
            outcome = "converged"
        except DivergentNormalizerError:
            outcome = "divergent"
        checks.append(_check("pareto_tilt_divergent", outcome == "divergent", outcome, "divergent"))
        return checks

    def conditioning_suite(self) -> List[Dict[str, Any]]:
        checks = []
        normal = distributions.make_distribution("normal:0,1")
        pareto = distributions.make_distribution("pareto:1.5,1")
        t_grid = 10 ** np.arange(1.0, 6.01, 0.5)
        heavy = conditioning.condition_sweep(normal, pareto, t_grid, conditioning.make_scheme("sqrt"), workers=self.workers)
        last = heavy.iloc[-1]
        checks.append(
            _check("heavy_error_mean_vanishes", abs(last["conditional_mean"]) <= 0.01, float(last["conditional_mean"]), "|E| <= 0.01")
        )
        checks.append(
            _check("heavy_error_denominator", 0.99 <= last["denominator"] <= 1.01, float(last["denominator"]), "[0.99, 1.01]")
        )
        top = heavy.tail(3)
        for region in ("r1", "r2", "r3", "r4"):
            logs = top[f"{region}_numerator_log"].to_numpy()
            vanishing = bool(np.all(logs == -np.inf)) or _strictly(logs)
            checks.append(_check(f"heavy_error_{region}_numerator", vanishing, logs.tolist(), "decreasing over top three t"))
        r3_logs = top["r3_lemma2_log"].to_numpy()
        r3_vanishing = bool(np.all(r3_logs == -np.inf)) or _strictly(r3_logs)
        checks.append(_check("heavy_error_r3_rate", r3_vanishing, r3_logs.tolist(), "log decreasing over top three t"))

        expo = distributions.make_distribution("exponential:1")
        light_grid = [5.0, 10.0, 15.0, 20.0]
        light = conditioning.condition_sweep(expo, normal, light_grid, workers=self.workers)
        means = light["conditional_mean"].to_numpy()
        checks.append(_check("light_error_mean_increasing", _strictly(means, np.greater), means.tolist(), "strictly increasing"))
        checks.append(
            _check("light_error_mean_gain", means[-1] - means[0] > 3, float(means[-1] - means[0]), "E(20) - E(5) > 3")
        )
        ratio = conditioning.theorem6_ratio_diagnostic(expo, normal, 1.0, light_grid)["ratio"].to_numpy()
        checks.append(_check("light_error_ratio_drop", ratio[0] >= 10 * ratio[-1], float(ratio[0] / ratio[-1]), ">= 10x drop"))
        for t, value in zip(light_grid, means):
            mc = conditioning.conditional_mean_monte_carlo(
                conditioning.ConditioningProblem(expo, normal, t), samples=2_000_000, seed=self.seed
            )
            if mc.feasible:
                z = abs(value - mc.estimate) / mc.standard_error
                checks.append(_check(f"light_error_oracle[t={t:g}]", z <= 4, z, "within 4 standard errors"))

        dependent = conditioning.conditional_mean_dependent_counterexample(2.0)
        mc = conditioning.conditional_mean_monte_carlo(conditioning.dependent_problem(2.0), samples=10_000_000, seed=self.seed)
        z = abs(dependent - mc.estimate) / mc.standard_error
        checks.append(_check("dependent_oracle[t=2]", mc.feasible and z <= 4, z, "within 4 standard errors"))
        far = [conditioning.conditional_mean_dependent_counterexample(t) for t in (10.0, 20.0, 30.0)]
        checks.append(
            _check(
                "dependent_mean_bounded",
                all(0 < v <= 1 for v in far) and _strictly(far, np.greater),
                far,
                "in (0, 1] and increasing toward 1",
            )
        )
        return checks

    def mdp_suite(self) -> List[Dict[str, Any]]:
        checks = []
        chain = mdp.token_chain(alphabet=3, max_length=5)
        base_policy = mdp.Policy.uniform(chain)
        returns = distributions.make_distribution("pareto:1.5")
        chain = mdp.assign_band_returns(chain, base_policy, returns, atoms=64, seed=self.seed)
        base = mdp.enumerate_trajectories(chain, base_policy)
        checks.append(_check("token_chain_size", len(base) <= 400, len(base), "<= 400 trajectories"))

        search = mdp.goodhart_policy_search(chain, base_policy, target_mean=5.0, kl_budget=0.1)
        found = search.found
        checks.append(
            _check(
                "goodhart_policy_exists",
                found is not None,
                None if found is None else {k: found[k] for k in ("c", "t", "mean_return", "per_state_average")},
                "mean return > 5 with per-state average KL < 0.1",
            )
        )
        lift_tv = float(search.table["lift_tv"].max()) if len(search.table) else math.nan
        checks.append(_check("tree_lift_exact", lift_tv < 1e-10, lift_tv, "TV < 1e-10 on a tree"))

        lifted = mdp.enumerate_trajectories(chain, mdp.lift_policy(chain, base, base_policy))
        round_trip = mdp.total_variation(lifted, base)
        checks.append(_check("lift_round_trip", round_trip < 1e-10, round_trip, "TV < 1e-10"))

        other = mdp.enumerate_trajectories(chain, mdp.Policy.random(chain, np.random.default_rng(self.seed)))
        rule = mdp.kl_chain_rule(chain, other, base)
        checks.append(_check("kl_chain_rule", abs(rule["residual"]) < 1e-10, rule["residual"], "|residual| < 1e-10"))

        levels = sorted({chain.g(tau) for tau in base.measure})
        rho = mdp.upweight_trajectories(chain, base, 1.0, (levels[-2] + levels[-1]) / 2)
        upweighted = mdp.kl_chain_rule(chain, rho, base)
        checks.append(
            _check(
                "kl_chain_rule_upweighted_conditional",
                abs(upweighted["conditional"]) < 1e-10,
                upweighted["conditional"],
                "conditional term 0 when reweighting by g alone",
            )
        )
        terms = mdp.policy_kl_terms(chain, mdp.lift_policy(chain, rho, base_policy), base_policy)
        checks.append(
            _check(
                "per_state_average_below_sum",
                terms["per_state_average"] <= terms["per_state_sum"] + 1e-15
                and abs(terms["per_state_sum"] - upweighted["total"]) <= 1e-8 * max(upweighted["total"], 1e-300),
                terms,
                "average <= per-state sum = trajectory KL",
            )
        )

        merge = mdp.merge_chain(n_actions=2, depth=3)
        merge_policy = mdp.Policy.uniform(merge)
        merge_base = mdp.enumerate_trajectories(merge, merge_policy)
        # the action after d2t1 depends on which history reached it
        factors = {tau: 5.0 for tau in merge_base.measure if tau[1] == "1" and tau[-2] == "1"}
        target = mdp.reweight_trajectories(merge_base, factors)
        relifted = mdp.enumerate_trajectories(merge, mdp.lift_policy(merge, target, merge_policy))
        tv = mdp.total_variation(relifted, target)
        checks.append(_check("non_markov_lift_gap", tv > 1e-6, tv, "TV > 0 when the target is history dependent"))
        return checks

    def diagnostics_suite(self) -> List[Dict[str, Any]]:
        checks = []
        engine = diagnostics.diagnostics
        sample = engine.generate_samples("pareto:2", 100_000, self.seed)
        estimate = engine.hill_estimator(sample, [1000])[0].hill_estimate
        band = 3 * 0.5 / math.sqrt(1000)
        checks.append(_check("hill_pareto2_k1000", abs(estimate - 0.5) <= band, estimate, f"0.5 ± {band:.4f}"))

        for alpha in (1.0, 1.5, 2.0):
            grid = diagnostics.quantile_grid(distributions.make_distribution(f"pareto:{alpha}"), 100_000)
            value = engine.hill_estimator(grid, [100])[0].hill_estimate
            checks.append(
                _check(f"hill_exact_grid[alpha={alpha:g}]", abs(value - 1 / alpha) < 0.02, value, f"{1 / alpha:.4f} ± 0.02")
            )

        rep = engine.hill_replication(2.0, 10_000, 200, reps=200, seed=self.seed, workers=self.workers)
        checks.append(_check("hill_standard_error", abs(rep["sd_ratio"] - 1) <= 0.2, rep["sd_ratio"], "SE / SD within 20%"))

        for spec, expected in (("pareto:1.5", "consistent-with-heavy"), ("normal:0,1", "consistent-with-light")):
            acc = engine.verdict_accuracy(spec, expected, 100_000, reps=200, seed=self.seed, workers=self.workers)
            checks.append(_check(f"verdict_accuracy[{spec}]", acc["accuracy"] >= 0.95, acc["accuracy"], ">= 0.95"))
        return checks


def render_summary(report: Dict[str, Any], console: Console | None = None) -> None:
    console = console or Console(stderr=True)
    table = Table(title="verify")
    table.add_column("suite")
    table.add_column("check")
    table.add_column("result")
    table.add_column("measured", overflow="fold")
    for suite in report["suites"]:
        for check in suite["checks"]:
            measured = check["measured"]
            if isinstance(measured, float):
                measured = f"{measured:.6g}"
            table.add_row(
                suite["suite"],
                check["name"],
                "[green]pass[/green]" if check["passed"] else "[red]FAIL[/red]",
                str(measured),
            )
    console.print(table)


def ensure_passed(report: Dict[str, Any]) -> None:
    failed = [f"{s['suite']}:{c['name']}" for s in report["suites"] for c in s["checks"] if not c["passed"]]
    if failed:
        raise SuiteFailureError(f"{len(failed)} checks failed: {', '.join(failed)}")
