import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
import pandas as pd
from scipy.special import log_ndtr, logsumexp

from lib.distributions import Distribution, is_heavy_tailed, make_distribution, tail_dominance_exponent
from services.quadrature import quadrature
from services.sampling import sampling
from utils.errors import DenominatorUnderflowError, InvalidParameterError, QuadratureFailureError
from utils.logger import get_logger

logger = get_logger(__name__)

MC_MIN_ACCEPTANCE = 1e-5
MC_CHUNK = 1_000_000
# v range for the dependent counterexample; Gaussian mass outside is < 1e-14
DEPENDENT_V_BOUND = 8.0


def log_abs_expm1(a):
    """log|e^a - 1|, stable for both signs of a."""
    a = np.asarray(a, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        positive = a + np.log(-np.expm1(-np.abs(a)))
        negative = np.log(-np.expm1(-np.abs(a)))
    return np.where(a > 0, positive, negative)


@dataclass(frozen=True)
class ConditioningProblem:
    v_dist: Distribution
    x_dist: Distribution
    t: float
    dependence: Literal["independent", "vshaped_counterexample"] = "independent"

    def __post_init__(self):
        if self.v_dist.mean is None:
            raise InvalidParameterError("v_dist", self.v_dist.describe(), "needs a finite mean")
        if not (self.v_dist.has_density or self.v_dist.is_discrete):
            raise InvalidParameterError("v_dist", self.v_dist.describe(), "needs a density or atoms")

    @property
    def log_tail_x_t(self) -> float:
        return float(self.x_dist.log_tail(self.t))

    def log_q(self, v):
        """log Q_t(v) = log F̄_X(t - v) - log F̄_X(t)."""
        v = np.asarray(v, dtype=float)
        return np.asarray(self.x_dist.log_tail(self.t - v), dtype=float) - self.log_tail_x_t

    def breakpoints(self, extra=()) -> list[float]:
        t = self.t
        root = math.sqrt(abs(t))
        points = [0.0, root, -root, t - root, t, *self.v_dist.support, *extra]
        for edge in self.x_dist.support:
            if math.isfinite(edge):
                points.append(t - edge)
        return [p for p in points if math.isfinite(p)]


@dataclass
class _Accumulator:
    max_rel_error: float = 0.0

    def log_mass(
        self,
        v_dist: Distribution,
        log_g: Callable[[np.ndarray], np.ndarray],
        lower: float,
        upper: float,
        breakpoints,
        closed: tuple[bool, bool] = (True, True),
    ) -> float:
        """log ∫_lower^upper f_V(v) exp(log_g(v)) dv (or the atom sum)."""
        if v_dist.is_discrete:
            atoms = v_dist.atoms
            lo_ok = atoms >= lower if closed[0] else atoms > lower
            hi_ok = atoms <= upper if closed[1] else atoms < upper
            mask = lo_ok & hi_ok
            if not np.any(mask):
                return -math.inf
            with np.errstate(divide="ignore"):
                terms = np.log(v_dist.weights[mask]) + np.asarray(log_g(atoms[mask]), dtype=float)
            return float(logsumexp(terms))
        result = quadrature.log_integrate(lambda v: v_dist.log_pdf(v) + log_g(v), lower, upper, breakpoints)
        self.max_rel_error = max(self.max_rel_error, result.rel_error)
        return result.log_value


def _log_abs(v):
    with np.errstate(divide="ignore"):
        return np.log(np.abs(v))


def _conditional_pieces(problem: ConditioningProblem) -> dict:
    acc = _Accumulator()
    v, bps = problem.v_dist, problem.breakpoints()
    lo, hi = v.support
    log_den = acc.log_mass(v, problem.log_q, lo, hi, bps)
    log_pos = acc.log_mass(v, lambda x: _log_abs(x) + problem.log_q(x), max(lo, 0.0), hi, bps, (False, True))
    log_neg = acc.log_mass(v, lambda x: _log_abs(x) + problem.log_q(x), lo, min(hi, 0.0), bps, (True, False))
    return {"log_denominator": log_den, "log_positive": log_pos, "log_negative": log_neg, "rel_error": acc.max_rel_error}


def conditional_mean_report(problem: ConditioningProblem) -> dict:
    if problem.dependence == "vshaped_counterexample":
        value = conditional_mean_dependent_counterexample(problem.t)
        return {"t": problem.t, "conditional_mean": value, "denominator": math.nan, "rel_error": 0.0}

    if problem.log_tail_x_t == -math.inf:
        raise DenominatorUnderflowError(f"F̄_X({problem.t}) is zero; Q_t is undefined")
    pieces = _conditional_pieces(problem)
    log_den = pieces["log_denominator"]
    if not math.isfinite(log_den):
        logger.error(f"normalized denominator vanished at t={problem.t}")
        raise DenominatorUnderflowError(f"∫ f_V Q_t underflows at t={problem.t}")
    mean = math.exp(pieces["log_positive"] - log_den) - math.exp(pieces["log_negative"] - log_den)
    return {
        "t": problem.t,
        "conditional_mean": mean,
        "denominator": math.exp(log_den),
        "log_event_probability": log_den + problem.log_tail_x_t,
        "rel_error": pieces["rel_error"],
    }


def conditional_mean(problem: ConditioningProblem) -> float:
    """E[V | X + V >= t] as a ratio of Q_t-normalized integrals."""
    try:
        return conditional_mean_report(problem)["conditional_mean"]
    except QuadratureFailureError as e:
        logger.error(f"conditional_mean failed at t={problem.t}: {e}")
        raise


# ---- dependent counterexample -------------------------------------------


def _dependent_log_moments(t: float) -> tuple[float, float, float]:
    """log of Pr(X+V >= t), E[V+; X+V >= t], E[V-; X+V >= t] for the dependent law."""

    def log_phi(v):
        return -0.5 * np.asarray(v, dtype=float) ** 2 - 0.5 * math.log(2 * math.pi)

    def inner_event(v):
        return log_ndtr(-(t - np.asarray(v, dtype=float)) / 2.0)

    def sure_event(v):
        return np.zeros_like(np.asarray(v, dtype=float))

    bound = DEPENDENT_V_BOUND
    # |v| <= 1 carries the Gaussian X; outside it X = 0 and the event is v >= t
    segments = [
        (-1.0, 1.0, inner_event),
        (max(-bound, t), -1.0, sure_event),
        (max(1.0, t), max(1.0, t) + bound, sure_event),
    ]
    log_den, log_pos, log_neg = [], [], []
    for lower, upper, event in segments:
        if not lower < upper:
            continue
        bps = (lower, 0.0, upper)
        log_den.append(quadrature.log_integrate(lambda v: log_phi(v) + event(v), lower, upper, bps).log_value)
        log_pos.append(
            quadrature.log_integrate(lambda v: log_phi(v) + _log_abs(v) + event(v), max(lower, 0.0), upper, bps).log_value
        )
        log_neg.append(
            quadrature.log_integrate(lambda v: log_phi(v) + _log_abs(v) + event(v), lower, min(upper, 0.0), bps).log_value
        )
    return float(logsumexp(log_den)), float(logsumexp(log_pos)), float(logsumexp(log_neg))


def conditional_mean_dependent_counterexample(t: float) -> float:
    """E[V | X + V >= t] for V ~ N(0,1) and X | V ~ N(0, 4) if |V| <= 1, else X = 0.

    Tends to 1, not 0: the event is carried by |V| <= 1 with large X, whose mass
    decays like exp(-(t-1)^2/8) against exp(-t^2/2) for V >= t.
    """
    log_den, log_pos, log_neg = _dependent_log_moments(t)
    if not math.isfinite(log_den):
        raise DenominatorUnderflowError(f"Pr(X + V >= {t}) underflows for the dependent law")
    return math.exp(log_pos - log_den) - math.exp(log_neg - log_den)


# ---- Monte Carlo oracles ---------------------------------------------------


@dataclass
class MonteCarloEstimate:
    feasible: bool
    estimate: float = math.nan
    standard_error: float = math.nan
    accepted: int = 0
    samples: int = 0
    acceptance_rate: float = 0.0
    detail: dict = field(default_factory=dict)


def _rejection_mean(draw: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]], t, samples, seed):
    rng = sampling.stream(seed)
    count, total, total_sq = 0, 0.0, 0.0
    remaining = samples
    while remaining > 0:
        n = min(MC_CHUNK, remaining)
        v, x = draw(rng, n)
        kept = v[x + v >= t]
        count += kept.size
        total += float(kept.sum())
        total_sq += float(np.dot(kept, kept))
        remaining -= n
    if count < 2:
        return MonteCarloEstimate(False, samples=samples, accepted=count)
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0) * count / (count - 1)
    return MonteCarloEstimate(
        True, mean, math.sqrt(var / count), count, samples, count / samples
    )


def conditional_mean_monte_carlo(problem: ConditioningProblem, samples: int = 1_000_000, seed: int | None = None):
    """Rejection-sampling oracle; refused when Pr(X + V >= t) < 1e-5."""
    t = problem.t
    if problem.dependence == "vshaped_counterexample":
        log_den, _, _ = _dependent_log_moments(t)
        acceptance = math.exp(log_den)

        def draw(rng, n):
            v = rng.standard_normal(n)
            x = np.where(np.abs(v) <= 1.0, 2.0 * rng.standard_normal(n), 0.0)
            return v, x

    else:
        pieces = _conditional_pieces(problem)
        acceptance = math.exp(pieces["log_denominator"] + problem.log_tail_x_t)

        def draw(rng, n):
            return problem.v_dist.sample(rng, n), problem.x_dist.sample(rng, n)

    if acceptance < MC_MIN_ACCEPTANCE:
        logger.info(f"rejection oracle skipped at t={t}: acceptance {acceptance:.3g} < {MC_MIN_ACCEPTANCE}")
        return MonteCarloEstimate(False, detail={"acceptance_probability": acceptance})
    estimate = _rejection_mean(draw, t, samples, seed)
    estimate.detail["acceptance_probability"] = acceptance
    return estimate


# ---- region schemes ------------------------------------------------------


@dataclass(frozen=True)
class RegionScheme:
    name: str
    h: Callable[[float], float]
    p: float = 1.5

    def boundaries(self, t: float) -> dict:
        h = float(self.h(t))
        return {
            "r1": (-math.inf, -h, False, True),
            "r2": (-h, h, False, False),
            "r3": (h, t - h, True, True),
            "r4": (t - h, math.inf, False, False),
        }


H_SCHEMES: dict[str, Callable[[float], float]] = {
    "sqrt": lambda t: math.sqrt(t),
    "log_power": lambda t: math.log(t) ** 2,
}


def make_scheme(scheme: str = "sqrt", p: float = 1.5, custom: Callable[[float], float] | None = None) -> RegionScheme:
    if not p > 1:
        raise InvalidParameterError("p", p, "must be > 1")
    if scheme == "custom":
        if custom is None:
            raise InvalidParameterError("custom", None, "custom scheme needs an h function")
        return RegionScheme("custom", custom, p)
    if scheme not in H_SCHEMES:
        raise InvalidParameterError("scheme", scheme, "expected sqrt, log_power or custom")
    return RegionScheme(scheme, H_SCHEMES[scheme], p)


@dataclass
class HChoice:
    scheme: RegionScheme
    table: pd.DataFrame
    decreasing: bool
    h_below_half_t: bool


def choose_h(
    x_dist: Distribution,
    scheme: str = "sqrt",
    t_grid=(1e2, 1e3, 1e4, 1e5, 1e6),
    p: float = 1.5,
    custom: Callable[[float], float] | None = None,
) -> HChoice:
    """Picks h(t) and checks that Q_t is flat on [-h, h] along the grid."""
    verdict = is_heavy_tailed(x_dist).classification
    if verdict != "heavy":
        logger.warning(f"choose_h: {x_dist.describe()} classified {verdict}, h-insensitivity may fail")
    region = make_scheme(scheme, p, custom)

    rows = []
    for t in t_grid:
        t = float(t)
        h = float(region.h(t))
        log_tail_t = float(x_dist.log_tail(t))
        up = float(x_dist.log_tail(t - h)) - log_tail_t
        down = float(x_dist.log_tail(t + h)) - log_tail_t
        sup = max(math.expm1(up), -math.expm1(down))
        rows.append(
            {
                "t": t,
                "h": h,
                "sup_abs_q_minus_1": sup,
                "tail_ratio_t_minus_h": math.exp(up),
                "h_below_half_t": h < t / 2,
            }
        )
    table = pd.DataFrame(rows)
    sups = table["sup_abs_q_minus_1"].to_numpy()
    decreasing = bool(np.all(np.diff(sups) < 0)) if len(sups) > 1 else True
    below_half = bool(table["h_below_half_t"].all())
    if not decreasing:
        logger.warning(f"choose_h({region.name}): sup|Q-1| is not decreasing on the grid for {x_dist.describe()}")
    if not below_half:
        logger.warning(f"choose_h({region.name}): h(t) >= t/2 somewhere on the grid")
    return HChoice(region, table, decreasing, below_half)


# ---- region decomposition --------------------------------------------------


@dataclass
class RegionReport:
    t: float
    h: float
    table: pd.DataFrame
    denominator: float
    denominator_pieces: dict
    lemma2_log: float
    numerator_shift: float
    errors: dict = field(default_factory=dict)

    @property
    def lemma2_ratio(self) -> float:
        return math.exp(self.lemma2_log)

    @property
    def triangle_holds(self) -> bool:
        total = float(np.nansum(self.table["numerator"].to_numpy()))
        return self.numerator_shift <= total * (1 + 1e-9) + 1e-300


def region_decomposition(problem: ConditioningProblem, scheme: RegionScheme) -> RegionReport:
    if problem.dependence != "independent":
        raise InvalidParameterError("dependence", problem.dependence, "region decomposition needs independence")
    t = problem.t
    h = float(scheme.h(t))
    v = problem.v_dist
    bps = problem.breakpoints(extra=(h, -h, t - h))
    acc = _Accumulator()

    log_q = problem.log_q

    def log_weight(x):
        return _log_abs(x) + log_abs_expm1(log_q(x))

    log_den = acc.log_mass(v, log_q, *v.support, bps)
    if not math.isfinite(log_den):
        raise DenominatorUnderflowError(f"∫ f_V Q_t underflows at t={t}")

    rows, errors = [], {}
    for name, (lower, upper, lo_closed, hi_closed) in scheme.boundaries(t).items():
        if v.is_discrete:
            lower_eff, upper_eff = lower, upper
        else:
            lower_eff, upper_eff = max(lower, v.support[0]), min(upper, v.support[1])
        try:
            if lower_eff > upper_eff:
                log_num, log_mass = -math.inf, -math.inf
            else:
                closed = (lo_closed, hi_closed)
                log_num = acc.log_mass(v, log_weight, lower_eff, upper_eff, bps, closed)
                log_mass = acc.log_mass(v, log_q, lower_eff, upper_eff, bps, closed) - log_den
        except QuadratureFailureError as e:
            logger.error(f"region {name} at t={t}: {e}")
            errors[name] = str(e)
            log_num, log_mass = math.nan, math.nan
        rows.append(
            {
                "region": name,
                "lower": lower,
                "upper": upper,
                "numerator_log": log_num,
                "numerator": math.exp(log_num) if not math.isnan(log_num) else math.nan,
                "mass_log": log_mass,
                "mass": math.exp(log_mass) if not math.isnan(log_mass) else math.nan,
            }
        )
    table = pd.DataFrame(rows)

    # ∫ f_V (Q - 1) over three ranges; Q >= 1 exactly when v >= 0
    def signed(lower, upper):
        pos = acc.log_mass(v, lambda x: log_abs_expm1(log_q(x)), max(lower, 0.0), upper, bps)
        neg = acc.log_mass(v, lambda x: log_abs_expm1(log_q(x)), lower, min(upper, 0.0), bps)
        return math.exp(pos) - math.exp(neg)

    pieces = {
        "denominator_low": signed(-math.inf, -h),
        "denominator_mid": signed(-h, h),
        "denominator_high": signed(h, math.inf),
    }

    r3 = table.loc[table["region"] == "r3"].iloc[0]
    log_r3_event = r3["mass_log"] + log_den
    # log space: underflows to 0 for light-tailed V at large t
    r3_rate_log = math.log(t) + log_r3_event if t > 0 else math.nan

    cond = _conditional_pieces(problem)
    numerator = math.exp(cond["log_positive"]) - math.exp(cond["log_negative"])
    shift = abs(numerator - v.mean)
    return RegionReport(t, h, table, math.exp(log_den), pieces, r3_rate_log, shift, errors)


def region4_tail_bound(v_dist: Distribution, x_dist: Distribution, p: float, t_grid) -> pd.DataFrame:
    """t·F̄_V(t)/F̄_X(t) and ∫_t^∞ F̄_V / F̄_X(t) with the dominated-form bound t^{1-p}/(p-1)."""
    dominance = tail_dominance_exponent(v_dist, x_dist, p, t_grid)
    if dominance.trend != "decreasing-to-zero":
        logger.warning(f"region4_tail_bound: t^p F̄_V/F̄_X is {dominance.trend}; bounds need not vanish")

    rows = []
    for t in dominance.table["t"]:
        t = float(t)
        log_tail_x = float(x_dist.log_tail(t))
        log_tail_v = float(v_dist.log_tail(t))
        log_first = math.log(t) + log_tail_v - log_tail_x
        integral = quadrature.log_integrate(v_dist.log_tail, t, v_dist.support[1], (t,))
        log_second = integral.log_value - log_tail_x
        rows.append(
            {
                "t": t,
                "first_ratio": math.exp(log_first),
                "second_ratio": math.exp(log_second),
                "first_log": log_first,
                "second_log": log_second,
                "dominated_bound": t ** (1 - p) / (p - 1),
            }
        )
    table = pd.DataFrame(rows)
    table.attrs["first_trend"] = _trend(table["first_log"].to_numpy())
    table.attrs["second_trend"] = _trend(table["second_log"].to_numpy())
    table.attrs["dominance_trend"] = dominance.trend
    return table


def _trend(logs: np.ndarray) -> str:
    if np.all(logs == -np.inf):
        return "zero"
    if len(logs) > 1 and np.all(np.diff(logs) < 0):
        return "decreasing"
    return "not-decreasing"


# ---- below-c versus above-c+1 ratio ----------------------------------------


def theorem6_ratio_diagnostic(v_dist: Distribution, x_dist: Distribution, c: float, t_grid) -> pd.DataFrame:
    """Pr(V < c | X+V >= t) / Pr(V > c+1 | X+V >= t) against its tail-ratio bound."""
    log_p_above = float(v_dist.log_tail(c + 1))
    if log_p_above == -math.inf:
        raise InvalidParameterError("c", c, f"Pr(V > c + 1) is zero for {v_dist.describe()}")
    p_below = float(v_dist.cdf(c)) - (float(v_dist.pmf(c)) if v_dist.is_discrete else 0.0)
    q_below = v_dist.lower_mean(c) if p_below > 0 else 0.0

    rows = []
    for t in t_grid:
        t = float(t)
        problem = ConditioningProblem(v_dist, x_dist, t)
        acc = _Accumulator()
        lo, hi = v_dist.support
        bps = problem.breakpoints(extra=(c, c + 1))
        log_den = acc.log_mass(v_dist, problem.log_q, lo, hi, bps)
        log_below = acc.log_mass(v_dist, problem.log_q, lo, min(c, hi), bps, (True, False)) - log_den
        log_mid = acc.log_mass(v_dist, problem.log_q, max(c, lo), min(c + 1, hi), bps) - log_den
        log_above = acc.log_mass(v_dist, problem.log_q, max(c + 1, lo), hi, bps, (False, True)) - log_den

        log_ratio = log_below - log_above
        tail_step = float(x_dist.log_tail(t - c)) - float(x_dist.log_tail(t - c - 1))
        log_bound = tail_step + (math.log(p_below) if p_below > 0 else -math.inf) - log_p_above
        prob_below, prob_mid, prob_above = math.exp(log_below), math.exp(log_mid), math.exp(log_above)
        lower_bound = q_below * prob_below + c * prob_mid + (c + 1) * prob_above
        mean = conditional_mean(problem)
        rows.append(
            {
                "t": t,
                "ratio": math.exp(log_ratio),
                "bound": math.exp(log_bound),
                "ratio_within_bound": bool(log_ratio <= log_bound + 1e-9),
                "tail_step_ratio": math.exp(float(x_dist.log_tail(t + 1)) - float(x_dist.log_tail(t))),
                "conditional_mean": mean,
                "mean_lower_bound": lower_bound,
                "mean_above_bound": bool(mean >= lower_bound - 1e-9),
            }
        )
    table = pd.DataFrame(rows)
    steps = table["tail_step_ratio"].to_numpy()
    table.attrs["hypothesis_vanishing"] = bool(len(steps) > 1 and np.all(np.diff(steps) < 0) and steps[-1] < 1e-2)
    return table


# ---- sweeps -------------------------------------------------------------------


def condition_sweep(
    v_dist: Distribution,
    x_dist: Distribution,
    t_grid,
    scheme: RegionScheme | None = None,
    dependence: str = "independent",
    workers: int | None = None,
) -> pd.DataFrame:
    """Per-t conditional mean plus, for independent pairs, the region table."""
    scheme = scheme or make_scheme("sqrt")

    def row(t: float) -> dict:
        problem = ConditioningProblem(v_dist, x_dist, t, dependence)
        report = conditional_mean_report(problem)
        out = {"t": t, "conditional_mean": report["conditional_mean"], "denominator": report["denominator"]}
        if dependence != "independent":
            return out
        regions = region_decomposition(problem, scheme)
        for _, r in regions.table.iterrows():
            out[f"{r['region']}_numerator"] = r["numerator"]
            out[f"{r['region']}_numerator_log"] = r["numerator_log"]
        out["r3_lemma2_ratio"] = regions.lemma2_ratio
        out["r3_lemma2_log"] = regions.lemma2_log
        if t > 0:
            out["r4_tail_ratio_log"] = math.log(t) + float(v_dist.log_tail(t)) - problem.log_tail_x_t
            out["r4_dominated_bound"] = t ** (1 - scheme.p) / (scheme.p - 1)
        out.update(regions.denominator_pieces)
        return out

    rows = sampling.parallel_map(row, [float(t) for t in t_grid], workers)
    return pd.DataFrame(rows)


def dependent_problem(t: float) -> ConditioningProblem:
    """The dependent joint law; the X marginal recorded here is only nominal."""
    return ConditioningProblem(make_distribution("normal:0,1"), make_distribution("normal:0,2"), t, "vshaped_counterexample")
