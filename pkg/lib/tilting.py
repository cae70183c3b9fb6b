import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from database.schema.models import MixtureKlInput
from lib.distributions import Distribution
from services.quadrature import quadrature
from services.sampling import sampling
from utils.errors import (
    DivergentNormalizerError,
    InvalidParameterError,
    QuadratureFailureError,
    ThresholdTooDeepError,
)
from utils.logger import get_logger

logger = get_logger(__name__)

# log F̄_Q(t) below this cannot be rescaled without underflow
DEEPEST_LOG_TAIL = -708.0
MEAN_CHECK_RTOL = 1e-6


class TailUpweighted(Distribution):
    """Base law Q with the mass above t rescaled to c/t^gamma.

    Below t the density is (1 - m)/F_Q(t) · f_Q, above t it is m/F̄_Q(t) · f_Q,
    with m = c/t^gamma.
    """

    def __init__(self, base: Distribution, c: float, t: float, gamma: float = 1.0):
        if not c > 0:
            raise InvalidParameterError("c", c, "must be > 0")
        if not 0 < gamma <= 1:
            raise InvalidParameterError("gamma", gamma, "must lie in (0, 1]")
        if not t > c:
            raise InvalidParameterError("t", t, f"must exceed c={c}")
        mass = c / t**gamma
        if not 0 < mass < 1:
            raise InvalidParameterError("t", t, f"upweight mass c/t^gamma={mass:.3g} outside (0, 1)")
        if base.mean is None:
            raise InvalidParameterError("base", base.describe(), "needs a finite mean")

        log_tail_t = float(base.log_tail(t))
        if log_tail_t < DEEPEST_LOG_TAIL:
            logger.error(f"threshold t={t} too deep for {base.describe()}: log F̄={log_tail_t:.6g}")
            raise ThresholdTooDeepError(f"log F̄_Q({t}) = {log_tail_t:.6g} is below {DEEPEST_LOG_TAIL}")
        below_t = -math.expm1(log_tail_t)
        if below_t <= 0:
            raise InvalidParameterError("t", t, f"{base.describe()} puts no mass at or below t")

        super().__init__(base.support)
        self.base = base
        self.c, self.t, self.gamma = c, t, gamma
        self.mass = mass
        self.name = f"upweighted[{base.describe()}]"
        self.has_density = base.has_density
        self.base_log_tail_t = log_tail_t
        self.base_tail_t = math.exp(log_tail_t)
        self.base_cdf_t = below_t
        self.log_lower_scale = math.log1p(-mass) - math.log(below_t)
        self.log_upper_scale = math.log(mass) - log_tail_t

    def cdf(self, x):
        return 1.0 - self.tail(x)

    def tail(self, x):
        x = np.asarray(x, dtype=float)
        base_tail = self.base.tail(x)
        lower = self.mass + math.exp(self.log_lower_scale) * (base_tail - self.base_tail_t)
        return np.where(x <= self.t, lower, np.exp(self.log_upper_scale + self.base.log_tail(x)))

    def log_tail(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            lower = np.log(np.maximum(self.tail(np.minimum(x, self.t)), 0.0))
        return np.where(x <= self.t, lower, self.log_upper_scale + self.base.log_tail(x))

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        scale = np.where(x <= self.t, self.log_lower_scale, self.log_upper_scale)
        return scale + self.base.log_pdf(x)

    def quantile(self, p):
        return self.isf(1.0 - np.asarray(p, dtype=float))

    def isf(self, q):
        q = np.asarray(q, dtype=float)
        upper = self.base.isf(np.clip(q, 0.0, self.mass) * self.base_tail_t / self.mass)
        lower = self.base.quantile(np.clip(1.0 - q, 0.0, 1.0 - self.mass) * self.base_cdf_t / (1.0 - self.mass))
        return np.where(q < self.mass, upper, lower)

    def inverse_log_tail(self, level):
        if level < math.log(self.mass):
            return self.base.inverse_log_tail(level - self.log_upper_scale)
        return float(self.isf(math.exp(level)))

    def sample(self, rng, n):
        branch = rng.random(n) < self.mass
        w = rng.random(n)
        upper = self.base.isf(w * self.base_tail_t)
        lower = self.base.quantile(w * self.base_cdf_t)
        return np.where(branch, upper, lower)

    @property
    def mean(self):
        return upweighted_mean(self)

    def describe(self):
        return f"{self.name}(c={self.c:g}, t={self.t:g}, gamma={self.gamma:g})"


def build_tail_upweighted(base: Distribution, c: float, t: float, gamma: float = 1.0) -> TailUpweighted:
    return TailUpweighted(base, c, t, gamma)


def _decomposition_mean(p: TailUpweighted, mass_scale: float = 1.0) -> float:
    # mass_scale != 1 perturbs the formula; used by the verify fault hook
    base = p.base
    upper = base.upper_mean(p.t)
    lower = base.lower_mean(p.t)
    return base.mean + (mass_scale * p.mass - p.base_tail_t) * (upper - lower)


def upweighted_mean(p: TailUpweighted) -> float:
    try:
        return _decomposition_mean(p)
    except QuadratureFailureError:
        logger.error(f"upweighted_mean failed for {p.describe()}")
        raise


def upweighted_mean_quadrature(p: TailUpweighted) -> float:
    """Direct integral of x against the piecewise density (or atoms)."""
    if p.base.is_discrete:
        atoms, weights = p.base.atoms, p.base.weights
        scale = np.where(atoms <= p.t, math.exp(p.log_lower_scale), math.exp(p.log_upper_scale))
        return float(np.dot(atoms, weights * scale))

    lo, hi = p.support
    points = (lo, 0.0, p.t, hi)
    positive = quadrature.log_integrate(lambda x: np.log(x) + p.log_pdf(x), max(lo, 0.0), hi, points)
    negative = quadrature.log_integrate(lambda x: np.log(-x) + p.log_pdf(x), lo, min(hi, 0.0), points)
    residual = max(positive.rel_error, negative.rel_error)
    if residual > MEAN_CHECK_RTOL:
        logger.error(f"direct mean quadrature residual {residual:.3g} for {p.describe()}")
        raise QuadratureFailureError("direct mean quadrature did not converge", residual)
    return math.exp(positive.log_value) - math.exp(negative.log_value)


def mean_cross_check(p: TailUpweighted, mass_scale: float = 1.0) -> dict:
    decomposition = _decomposition_mean(p, mass_scale)
    direct = upweighted_mean_quadrature(p)
    rel_diff = abs(decomposition - direct) / max(abs(direct), 1e-300)
    return {
        "mean_decomposition": decomposition,
        "mean_quadrature": direct,
        "rel_diff": rel_diff,
        "ok": rel_diff <= MEAN_CHECK_RTOL,
    }


def upweighted_kl(p: TailUpweighted) -> float:
    """Two-term closed form; each ratio is constant on its piece."""
    m = p.mass
    log_below = math.log(p.base_cdf_t)
    kl = (1.0 - m) * (math.log1p(-m) - log_below) + m * (math.log(m) - p.base_log_tail_t)
    return max(kl, 0.0)


def upweight_bounds(p: TailUpweighted) -> dict:
    mu = p.base.mean
    return {
        "mean_lower_bound": mu + (p.mass - p.base_tail_t) * (p.t - mu),
        "kl_upper_bound": -p.mass * p.base_log_tail_t,
        "bounds_apply": p.mass >= p.base_tail_t and p.t > mu,
    }


def sweep_upweighting(
    base: Distribution, c: float, gamma: float, t_grid, workers: int | None = None, mass_scale: float = 1.0
) -> pd.DataFrame:
    """One row per threshold: mass, both means, exact KL, and the bounds."""

    def row(t: float) -> dict:
        p = build_tail_upweighted(base, c, t, gamma)
        check = mean_cross_check(p, mass_scale)
        bounds = upweight_bounds(p)
        return {
            "t": t,
            "mass": p.mass,
            "mean_decomposition": check["mean_decomposition"],
            "mean_quadrature": check["mean_quadrature"],
            "kl_exact": upweighted_kl(p),
            "mean_lower_bound": bounds["mean_lower_bound"],
            "kl_upper_bound": bounds["kl_upper_bound"],
        }

    rows = sampling.parallel_map(row, [float(t) for t in t_grid], workers)
    return pd.DataFrame(rows)


# ---- exponential tilting -------------------------------------------------


@dataclass(frozen=True)
class ExpTilt:
    base: Distribution
    s: float
    log_normalizer: float
    tilted_mean: float

    @property
    def kl(self) -> float:
        return max(self.s * self.tilted_mean - self.log_normalizer, 0.0)

    def log_pdf(self, x):
        return self.base.log_pdf(x) + self.s * np.asarray(x, dtype=float) - self.log_normalizer


def _discrete_tilt(base, s: float) -> ExpTilt:
    log_w = np.log(base.weights) + s * base.atoms
    log_z = float(logsumexp(log_w))
    probs = np.exp(log_w - log_z)
    return ExpTilt(base, s, log_z, float(np.dot(probs, base.atoms)))


def exp_tilt(base: Distribution, s: float) -> ExpTilt:
    """Reweights base by e^{s x}; raises when E[e^{sX}] diverges."""
    if s == 0:
        mean = base.mean
        if mean is None:
            raise InvalidParameterError("base", base.describe(), "needs a finite mean")
        return ExpTilt(base, 0.0, 0.0, mean)
    if base.is_discrete and base.support[1] < math.inf:
        return _discrete_tilt(base, s)
    if not base.has_density:
        raise InvalidParameterError("base", base.describe(), "exponential tilt needs a density")

    def phi(x):
        return s * x + base.log_pdf(x)

    direction = 1 if s > 0 else -1
    anchor = float(base.quantile(0.5))
    lo, hi = base.support
    far = float(base.quantile(1 - 1e-12 if s > 0 else 1e-12))
    min_radius = 4.0 * abs(far - anchor) if math.isfinite(far) else 0.0
    expansion = quadrature.expanding_log_integral(phi, anchor, direction, breakpoints=(lo, hi), min_radius=min_radius)
    if not expansion.converged:
        logger.error(
            f"E[exp({s:g} X)] diverges for {base.describe()}: partial log integral "
            f"{expansion.partial_logs[-1]:.4g} at radius {expansion.radii[-1]:.3g}"
        )
        raise DivergentNormalizerError(f"normalizer E[exp({s:g} X)] is infinite for {base.describe()}")

    points = (lo, 0.0, anchor, hi)
    log_z = quadrature.log_integrate(phi, lo, hi, points).log_value
    positive = quadrature.log_integrate(lambda x: np.log(x) + phi(x), max(lo, 0.0), hi, points)
    negative = quadrature.log_integrate(lambda x: np.log(-x) + phi(x), lo, min(hi, 0.0), points)
    mean = math.exp(positive.log_value - log_z) - math.exp(negative.log_value - log_z)
    logger.debug(f"tilt {base.describe()} s={s:g}: log Z={log_z:.10g}, mean={mean:.10g}")
    return ExpTilt(base, s, log_z, mean)


def tilt_frontier(base: Distribution, s_grid) -> pd.DataFrame:
    base_mean = base.mean
    rows = []
    for s in s_grid:
        tilt = exp_tilt(base, float(s))
        rows.append(
            {"s": float(s), "tilted_mean": tilt.tilted_mean, "mean_shift": tilt.tilted_mean - base_mean, "kl": tilt.kl}
        )
    return pd.DataFrame(rows)


def kl_regularized_optimum(x_dist: Distribution, v_dist: Distribution, beta: float) -> dict:
    """Optimum of E[X + V] - beta·KL for independent X, V: the product tilt at rate 1/beta."""
    if not beta > 0:
        raise InvalidParameterError("beta", beta, "must be > 0")
    rate = 1.0 / beta
    tilt_x = exp_tilt(x_dist, rate)
    tilt_v = exp_tilt(v_dist, rate)
    return {
        "beta": beta,
        "tilt_rate": rate,
        "expected_u": tilt_x.tilted_mean + tilt_v.tilted_mean,
        "expected_v": tilt_v.tilted_mean,
        "kl": tilt_x.kl + tilt_v.kl,
    }


# ---- KL of conditioning and of mixtures ---------------------------------


def conditioning_kl(base: Distribution, t: float) -> dict:
    """Conditioning on X > t costs -log F̄(t) nats."""
    log_tail_t = float(base.log_tail(t))
    if log_tail_t == -math.inf:
        raise InvalidParameterError("t", t, f"{base.describe()} puts no mass above t")
    return {"t": t, "kl": -log_tail_t, "mean_gain": base.upper_mean(t) - base.mean}


def mixture_kl(inp: MixtureKlInput, base: Distribution | None = None) -> dict:
    alpha, log_q = inp.alpha, inp.log_q
    log_alpha = math.log(alpha)
    log_event = float(np.logaddexp(math.log1p(-alpha) + log_q, log_alpha))
    exact = math.exp(log_event) * (log_event - log_q) + (1.0 - alpha) * (-math.expm1(log_q)) * math.log1p(-alpha)
    result = {
        "alpha": alpha,
        "log_q": log_q,
        "exact_kl": max(exact, 0.0),
        "first_order_kl": alpha * (log_alpha - log_q),
        "expected_reward_gain": alpha * inp.delta_reward,
        "first_order_regime": inp.first_order_regime,
    }
    if base is not None:
        threshold = base.inverse_log_tail(-result["exact_kl"])
        result["conditioning_threshold"] = threshold
        result["conditioning_gain"] = conditioning_kl(base, threshold)["mean_gain"]
    return result
