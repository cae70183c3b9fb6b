import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.special import gammaln, log_ndtr

from database.schema.models import FAMILY_NAMES, FamilySpec
from services.quadrature import quadrature
from utils.errors import BudgetExhaustedError, InvalidParameterError, QuadratureFailureError, SpecParseError
from utils.logger import get_logger

logger = get_logger(__name__)

# log F̄ below this is out of reach of exp(); families switch to closed forms
LOG_TINY = -700.0


class Distribution(ABC):
    """Immutable univariate law. All methods accept scalars or numpy arrays."""

    name: str = "distribution"
    has_density: bool = True
    is_discrete: bool = False

    def __init__(self, support: tuple[float, float]):
        self.support = support

    # ---- required ------------------------------------------------------

    @abstractmethod
    def cdf(self, x): ...

    @abstractmethod
    def tail(self, x): ...

    @abstractmethod
    def log_tail(self, x): ...

    @abstractmethod
    def quantile(self, p): ...

    @abstractmethod
    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray: ...

    @property
    @abstractmethod
    def mean(self) -> float | None: ...

    # ---- shared --------------------------------------------------------

    def log_pdf(self, x):
        raise NotImplementedError(f"{self.name} has no density")

    def pdf(self, x):
        return np.exp(self.log_pdf(x))

    def isf(self, p):
        """Upper quantile: x with tail(x) = p."""
        return self.quantile(1.0 - np.asarray(p, dtype=float))

    def inverse_log_tail(self, level: float) -> float:
        """x with log_tail(x) = level, valid far beyond the 1e-300 range."""
        if level >= 0:
            return float(self.support[0])
        if level > LOG_TINY:
            return float(self.isf(math.exp(level)))
        return self._solve_log_tail(level)

    def _solve_log_tail(self, level: float) -> float:
        lo = float(self.isf(math.exp(LOG_TINY / 2)))
        hi = max(2.0 * abs(lo), 1.0)
        for _ in range(1100):
            if self.log_tail(hi) < level:
                break
            lo, hi = hi, hi * 2.0
        else:
            raise InvalidParameterError("level", level, f"beyond the numeric range of {self.name}")
        return float(optimize.brentq(lambda x: self.log_tail(x) - level, lo, hi, xtol=1e-12, rtol=1e-14))

    def upper_mean(self, t: float) -> float:
        """E[X | X > t] = t + (∫_t^∞ F̄) / F̄(t), integrated in log space."""
        log_tail_t = float(self.log_tail(t))
        if log_tail_t == -math.inf:
            raise InvalidParameterError("t", t, f"{self.name} puts no mass above t")
        integral = quadrature.log_integrate(self.log_tail, t, self.support[1], breakpoints=(t,))
        return t + math.exp(integral.log_value - log_tail_t)

    def lower_mean(self, t: float) -> float:
        """E[X | X <= t] from the total-mean identity."""
        mean = self.mean
        if mean is None:
            raise InvalidParameterError("mean", None, f"{self.name} has no finite mean")
        below = float(self.cdf(t))
        if below <= 0:
            raise InvalidParameterError("t", t, f"{self.name} puts no mass at or below t")
        above = float(self.tail(t))
        upper = self.upper_mean(t) if above > 0 else 0.0
        return (mean - above * upper) / below

    def describe(self) -> str:
        return self.name

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.describe()}>"


class ScipyFamily(Distribution):
    """Continuous family backed by a frozen scipy.stats law."""

    def __init__(self, spec: FamilySpec, frozen, support: tuple[float, float]):
        super().__init__(support)
        self.spec = spec
        self.name = spec.name
        self._frozen = frozen

    def cdf(self, x):
        return self._frozen.cdf(x)

    def tail(self, x):
        return self._frozen.sf(x)

    def log_tail(self, x):
        return self._frozen.logsf(x)

    def log_pdf(self, x):
        return self._frozen.logpdf(x)

    def quantile(self, p):
        return self._frozen.ppf(p)

    def isf(self, p):
        return self._frozen.isf(p)

    def sample(self, rng, n):
        return np.asarray(self._frozen.rvs(size=n, random_state=rng), dtype=float)

    @property
    def mean(self):
        value = float(self._frozen.mean())
        return value if math.isfinite(value) else None

    def describe(self) -> str:
        return str(self.spec)


class Normal(ScipyFamily):
    def __init__(self, spec: FamilySpec, mu: float, sigma: float):
        super().__init__(spec, stats.norm(loc=mu, scale=sigma), (-math.inf, math.inf))
        self.mu, self.sigma = mu, sigma

    def log_tail(self, x):
        return log_ndtr(-(np.asarray(x, dtype=float) - self.mu) / self.sigma)


class Exponential(ScipyFamily):
    def __init__(self, spec: FamilySpec, rate: float):
        super().__init__(spec, stats.expon(scale=1.0 / rate), (0.0, math.inf))
        self.rate = rate

    def log_tail(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0, 0.0, -self.rate * x)

    def _solve_log_tail(self, level):
        return -level / self.rate


class Pareto(ScipyFamily):
    def __init__(self, spec: FamilySpec, shape: float, scale: float):
        super().__init__(spec, stats.pareto(b=shape, scale=scale), (scale, math.inf))
        self.shape, self.scale = shape, scale

    def log_tail(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(x <= self.scale, 0.0, self.shape * (math.log(self.scale) - np.log(x)))

    def _solve_log_tail(self, level):
        return self.scale * math.exp(-level / self.shape)


class StudentT(ScipyFamily):
    def __init__(self, spec: FamilySpec, df: float, loc: float, scale: float):
        super().__init__(spec, stats.t(df=df, loc=loc, scale=scale), (-math.inf, math.inf))
        self.df, self.loc, self.scale = df, loc, scale
        nu = df
        # F̄(z) ~ K z^-nu / nu for standardized z -> infinity
        self._log_k = (
            gammaln((nu + 1) / 2) - 0.5 * math.log(nu * math.pi) - gammaln(nu / 2) + 0.5 * (nu + 1) * math.log(nu)
        )

    def log_tail(self, x):
        z = (np.asarray(x, dtype=float) - self.loc) / self.scale
        sf = self._frozen.sf(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            asymptotic = self._log_k - math.log(self.df) - self.df * np.log(np.maximum(z, 1e-300))
            return np.where(sf > 1e-280, np.log(np.maximum(sf, 1e-300)), asymptotic)

    def _solve_log_tail(self, level):
        z = math.exp((self._log_k - math.log(self.df) - level) / self.df)
        return self.loc + self.scale * z


class LogNormal(ScipyFamily):
    def __init__(self, spec: FamilySpec, mu: float, sigma: float):
        super().__init__(spec, stats.lognorm(s=sigma, scale=math.exp(mu)), (0.0, math.inf))
        self.mu, self.sigma = mu, sigma

    def log_tail(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            z = (np.log(np.maximum(x, 0.0)) - self.mu) / self.sigma
        return np.where(x <= 0, 0.0, log_ndtr(-z))


class WeibullStretched(ScipyFamily):
    """Tail exp(-(x/scale)^a); heavy-tailed for 0 < a < 1."""

    def __init__(self, spec: FamilySpec, a: float, scale: float):
        super().__init__(spec, stats.weibull_min(c=a, scale=scale), (0.0, math.inf))
        self.a, self.scale = a, scale

    def log_tail(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x <= 0, 0.0, -((np.maximum(x, 0.0) / self.scale) ** self.a))

    def _solve_log_tail(self, level):
        return self.scale * (-level) ** (1.0 / self.a)


class Uniform(ScipyFamily):
    def __init__(self, spec: FamilySpec, low: float, high: float):
        super().__init__(spec, stats.uniform(loc=low, scale=high - low), (low, high))
        self.low, self.high = low, high

    def log_tail(self, x):
        with np.errstate(divide="ignore"):
            return np.log(self._frozen.sf(x))

    def _solve_log_tail(self, level):
        return self.high


class DiscreteDistribution(Distribution):
    """Finite atoms with weights. Empirical laws may carry a Hill tail beyond the largest atom."""

    has_density = False
    is_discrete = True

    def __init__(self, atoms, weights=None, name: str = "discrete", hill_tail=None):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.size == 0:
            raise InvalidParameterError("atoms", [], "at least one atom is required")
        if weights is None:
            weights = np.full(atoms.size, 1.0 / atoms.size)
        weights = np.asarray(weights, dtype=float)
        if weights.shape != atoms.shape or np.any(weights < 0):
            raise InvalidParameterError("weights", weights.tolist(), "must be nonnegative and match atoms")
        total = weights.sum()
        if not abs(total - 1.0) < 1e-9:
            raise InvalidParameterError("weights", float(total), "must sum to 1")

        frame = pd.DataFrame({"atom": atoms, "weight": weights / total})
        frame = frame[frame["weight"] > 0].groupby("atom", sort=True, as_index=False)["weight"].sum()
        self.atoms = frame["atom"].to_numpy()
        self.weights = frame["weight"].to_numpy()
        self._cum = np.cumsum(self.weights)
        # weight strictly above atoms[i-1]; _upper[0] = 1
        self._upper = np.concatenate([np.cumsum(self.weights[::-1])[::-1], [0.0]])
        self.hill_tail = hill_tail
        self._warned = False
        upper = math.inf if hill_tail is not None else float(self.atoms[-1])
        super().__init__((float(self.atoms[0]), upper))
        self.name = name

    def _step_tail(self, x):
        idx = np.searchsorted(self.atoms, np.asarray(x, dtype=float), side="right")
        return self._upper[idx]

    def extrapolated(self, x):
        """True where a tail query is answered by the Hill extrapolation."""
        x = np.asarray(x, dtype=float)
        if self.hill_tail is None:
            return np.zeros_like(x, dtype=bool)
        return x >= self.atoms[-1]

    def _hill_log_tail(self, x):
        return np.minimum(self.hill_tail.log_tail(x), math.log(self.weights[-1]))

    def cdf(self, x):
        return 1.0 - self.tail(x)

    def tail(self, x):
        return np.exp(self.log_tail(x))

    def log_tail(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore"):
            step = np.log(self._step_tail(x))
        if self.hill_tail is None:
            return step
        beyond = self.extrapolated(x)
        if np.any(beyond):
            if not self._warned:
                self._warned = True
                logger.warning(f"{self.name}: tail query beyond sample maximum {self.atoms[-1]:.6g} uses Hill extrapolation")
            return np.where(beyond, self._hill_log_tail(np.where(beyond, x, self.atoms[-1] + 1.0)), step)
        return step

    def pmf(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.clip(np.searchsorted(self.atoms, x, side="left"), 0, self.atoms.size - 1)
        return np.where(self.atoms[idx] == x, self.weights[idx], 0.0)

    def quantile(self, p):
        p = np.asarray(p, dtype=float)
        idx = np.clip(np.searchsorted(self._cum, p - 1e-15, side="left"), 0, self.atoms.size - 1)
        return self.atoms[idx]

    def isf(self, p):
        p = np.asarray(p, dtype=float)
        # smallest atom whose strict upper mass is <= p
        idx = np.searchsorted(-self._upper[1:], -p - 1e-15, side="left")
        return self.atoms[np.clip(idx, 0, self.atoms.size - 1)]

    def inverse_log_tail(self, level):
        if self.hill_tail is not None and level < math.log(self.weights[-1]):
            return max(float(self.hill_tail.inverse_log_tail(level)), float(self.atoms[-1]))
        return float(self.isf(math.exp(level)))

    def sample(self, rng, n):
        return rng.choice(self.atoms, size=n, p=self.weights)

    @property
    def mean(self):
        return float(np.dot(self.atoms, self.weights))

    def upper_mean(self, t):
        mask = self.atoms > t
        mass = self.weights[mask].sum()
        if mass <= 0:
            raise InvalidParameterError("t", t, f"{self.name} puts no mass above t")
        return float(np.dot(self.atoms[mask], self.weights[mask]) / mass)

    def lower_mean(self, t):
        mask = self.atoms <= t
        mass = self.weights[mask].sum()
        if mass <= 0:
            raise InvalidParameterError("t", t, f"{self.name} puts no mass at or below t")
        return float(np.dot(self.atoms[mask], self.weights[mask]) / mass)

    def describe(self):
        if self.atoms.size == 1:
            return f"point_mass:{self.atoms[0]:g}"
        return f"{self.name}[{self.atoms.size} atoms]"


# ---- spec grammar ------------------------------------------------------

_NUMBER = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?|[+-]?inf")


def parse_family_spec(text: str) -> FamilySpec:
    """Parses `name[:p1,p2,...]` or `empirical:@path`."""
    text = text.strip()
    name, sep, rest = text.partition(":")
    if name not in FAMILY_NAMES:
        raise SpecParseError(text, 0, f"unknown family '{name}' (expected one of {', '.join(FAMILY_NAMES)})")
    offset = len(name) + len(sep)
    if name == "empirical":
        if not rest.startswith("@") or len(rest) < 2:
            raise SpecParseError(text, offset, "empirical needs '@path'")
        return FamilySpec(name=name, source=rest[1:])
    if not sep:
        return FamilySpec(name=name)
    if not rest:
        raise SpecParseError(text, offset, "expected a parameter after ':'")

    params = []
    position = offset
    for token in rest.split(","):
        stripped = token.strip()
        lead = len(token) - len(token.lstrip())
        if not stripped or not _NUMBER.fullmatch(stripped):
            raise SpecParseError(text, position + lead, f"'{stripped}' is not a number")
        params.append(float(stripped))
        position += len(token) + 1
    return FamilySpec(name=name, params=tuple(params))


_DEFAULTS = {
    "normal": ("mu", 0.0, "sigma", 1.0),
    "exponential": ("rate", 1.0),
    "pareto": ("shape", None, "scale", 1.0),
    "student_t": ("df", None, "loc", 0.0, "scale", 1.0),
    "lognormal": ("mu", 0.0, "sigma", 1.0),
    "weibull_stretched": ("a", None, "scale", 1.0),
    "uniform": ("low", 0.0, "high", 1.0),
    "point_mass": ("value", 0.0),
}


def _bind(spec: FamilySpec) -> dict[str, float]:
    layout = _DEFAULTS[spec.name]
    names, defaults = layout[0::2], layout[1::2]
    if len(spec.params) > len(names):
        raise InvalidParameterError(
            f"{spec.name}.params", list(spec.params), f"takes at most {len(names)} parameters ({', '.join(names)})"
        )
    bound = {}
    for i, (field, default) in enumerate(zip(names, defaults)):
        if i < len(spec.params):
            bound[field] = spec.params[i]
        elif default is None:
            raise InvalidParameterError(f"{spec.name}.{field}", None, "required")
        else:
            bound[field] = default
    for field, value in bound.items():
        if not math.isfinite(value):
            raise InvalidParameterError(f"{spec.name}.{field}", value, "must be finite")
    return bound


def _require_positive(spec: FamilySpec, params: dict, *fields: str):
    for field in fields:
        if not params[field] > 0:
            raise InvalidParameterError(f"{spec.name}.{field}", params[field], "must be > 0")


def make_distribution(spec: FamilySpec | str) -> Distribution:
    if isinstance(spec, str):
        spec = parse_family_spec(spec)
    if spec.name == "empirical":
        return _make_empirical(spec)

    p = _bind(spec)
    match spec.name:
        case "normal":
            _require_positive(spec, p, "sigma")
            return Normal(spec, p["mu"], p["sigma"])
        case "exponential":
            _require_positive(spec, p, "rate")
            return Exponential(spec, p["rate"])
        case "pareto":
            _require_positive(spec, p, "shape", "scale")
            return Pareto(spec, p["shape"], p["scale"])
        case "student_t":
            _require_positive(spec, p, "df", "scale")
            return StudentT(spec, p["df"], p["loc"], p["scale"])
        case "lognormal":
            _require_positive(spec, p, "sigma")
            return LogNormal(spec, p["mu"], p["sigma"])
        case "weibull_stretched":
            _require_positive(spec, p, "a", "scale")
            return WeibullStretched(spec, p["a"], p["scale"])
        case "uniform":
            if not p["high"] > p["low"]:
                raise InvalidParameterError("uniform.high", p["high"], "must exceed low")
            return Uniform(spec, p["low"], p["high"])
        case "point_mass":
            return DiscreteDistribution([p["value"]], [1.0], name="point_mass")
    raise InvalidParameterError("name", spec.name, "unsupported family")


def _make_empirical(spec: FamilySpec) -> DiscreteDistribution:
    from lib.diagnostics import diagnostics

    path = Path(spec.source)
    fmt = "json_array" if path.suffix.lower() == ".json" else "csv_single_column"
    samples = diagnostics.ingest_samples(path, fmt)
    values = np.asarray(samples.values, dtype=float)
    hill = diagnostics.hill_tail(values)
    logger.info(f"empirical law from {path}: n={values.size}, hill gamma={hill.gamma:.4g} above {hill.threshold:.6g}")
    return DiscreteDistribution(values, name=f"empirical:@{spec.source}", hill_tail=hill)


def inverse_log_tail(d: Distribution, level: float) -> float:
    return d.inverse_log_tail(level)


# ---- tail-class predicates ---------------------------------------------


@dataclass
class HeavyTailVerdict:
    classification: str
    evidence: pd.DataFrame


DEFAULT_RATES = (0.01, 0.1, 1.0)
DEFAULT_LEVELS = tuple(-np.geomspace(math.log(2.0), 690.0, 40))


def default_probe_grid(d: Distribution, rates=DEFAULT_RATES, levels=DEFAULT_LEVELS) -> list[tuple[float, float]]:
    """Probe points at log-tail levels from log 0.5 down to -690, for every rate."""
    xs = [d.inverse_log_tail(float(level)) for level in levels]
    return [(rate, x) for rate in rates for x in xs]


def is_heavy_tailed(d: Distribution, probe_grid: list[tuple[float, float]] | None = None) -> HeavyTailVerdict:
    if d.support[1] < math.inf:
        evidence = pd.DataFrame([{"rate": r, "x": d.support[1], "value": -math.inf} for r in DEFAULT_RATES])
        return HeavyTailVerdict("light", evidence)
    grid = probe_grid if probe_grid is not None else default_probe_grid(d)
    if not grid:
        raise InvalidParameterError("probe_grid", grid, "must be nonempty")

    frame = pd.DataFrame(grid, columns=["rate", "x"]).sort_values(["rate", "x"], kind="stable")
    frame["log_tail"] = np.asarray(d.log_tail(frame["x"].to_numpy()), dtype=float)
    frame["value"] = frame["rate"] * frame["x"] + frame["log_tail"]
    frame = frame.reset_index(drop=True)

    heavy_all, light_any = True, False
    for rate, rows in frame.groupby("rate", sort=True):
        values = rows["value"].to_numpy()
        window = values[-max(2, len(values) // 4) :]
        steps = np.diff(window)
        increasing = bool(np.all(steps > 0)) and values[-1] > 0
        decreasing = bool(np.all(steps < 0)) and values[-1] < -50
        heavy_all &= increasing
        light_any |= decreasing
        logger.debug(f"{d.describe()} rate {rate}: final {values[-1]:.4g}, increasing={increasing}")

    if heavy_all:
        verdict = "heavy"
    elif light_any:
        verdict = "light"
    else:
        verdict = "inconclusive"
    return HeavyTailVerdict(verdict, frame)


@dataclass
class RatioEstimate:
    estimate: float
    error: float
    method: str


def subexponential_ratio(
    d: Distribution,
    x: float,
    method: str = "quadrature",
    budget: int = 1_000_000,
    cap: float | None = None,
    rng: np.random.Generator | None = None,
) -> RatioEstimate:
    """Pr(X1 + X2 > x) / Pr(X > x) for two independent copies of d."""
    log_tail_x = float(d.log_tail(x))
    if log_tail_x == -math.inf:
        raise InvalidParameterError("x", x, f"outside the support of {d.describe()}")

    if method == "quadrature":
        if not d.has_density:
            raise InvalidParameterError("method", method, f"{d.describe()} has no density")
        half = x / 2.0
        try:
            conv = quadrature.log_integrate(
                lambda y: d.log_pdf(y) + d.log_tail(x - y),
                d.support[0],
                half,
                breakpoints=(d.support[0], half),
            )
        except QuadratureFailureError:
            logger.error(f"convolution quadrature failed for {d.describe()} at x={x}")
            raise
        both_high = 2.0 * float(d.log_tail(half))
        log_sum_tail = float(np.logaddexp(math.log(2.0) + conv.log_value, both_high))
        estimate = math.exp(log_sum_tail - log_tail_x)
        error = estimate * conv.rel_error
    elif method == "monte_carlo":
        from services.sampling import sampling

        rng = rng if rng is not None else sampling.stream()
        s = d.sample(rng, budget) + d.sample(rng, budget)
        p_hat = float(np.mean(s > x))
        tail_x = math.exp(log_tail_x)
        estimate = p_hat / tail_x
        error = math.sqrt(max(p_hat * (1 - p_hat), 1e-300) / budget) / tail_x
    else:
        raise InvalidParameterError("method", method, "expected quadrature or monte_carlo")

    if cap is not None and error > cap:
        logger.error(f"subexponential ratio at x={x}: error {error:.3g} over cap {cap:.3g}")
        raise BudgetExhaustedError(estimate, error, cap)
    return RatioEstimate(estimate, error, method)


@dataclass
class TailDominance:
    table: pd.DataFrame
    trend: str


def tail_dominance_exponent(dv: Distribution, dx: Distribution, p: float, t_grid) -> TailDominance:
    """t^p · F̄_V(t) / F̄_X(t) on the grid, computed in log space."""
    if not p > 1:
        raise InvalidParameterError("p", p, "must be > 1")
    t = np.asarray(t_grid, dtype=float)
    if t.size == 0 or np.any(np.diff(t) <= 0):
        raise InvalidParameterError("t_grid", t.tolist(), "must be nonempty and increasing")
    with np.errstate(divide="ignore"):
        log_ratio = p * np.log(t) + np.asarray(dv.log_tail(t), dtype=float) - np.asarray(dx.log_tail(t), dtype=float)
    table = pd.DataFrame({"t": t, "log_ratio": log_ratio, "ratio": np.exp(log_ratio)})
    decreasing = bool(np.all(np.diff(log_ratio) < 0)) if t.size > 1 else False
    trend = "decreasing-to-zero" if decreasing and log_ratio[-1] < math.log(1e-2) else "not-decreasing"
    return TailDominance(table, trend)
