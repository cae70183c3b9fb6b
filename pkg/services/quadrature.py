import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import integrate
from scipy.special import logsumexp

from settings import QUAD_EPSREL
from utils.errors import QuadratureFailureError
from utils.logger import get_logger

logger = get_logger(__name__)

LogIntegrand = Callable[[np.ndarray], np.ndarray]

# beyond |x| = 2**1000 nothing in this lab carries mass
_EDGE = 2.0**1000
_GEOMETRIC = np.array([2.0**k for k in range(-8, 1001)])
_LOCAL = np.array([2.0**k for k in range(-8, 61)])


@dataclass(frozen=True)
class LogIntegral:
    """log of a nonnegative integral with its relative error estimate."""

    log_value: float
    rel_error: float
    shells_used: int = 0

    @property
    def value(self) -> float:
        return math.exp(self.log_value) if self.log_value < 709 else math.inf


@dataclass
class ExpansionResult:
    converged: bool
    log_value: float
    radii: list[float] = field(default_factory=list)
    partial_logs: list[float] = field(default_factory=list)
    frontier: list[float] = field(default_factory=list)


class QuadratureService:
    def __init__(self, epsrel: float = QUAD_EPSREL):
        self.settings = {
            "epsrel": epsrel,
            "gauss_nodes": 32,
            "grid_points": 17,
            "negligible_logs": 70.0,
            "max_subintervals": 4000,
            "max_expansions": 64,
            "divergence_growth": math.log(10.0),
            "divergence_radius": 2.0**20,
        }

    # ---- helpers -------------------------------------------------------

    @staticmethod
    def evaluate(phi: LogIntegrand, x: np.ndarray) -> np.ndarray:
        with np.errstate(all="ignore"):
            values = np.asarray(phi(np.asarray(x, dtype=float)), dtype=float)
        values = np.broadcast_to(values, np.shape(x)).copy()
        values[np.isnan(values)] = -np.inf
        return values

    def _partition(self, lo: float, hi: float, breakpoints: Iterable[float]) -> np.ndarray:
        lo_eff = max(lo, -_EDGE)
        hi_eff = min(hi, _EDGE)
        anchors = [b for b in breakpoints if math.isfinite(b)]
        pieces = [np.array([lo_eff, hi_eff, 0.0]), _GEOMETRIC, -_GEOMETRIC, np.array(anchors, dtype=float)]
        for b in anchors:
            pieces.append(b + _LOCAL)
            pieces.append(b - _LOCAL)
        points = np.unique(np.concatenate(pieces))
        return points[(points >= lo_eff) & (points <= hi_eff)]

    def _adaptive(self, f: Callable[[np.ndarray], np.ndarray], a: float, b: float) -> tuple[float, float]:
        """Adaptive Gauss-Legendre on [a, b] by interval bisection."""
        n = self.settings["gauss_nodes"]
        epsrel = self.settings["epsrel"]
        whole = integrate.fixed_quad(f, a, b, n=n)[0]
        negligible = 1e-3 * epsrel * abs(whole)
        stack = [(a, b, whole)]
        total, error, used = 0.0, 0.0, 0
        while stack:
            lo, hi, coarse = stack.pop()
            mid = 0.5 * (lo + hi)
            left = integrate.fixed_quad(f, lo, mid, n=n)[0]
            right = integrate.fixed_quad(f, mid, hi, n=n)[0]
            fine = left + right
            diff = abs(fine - coarse)
            used += 1
            # negligible pieces end bisection into an endpoint singularity
            if (
                diff <= epsrel * max(abs(fine), 1e-300)
                or abs(fine) + diff <= negligible
                or used > self.settings["max_subintervals"]
                or mid in (lo, hi)
            ):
                total += fine
                error += diff
            else:
                stack.append((lo, mid, left))
                stack.append((mid, hi, right))
        return total, error

    # ---- public API ----------------------------------------------------

    def log_integrate(
        self,
        phi: LogIntegrand,
        lower: float = -math.inf,
        upper: float = math.inf,
        breakpoints: Iterable[float] = (),
    ) -> LogIntegral:
        """log of the integral of exp(phi) over [lower, upper].

        The range is cut into geometric shells around 0 and every breakpoint;
        each shell is integrated after subtracting its own maximum, and
        shells whose upper bound is negligible against the largest estimated
        contribution are skipped.
        """
        if not lower < upper:
            return LogIntegral(-math.inf, 0.0)
        points = self._partition(lower, upper, list(breakpoints))
        if len(points) < 2:
            return LogIntegral(-math.inf, 0.0)

        m = self.settings["grid_points"]
        left, right = points[:-1], points[1:]
        frac = np.linspace(0.0, 1.0, m)
        grid = left[:, None] + (right - left)[:, None] * frac[None, :]
        values = self.evaluate(phi, grid.ravel()).reshape(grid.shape)
        # integrable singularities (+inf on a shell endpoint) are left to the Gauss nodes
        values[np.isposinf(values)] = -np.inf
        widths = right - left

        with np.errstate(divide="ignore"):
            log_widths = np.log(widths)
        shell_max = values.max(axis=1)
        crude = logsumexp(values, axis=1) + log_widths - math.log(m - 1)
        reference = np.max(crude)
        if not np.isfinite(reference):
            return LogIntegral(-math.inf, 0.0)

        cutoff = reference - self.settings["negligible_logs"]
        if upper == math.inf and values[-1, -1] + math.log(_EDGE) > cutoff:
            raise QuadratureFailureError("integrand does not decay toward +infinity", math.inf)
        if lower == -math.inf and values[0, 0] + math.log(_EDGE) > cutoff:
            raise QuadratureFailureError("integrand does not decay toward -infinity", math.inf)

        logs, errors = [], []
        for i in np.nonzero(shell_max + log_widths >= cutoff)[0]:
            shift = shell_max[i]
            if not np.isfinite(shift):
                continue

            def f(x, shift=shift):
                return np.exp(self.evaluate(phi, x) - shift)

            val, err = self._adaptive(f, float(left[i]), float(right[i]))
            if val <= 0:
                continue
            logs.append(shift + math.log(val))
            errors.append(shift + math.log(err) if err > 0 else -math.inf)

        if not logs:
            return LogIntegral(-math.inf, 0.0, 0)
        total = float(logsumexp(logs))
        rel_error = float(math.exp(logsumexp(errors) - total)) if errors else 0.0
        return LogIntegral(total, rel_error, len(logs))

    def integrate(self, f: Callable[[float], float], a: float, b: float, points=None) -> tuple[float, float]:
        """Plain adaptive quadrature for well-scaled integrands (quantile-space integrals)."""
        try:
            value, abserr = integrate.quad(
                f, a, b, points=points, epsabs=0.0, epsrel=self.settings["epsrel"], limit=400
            )
        except Exception as e:
            logger.error(f"quad failed on [{a}, {b}]: {e}")
            raise QuadratureFailureError(f"quad failed on [{a}, {b}]: {e}")
        if not np.isfinite(value) or abserr > 1e3 * self.settings["epsrel"] * max(abs(value), 1e-300) + 1e-12:
            logger.error(f"quad residual too large on [{a}, {b}]: value={value}, error={abserr}")
            raise QuadratureFailureError(f"quadrature did not converge on [{a}, {b}]", abserr)
        return value, abserr

    def expanding_log_integral(
        self,
        phi: LogIntegrand,
        anchor: float = 0.0,
        direction: int = 1,
        breakpoints: Iterable[float] = (),
        min_radius: float = 0.0,
    ) -> ExpansionResult:
        """Integrates exp(phi) from `anchor` outward over doubling radii.

        Converged once a further expansion adds nothing and the frontier value
        is falling. Divergent once the partial integral grew more than tenfold
        over the last two expansions while the frontier kept rising for three,
        and only past both `min_radius` and the `divergence_radius` setting;
        a steep tilt of a light tail keeps rising until its mode.
        """
        far = max(self.settings["divergence_radius"], min_radius)
        result = ExpansionResult(converged=False, log_value=-math.inf)
        breakpoints = list(breakpoints)
        growth = self.settings["divergence_growth"]
        previous_edge = anchor
        running = -math.inf
        for k in range(self.settings["max_expansions"]):
            radius = 2.0**k
            edge = anchor + direction * radius
            lo, hi = (previous_edge, edge) if direction > 0 else (edge, previous_edge)
            piece = self.log_integrate(phi, lo, hi, breakpoints)
            running = float(np.logaddexp(running, piece.log_value))
            frontier = float(self.evaluate(phi, np.array([edge]))[0])
            result.radii.append(radius)
            result.partial_logs.append(running)
            result.frontier.append(frontier)
            previous_edge = edge

            if k >= 2:
                falling = result.frontier[-1] < result.frontier[-2] or result.frontier[-1] == -math.inf
                added = piece.log_value - running if np.isfinite(running) else 0.0
                if np.isfinite(running) and falling and added < math.log(self.settings["epsrel"]) - 6:
                    result.converged = True
                    result.log_value = running
                    return result
                grew = result.partial_logs[-1] - result.partial_logs[-3]
                rising = result.frontier[-1] >= result.frontier[-2] >= result.frontier[-3] > -math.inf
                if grew > growth and rising and radius >= far:
                    logger.debug(f"expansion diverging at radius {radius}: growth {grew:.3g} logs")
                    result.log_value = running
                    return result
        result.log_value = running
        return result


quadrature = QuadratureService()
