import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from database.files import ArtifactStore
from database.schema.models import HillPoint, QQAnalysis, SampleSet, TailReport
from lib.distributions import Distribution, make_distribution
from services.sampling import sampling
from services.scoring import verdict_engine
from utils.errors import EmptySampleFileError, InsufficientPositiveTailError, InvalidParameterError, SampleParseError
from utils.logger import get_logger

logger = get_logger(__name__)

SAMPLE_FORMATS = ("csv_single_column", "json_array")
MIN_PLOT_SAMPLES = 20
CURVATURE_POSITIONS = (0.5, 0.9, 0.99)


@dataclass(frozen=True)
class HillTail:
    """Power-law extrapolation above the k-th largest sample.

    F̄(x) ≈ (k/n) * ((x - shift) / (threshold - shift)) ** (-1/gamma) for x >= threshold.
    """

    shift: float
    threshold: float
    gamma: float
    k: int
    n: int

    def log_tail(self, x):
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.log(x - self.shift) - math.log(self.threshold - self.shift)
        return math.log(self.k / self.n) - ratio / self.gamma

    def inverse_log_tail(self, level: float) -> float:
        return self.shift + (self.threshold - self.shift) * math.exp(-self.gamma * (level - math.log(self.k / self.n)))


def _values(sample) -> np.ndarray:
    if isinstance(sample, SampleSet):
        return np.asarray(sample.values, dtype=float)
    return np.asarray(sample, dtype=float)


def quantile_grid(dist: Distribution, n: int) -> np.ndarray:
    """Exact quantiles at plotting positions (i - 0.5)/n; a noise-free stand-in for a sample."""
    return np.asarray(dist.quantile((np.arange(1, n + 1) - 0.5) / n), dtype=float)


def default_k_grid(n: int, points: int = 20) -> list[int]:
    lo = min(10, max(2, n // 10))
    hi = max(lo + 1, n // 10)
    grid = np.unique(np.round(np.geomspace(lo, hi, points)).astype(int))
    return [int(k) for k in grid if 2 <= k < n]


class TailDiagnostics:
    """Hill estimator, probability plots and the tail verdict over scalar samples."""

    def __init__(self, store: ArtifactStore | None = None):
        self.store = store or ArtifactStore()
        self.settings = {
            "plot_min_samples": MIN_PLOT_SAMPLES,
            "spacing_points": 100,
            "replications": 200,
        }

    # --- ingestion -----------------------------------------------------------------

    def ingest_samples(self, path: str | Path, format: str = "csv_single_column") -> SampleSet:
        path = Path(path)
        if format not in SAMPLE_FORMATS:
            raise InvalidParameterError("format", format, f"must be one of {', '.join(SAMPLE_FORMATS)}")
        try:
            if format == "csv_single_column":
                values = self._parse_csv_rows(path)
            else:
                values = self._parse_json_array(path)
        except FileNotFoundError:
            logger.error(f"Sample file not found: {path}")
            raise SampleParseError(str(path), 0, 0, "file not found")
        if not values:
            raise EmptySampleFileError(f"{path}: no samples")
        logger.info(f"Ingested {len(values)} samples from {path}")
        return SampleSet(values=tuple(values), source=str(path))

    def _parse_csv_rows(self, path: Path) -> list[float]:
        values = []
        for row_number, row in enumerate(self.store.read_text_rows(path), start=1):
            cells = [str(cell).strip() for cell in row if str(cell).strip() != ""]
            if len(cells) != 1:
                raise SampleParseError(str(path), row_number, max(len(cells), 1), "expected exactly one value per row")
            values.append(self._parse_number(path, row_number, cells[0]))
        return values

    def _parse_json_array(self, path: Path) -> list[float]:
        data = self.store.read_json(path)
        if not isinstance(data, list):
            raise SampleParseError(str(path), 0, 0, "expected a JSON array of numbers")
        values = []
        for row_number, item in enumerate(data, start=1):
            if isinstance(item, bool) or not isinstance(item, (int, float)):
                raise SampleParseError(str(path), row_number, 1, f"not a number: {item!r}")
            values.append(self._parse_number(path, row_number, item))
        return values

    @staticmethod
    def _parse_number(path: Path, row: int, cell) -> float:
        try:
            value = float(cell)
        except ValueError:
            raise SampleParseError(str(path), row, 1, f"not a number: {cell!r}")
        if not math.isfinite(value):
            raise SampleParseError(str(path), row, 1, f"non-finite value {cell!r}")
        return value

    def export_samples(self, sample_set: SampleSet, path: str | Path, format: str = "csv_single_column") -> Path:
        if format not in SAMPLE_FORMATS:
            raise InvalidParameterError("format", format, f"must be one of {', '.join(SAMPLE_FORMATS)}")
        return self.store.export_samples(sample_set.values, path, format)

    def generate_samples(self, spec: str, n: int, seed: int | None = None) -> SampleSet:
        if n < 1:
            raise InvalidParameterError("n", n, "must be positive")
        dist = make_distribution(spec)
        values = dist.sample(sampling.stream(seed), int(n))
        return SampleSet(values=tuple(float(v) for v in values), source=f"generated:{spec}", seed=seed)

    # --- Hill estimator -------------------------------------------------------------

    @staticmethod
    def tail_shift(values: np.ndarray) -> float:
        """Median shift applied before Hill when the sample is not strictly positive."""
        return float(np.median(values)) if values.min() <= 0 else 0.0

    def hill_estimator(self, sample, k_grid=None) -> list[HillPoint]:
        values = np.sort(_values(sample))
        n = values.size
        if k_grid is None:
            k_grid = default_k_grid(n)
        for k in k_grid:
            if not 2 <= int(k) < n:
                raise InvalidParameterError("k", int(k), f"must satisfy 2 <= k < n={n}")
        shifted = values - self.tail_shift(values)

        curve = []
        for k in sorted(int(k) for k in k_grid):
            threshold = shifted[n - k - 1]
            if threshold <= 0:
                raise InsufficientPositiveTailError(f"only {int((shifted > 0).sum())} positive values after shift; k={k}")
            estimate = float(np.mean(np.log(shifted[n - k :])) - math.log(threshold))
            curve.append(HillPoint(k=k, hill_estimate=estimate, standard_error=estimate / math.sqrt(k)))
        return curve

    def hill_tail(self, values, k: int | None = None) -> HillTail:
        values = np.sort(_values(values))
        n = values.size
        if n < 3:
            raise InsufficientPositiveTailError(f"need at least 3 samples for a Hill tail, got {n}")
        k = int(k) if k is not None else int(np.clip(round(math.sqrt(n)), 2, n - 1))
        shift = self.tail_shift(values)
        gamma = self.hill_estimator(values, [k])[0].hill_estimate
        if gamma <= 0:
            logger.warning(f"Hill estimate {gamma:.3g} at k={k} is not positive; tail beyond the maximum is negligible")
            gamma = 1e-12
        return HillTail(shift=shift, threshold=float(values[n - k - 1]), gamma=gamma, k=k, n=n)

    # --- probability plots ----------------------------------------------------------

    @staticmethod
    def _curvature(empirical: np.ndarray, positions=CURVATURE_POSITIONS) -> float:
        """Relative change in slope between the lower and upper chords of the plot; positive = bending up.

        Chords run between right-half quantiles at `positions`, so the statistic ignores the
        extreme order statistics and is 0 for an exactly exponential right half.
        """
        x = stats.expon.ppf(positions)
        y = np.quantile(empirical, positions)
        lower = (y[1] - y[0]) / (x[1] - x[0])
        upper = (y[2] - y[1]) / (x[2] - x[1])
        if lower + upper <= 0:
            return 0.0
        return float((upper - lower) / (upper + lower))

    @staticmethod
    def _linearity(theoretical: np.ndarray, empirical: np.ndarray) -> float:
        if np.ptp(empirical) == 0:
            return 0.0
        return float(np.corrcoef(theoretical, empirical)[0, 1] ** 2)

    @staticmethod
    def _right_half(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        median = float(np.median(values))
        right = values[values > median] - median
        m = right.size
        if m < 2:
            raise InvalidParameterError("sample", m, "right half needs at least two values above the median")
        return stats.expon.ppf((np.arange(1, m + 1) - 0.5) / m), right

    def probability_plot(self, sample, kind: str = "normal") -> QQAnalysis:
        values = np.sort(_values(sample))
        if values.size < self.settings["plot_min_samples"]:
            raise InvalidParameterError("n", int(values.size), f"probability plots need at least {MIN_PLOT_SAMPLES} samples")

        if kind == "normal":
            n = values.size
            theoretical = stats.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
            return QQAnalysis(
                kind="normal",
                theoretical=theoretical.tolist(),
                empirical=values.tolist(),
                linearity=self._linearity(theoretical, values),
            )
        if kind == "exponential_right_half":
            theoretical, right = self._right_half(values)
            curvature = self._curvature(right)
            return QQAnalysis(
                kind="exponential_right_half",
                theoretical=theoretical.tolist(),
                empirical=right.tolist(),
                linearity=self._linearity(theoretical, right),
                curvature=curvature,
                curvature_sign=verdict_engine.curvature_sign(curvature),
            )
        raise InvalidParameterError("kind", kind, "must be 'normal' or 'exponential_right_half'")

    def top_spacing_ratio(self, sample) -> float:
        """Largest normalized spacing i*(x_(n-i+1) - x_(n-i)) at i=1 over the median of the top ones.

        Normalized spacings are roughly iid exponential for light tails, so a large ratio
        flags a maximum that stands alone above the rest of the sample.
        """
        values = np.sort(_values(sample))
        points = min(self.settings["spacing_points"], values.size - 1)
        if points < 2:
            return 0.0
        top = values[::-1][: points + 1]
        spacings = np.arange(1, points + 1) * (top[:-1] - top[1:])
        reference = float(np.median(spacings))
        if reference <= 0:
            return math.inf if spacings[0] > 0 else 0.0
        return float(spacings[0] / reference)

    # --- verdict --------------------------------------------------------------------

    def tail_verdict(
        self,
        hill_curve: list[HillPoint],
        normal_qq: QQAnalysis,
        exp_qq: QQAnalysis,
        top_spacing_ratio: float,
    ) -> dict:
        if not hill_curve or normal_qq is None or exp_qq is None:
            raise InvalidParameterError("report", None, "hill curve and both probability plots are required")
        result = verdict_engine.evaluate(
            [p.k for p in hill_curve],
            [p.hill_estimate for p in hill_curve],
            exp_qq.curvature if exp_qq.curvature is not None else 0.0,
            top_spacing_ratio,
        )
        result["rule_trace"].append(
            {"rule": "normal_plot_linearity", "value": normal_qq.linearity, "threshold": None, "outcome": "recorded"}
        )
        return result

    def build_tail_report(self, sample: SampleSet, k_grid=None) -> TailReport:
        values = _values(sample)
        hill_curve = self.hill_estimator(values, k_grid)
        normal_qq = self.probability_plot(values, "normal")
        exp_qq = self.probability_plot(values, "exponential_right_half")
        result = self.tail_verdict(hill_curve, normal_qq, exp_qq, self.top_spacing_ratio(values))
        logger.info(f"{sample.source}: {result['explanation']}")
        return TailReport(
            source=sample.source,
            n=int(values.size),
            shift=self.tail_shift(values),
            hill_curve=hill_curve,
            normal_qq=normal_qq,
            exp_qq=exp_qq,
            verdict=result["verdict"],
            rule_trace=result["rule_trace"],
        )

    def classify(self, values, k_grid=None) -> str:
        """Verdict only; skips building the plot models, for replication studies."""
        values = np.sort(_values(values))
        curve = self.hill_estimator(values, k_grid)
        _, right = self._right_half(values)
        result = verdict_engine.evaluate(
            [p.k for p in curve],
            [p.hill_estimate for p in curve],
            self._curvature(right),
            self.top_spacing_ratio(values),
        )
        return result["verdict"]

    # --- replication studies --------------------------------------------------------

    def hill_replication(
        self, alpha: float, n: int, k: int, reps: int | None = None, seed: int | None = None, workers: int | None = None
    ) -> dict:
        """Empirical spread of the Hill estimate across seeded Pareto samples vs the estimate/sqrt(k) formula."""
        reps = reps or self.settings["replications"]
        dist = make_distribution(f"pareto:{alpha}")

        def one(rng):
            return self.hill_estimator(dist.sample(rng, n), [k])[0]

        points = sampling.parallel_map(one, sampling.streams(seed, reps), workers)
        estimates = np.array([p.hill_estimate for p in points])
        errors = np.array([p.standard_error for p in points])
        empirical_sd = float(np.std(estimates, ddof=1))
        mean_se = float(np.mean(errors))
        return {
            "alpha": alpha,
            "n": n,
            "k": k,
            "reps": reps,
            "mean_estimate": float(np.mean(estimates)),
            "empirical_sd": empirical_sd,
            "mean_standard_error": mean_se,
            "sd_ratio": mean_se / empirical_sd,
        }

    def verdict_accuracy(
        self,
        spec: str,
        expected: str,
        n: int,
        reps: int | None = None,
        seed: int | None = None,
        workers: int | None = None,
    ) -> dict:
        reps = reps or self.settings["replications"]
        dist = make_distribution(spec)

        def one(rng):
            return self.classify(dist.sample(rng, n))

        verdicts = sampling.parallel_map(one, sampling.streams(seed, reps), workers)
        counts = pd.Series(verdicts).value_counts().to_dict()
        accuracy = counts.get(expected, 0) / reps
        logger.info(f"verdict accuracy for {spec}: {accuracy:.3f} over {reps} replications")
        return {"spec": spec, "expected": expected, "n": n, "reps": reps, "accuracy": accuracy, "counts": counts}


diagnostics = TailDiagnostics()
