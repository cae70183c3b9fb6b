from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

from settings import DEFAULT_SEED, WORKERS
from utils.logger import get_logger

logger = get_logger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class SamplingService:
    """Seeded random streams and order-preserving parallel maps."""

    def __init__(self, default_seed: int = DEFAULT_SEED, workers: int = WORKERS):
        self.default_seed = default_seed
        self.workers = max(1, workers)

    def stream(self, seed: int | None = None, index: int = 0) -> np.random.Generator:
        # Grid point `index` gets its own child stream, independent of scheduling.
        base = self.default_seed if seed is None else seed
        return np.random.default_rng(np.random.SeedSequence(entropy=base, spawn_key=(index,)))

    def streams(self, seed: int | None, count: int) -> list[np.random.Generator]:
        return [self.stream(seed, i) for i in range(count)]

    def parallel_map(self, fn: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
        items = list(items)
        workers = self.workers if workers is None else max(1, workers)
        if workers == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        logger.debug(f"parallel_map over {len(items)} items with {workers} workers")
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))


sampling = SamplingService()
