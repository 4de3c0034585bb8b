"""
Bounded worker pool and per-key rate limiting for concurrent probes.
"""

import threading
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, Dict, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")


class RateLimiter:
    """Spaces calls sharing a key at least 1/rate seconds apart"""

    def __init__(self, rate: float = 0.0):
        self.interval = 1.0 / rate if rate and rate > 0 else 0.0
        self._next_slot: Dict[str, float] = {}
        self._lock = threading.Lock()

    def wait(self, key: str):
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next_slot.get(key, now))
            self._next_slot[key] = slot + self.interval
        delay = slot - now
        if delay > 0:
            time.sleep(delay)


def run_bounded(
    func: Callable[[T], R],
    items: Iterable[T],
    max_workers: int = 16,
    on_done: Optional[Callable[[int, int, T, R], None]] = None,
) -> List[R]:
    """Apply func to items on a bounded pool; results keep input order"""
    items = list(items)
    results: List[Optional[R]] = [None] * len(items)
    if not items:
        return []

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        futures = {pool.submit(func, item): index for index, item in enumerate(items)}
        completed = 0
        for future in as_completed(futures):
            index = futures[future]
            results[index] = future.result()
            completed += 1
            if on_done:
                on_done(completed, len(items), items[index], results[index])
    return results  # type: ignore[return-value]
