"""Worker-pool sizing and deterministic hashing helpers."""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "VITPAD_THREADS"


def worker_count() -> int:
    """Worker cap from the VITPAD_THREADS environment variable (>= 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def parallel_map(fn, items):
    """map() that may fan out over threads; output order always equals input order.

    Per-item work must be independent, so results are identical for any
    worker count.
    """
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def stable_fraction(seed: int, *parts) -> float:
    """Deterministic hash of (seed, parts) into [0, 1); platform independent."""
    key = str(int(seed)) + "\x1f" + "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") / 2.0**64
