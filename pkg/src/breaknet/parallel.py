"""Order-preserving map over worker processes."""

import os
from concurrent.futures import ProcessPoolExecutor

WORKERS_ENV = "BREAKNET_WORKERS"


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn, items, n_jobs=1):
    """``list(map(fn, items))``, run on ``n_jobs`` processes when > 1."""
    items = list(items)
    if n_jobs is None:
        n_jobs = default_workers()
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))
