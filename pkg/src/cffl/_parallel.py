import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CFFL_THREADS", "1")))
    except ValueError:
        return 1


def pmap(fn, items):
    """Ordered map; fans out to ``CFFL_THREADS`` worker threads when set."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
