"""Small shared runtime helpers."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def resolve_threads(flag=None) -> int:
    """--threads flag wins, then LSRS_THREADS, then logical core count."""
    if flag is not None:
        return max(1, int(flag))
    env = os.environ.get("LSRS_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def pmap(fn, items, threads=1):
    """Ordered parallel map. Each item is processed independently, so the
    result is identical for any thread count; 1 is the reference path."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
