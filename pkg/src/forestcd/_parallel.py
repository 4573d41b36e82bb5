"""Block scheduling shared by the per-pixel stages.

Work is split into fixed row blocks whose boundaries do not depend on the
worker count, and results are collected in block order. Each output element
is computed by the same sequence of floating-point operations whatever the
schedule, so results are bit-identical for any ``workers`` value.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")


def resolve_workers(workers: int | None) -> int:
    if workers is None or workers <= 0:
        return os.cpu_count() or 1
    return workers


def row_blocks(n_rows: int, block: int) -> list[slice]:
    block = max(1, block)
    return [slice(start, min(start + block, n_rows)) for start in range(0, n_rows, block)]


def run_blocks(fn: Callable[[slice], T], blocks: list[slice], workers: int | None = 1) -> list[T]:
    workers = resolve_workers(workers)
    if workers == 1 or len(blocks) <= 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=min(workers, len(blocks))) as pool:
        return list(pool.map(fn, blocks))
