"""Order-preserving map over independent jobs, serial or in worker processes."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("SIGFORGE_JOBS", "1")))
    except ValueError:
        return 1


def _call(packed):
    fn, args = packed
    return fn(*args)


def pmap(fn, arg_tuples, jobs: int | None = None) -> list:
    """``[fn(*a) for a in arg_tuples]``, optionally across ``jobs`` processes.

    Results come back in input order, so callers see the same list whatever
    the parallelism.
    """
    arg_tuples = list(arg_tuples)
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs == 1 or len(arg_tuples) <= 1:
        return [fn(*a) for a in arg_tuples]
    with ProcessPoolExecutor(max_workers=min(jobs, len(arg_tuples))) as pool:
        return list(pool.map(_call, [(fn, a) for a in arg_tuples]))
