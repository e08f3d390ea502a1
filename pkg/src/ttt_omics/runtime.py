"""Process-wide runtime knobs."""

from __future__ import annotations

import os

_ENV_VAR = "TTT_OMICS_THREADS"


def worker_count() -> int:
    """Worker cap for internal parallelism; TTT_OMICS_THREADS overrides."""
    cpus = os.cpu_count() or 1
    raw = os.environ.get(_ENV_VAR)
    if raw is None:
        return cpus
    try:
        requested = int(raw)
    except ValueError:
        return cpus
    return max(1, min(requested, cpus))
