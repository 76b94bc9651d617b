"""Thread-count policy shared by the sweep helpers."""

import os

ENV_VAR = "ABSORBMC_THREADS"


def max_workers() -> int:
    """Worker cap from ``ABSORBMC_THREADS`` (unset or 0 means one per CPU)."""
    raw = os.environ.get(ENV_VAR, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"{ENV_VAR} must be a non-negative integer, got {n}")
    return n or (os.cpu_count() or 1)
