"""Process-wide settings read from the environment."""

from __future__ import annotations

import os


def thread_count() -> int:
    """Worker threads for per-epoch work; ``T4D_THREADS=0`` (or unset) means one per CPU."""
    raw = os.environ.get("T4D_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"T4D_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("T4D_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)
