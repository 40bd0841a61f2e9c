"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

from __future__ import annotations

import time
from contextlib import contextmanager

RESULTS: dict[str, str] = {}


@contextmanager
def criterion(key: str, title: str):
    """Record ``key`` as PASS or FAIL with elapsed seconds and whatever the test put in ``detail``."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException:
        RESULTS[key] = f"{key} FAIL  {title} [{time.perf_counter() - t0:.0f}s] {info['detail']}"
        print(RESULTS[key])
        raise
    RESULTS[key] = f"{key} PASS  {title} [{time.perf_counter() - t0:.0f}s] {info['detail']}"
    print(RESULTS[key])
