"""
Per-command stage timing for the CLI breakdown.
Stages record wall-clock seconds plus a short detail string; cleared at the start of each command.
"""
import time
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List

_stages: List[Dict[str, Any]] = []


def clear():
    """Clear collected stages at the start of a new command."""
    global _stages
    _stages = []


def record(stage: str, seconds: float, detail: str = ""):
    """Record one finished stage."""
    _stages.append({"stage": stage, "seconds": float(seconds), "detail": detail})


@contextmanager
def timed(stage: str, detail: str = "") -> Iterator[None]:
    """Time the enclosed block; recorded even when it raises."""
    start = time.perf_counter()
    try:
        yield
    finally:
        record(stage, time.perf_counter() - start, detail)


def get_and_clear() -> List[Dict[str, Any]]:
    """Return collected stages and clear the list."""
    global _stages
    out = list(_stages)
    _stages = []
    return out


def print_breakdown(stages: List[Dict[str, Any]]) -> None:
    """Print per-stage timings and the total (terminal only)."""
    if not stages:
        return
    total = 0.0
    print("\n--- Time per stage ---")
    for s in stages:
        total += s["seconds"]
        print(f"  {s['stage']:34} : {s['detail']:28} → {s['seconds']:8.2f} s")
    print("  " + "-" * 58)
    print(f"  {'Total':34} : {'':28} → {total:8.2f} s\n")
