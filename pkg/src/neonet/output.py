"""Stderr reporting for pipeline stages, training loops and metric tables.

All of it goes to stderr. Stage banners and outcome lines carry a
``[neonet]`` tag; status lines inside a stage are indented under them.
"""

from __future__ import annotations

import math
import sys
from typing import Callable, Mapping, Sequence

MAX_TABLE_ROWS = 12
MAX_LINE_WIDTH = 100
TAG = "[neonet]"


def _emit(text: str = "") -> None:
    print(text, file=sys.stderr)


def print_phase(title: str) -> None:
    """Banner opening a stage, e.g. ``[neonet] Stage train.vae.fold1``."""
    heading = f"{TAG} {title}"
    _emit()
    _emit(heading)
    _emit("-" * min(len(heading), MAX_LINE_WIDTH))


def print_progress(message: str) -> None:
    _emit(f"    {message}")


def print_result(message: str) -> None:
    """Outcome line of a stage: ``<key>: done (N artifacts)`` or ``<key>: up to date``."""
    _emit(f"{TAG} {message}")


def print_error(message: str) -> None:
    _emit(f"{TAG} error: {message}")


def format_value(value) -> str:
    if isinstance(value, float):
        return "inf" if math.isinf(value) else format(value, ".12g")
    return str(value)


def print_metric_table(rows: Sequence[Mapping[str, object]], columns: Sequence[str] | None = None) -> None:
    """Print a truncated, width-limited preview of a metric table."""
    if not rows:
        _emit("    (no rows)")
        return
    columns = list(columns or rows[0].keys())
    cells = [[format_value(row.get(c, "")) for c in columns] for row in rows]
    widths = [max(len(c), *(len(r[i][:12]) for r in cells)) for i, c in enumerate(columns)]

    def line(values: Sequence[str]) -> str:
        text = "  ".join(v[:12].ljust(w) for v, w in zip(values, widths))
        return text if len(text) <= MAX_LINE_WIDTH else text[: MAX_LINE_WIDTH - 3] + "..."

    _emit(f"    {line(columns)}")
    for r in cells[:MAX_TABLE_ROWS]:
        _emit(f"    {line(r)}")
    if len(cells) > MAX_TABLE_ROWS:
        _emit(f"    ({len(cells) - MAX_TABLE_ROWS} more rows)")
    _emit()


def progress_reporter(label: str, verbose: bool) -> Callable[[int, float], None] | None:
    """Training-loop callback that prints ``label step N: value`` when verbose."""
    if not verbose:
        return None

    def report(step: int, value: float) -> None:
        print_progress(f"{label} step {step}: {value:.6g}")

    return report
