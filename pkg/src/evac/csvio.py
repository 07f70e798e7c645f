"""Shared CSV conventions: comma-separated, header row, floats as %.17g.

17 significant digits round-trip any float64 exactly through text.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence


def fmt_float(x: float) -> str:
    return f"{float(x):.17g}"


def write_csv(
    path: str | Path, header: Sequence[str], rows: Iterable[Sequence]
) -> None:
    """Write rows (already formatted cells) under a header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
