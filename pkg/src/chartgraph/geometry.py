"""Bounding-box metrics and patch-grid alignment.

All geometry runs in normalized [0, 1] coordinates. "Overlap" means a shared
segment of positive length; touching boxes do not overlap but have distance 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .chart_model import BBox, ChartObject, ObjectClass
from .errors import NoCandidate


@dataclass(frozen=True)
class PatchGrid:
    """Regular rows x cols partition of the unit square.

    Patch (r, c) covers [c/cols, (c+1)/cols] x [r/rows, (r+1)/rows] and has
    linear index r * cols + c.
    """

    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    def linear_index(self, row: int, col: int) -> int:
        return row * self.cols + col

    def cell_bounds(self, index: int) -> tuple[float, float, float, float]:
        """(x_min, y_min, x_max, y_max) of the patch with the given linear index."""
        row, col = divmod(index, self.cols)
        return (
            col / self.cols,
            row / self.rows,
            (col + 1) / self.cols,
            (row + 1) / self.rows,
        )


def min_bbox_distance(a: BBox, b: BBox) -> float:
    """Smallest Euclidean distance between two closed rectangles.

    Zero exactly when the rectangles intersect or touch.
    """
    gap_x = max(0.0, max(a.x_min, b.x_min) - min(a.x_max, b.x_max))
    gap_y = max(0.0, max(a.y_min, b.y_min) - min(a.y_max, b.y_max))
    return math.hypot(gap_x, gap_y)


def interval_overlap_x(a: BBox, b: BBox) -> bool:
    """True iff the x-projections share a segment of positive length."""
    return max(a.x_min, b.x_min) < min(a.x_max, b.x_max)


def interval_overlap_y(a: BBox, b: BBox) -> bool:
    """True iff the y-projections share a segment of positive length."""
    return max(a.y_min, b.y_min) < min(a.y_max, b.y_max)


def _axis_cell_range(lo: float, hi: float, n: int) -> range:
    # Cells [k/n, (k+1)/n] whose intersection with [lo, hi] has positive length.
    first = math.floor(lo * n)
    if (first + 1) / n <= lo:
        first += 1
    last = math.ceil(hi * n) - 1
    if last / n >= hi:
        last -= 1
    return range(max(first, 0), min(last, n - 1) + 1)


def patch_alignment(bbox: BBox, grid: PatchGrid) -> tuple[int, ...]:
    """Linear indices of all patches intersecting bbox with positive area.

    Ascending order; never empty. A zero-area bbox maps to the single patch
    containing its center so node features are always defined.
    """
    if bbox.area <= 0.0:
        cx, cy = bbox.center
        col = min(grid.cols - 1, int(math.floor(cx * grid.cols)))
        row = min(grid.rows - 1, int(math.floor(cy * grid.rows)))
        return (grid.linear_index(row, col),)
    cols = _axis_cell_range(bbox.x_min, bbox.x_max, grid.cols)
    rows = _axis_cell_range(bbox.y_min, bbox.y_max, grid.rows)
    return tuple(grid.linear_index(r, c) for r in rows for c in cols)


def nearest_object(
    src: ChartObject,
    candidates: Iterable[ChartObject],
    class_filter: Sequence[ObjectClass] | set[ObjectClass],
) -> int:
    """Id of the class-filtered candidate closest to src (ties: smaller id)."""
    allowed = set(class_filter)
    best: tuple[float, int] | None = None
    for cand in candidates:
        if cand.cls not in allowed or cand.id == src.id:
            continue
        key = (min_bbox_distance(src.bbox, cand.bbox), cand.id)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoCandidate(
            f"no candidate of class {sorted(c.value for c in allowed)} for object {src.id}"
        )
    return best[1]
