import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chartgraph.chart_model import BBox, ChartObject, ObjectClass
from chartgraph.errors import NoCandidate
from chartgraph.geometry import (
    PatchGrid,
    interval_overlap_x,
    interval_overlap_y,
    min_bbox_distance,
    nearest_object,
    patch_alignment,
)
from helpers import oracle_min_distance_sampled, oracle_rect_distance


def box(x0, y0, x1, y1):
    return BBox(x0, y0, x1, y1)


coords = st.floats(min_value=0.0, max_value=1.0, allow_nan=False, width=64)


@st.composite
def bboxes(draw):
    x0, x1 = sorted((draw(coords), draw(coords)))
    y0, y1 = sorted((draw(coords), draw(coords)))
    return BBox(x0, y0, x1, y1)


class TestMinBBoxDistance:
    def test_overlapping_boxes(self):
        assert min_bbox_distance(box(0, 0, 0.5, 0.5), box(0.4, 0.4, 1, 1)) == 0.0

    def test_axis_aligned_gap(self):
        assert min_bbox_distance(box(0, 0, 0.1, 0.1), box(0.4, 0, 0.5, 0.1)) == pytest.approx(
            0.3, abs=1e-15
        )

    def test_diagonal_gap_matches_sampled_oracle(self):
        a = box(0, 0, 0.1, 0.1)
        b = box(0.3, 0.3, 0.4, 0.4)
        d = min_bbox_distance(a, b)
        # sqrt(0.08) to 30 digits: 0.282842712474619009760337744842
        assert d == pytest.approx(0.282842712474619009760337744842, abs=1e-12)
        # >= 10^6 boundary point pairs
        assert d == pytest.approx(oracle_min_distance_sampled(a, b, per_side=250), abs=1e-4)

    def test_touching_boxes_distance_zero(self):
        assert min_bbox_distance(box(0, 0, 0.2, 0.2), box(0.2, 0, 0.4, 0.2)) == 0.0

    @given(bboxes(), bboxes())
    def test_symmetry(self, a, b):
        assert min_bbox_distance(a, b) == min_bbox_distance(b, a)

    @given(bboxes(), bboxes())
    def test_zero_iff_closed_intersection(self, a, b):
        intersects = (
            max(a.x_min, b.x_min) <= min(a.x_max, b.x_max)
            and max(a.y_min, b.y_min) <= min(a.y_max, b.y_max)
        )
        assert (min_bbox_distance(a, b) == 0.0) == intersects

    @given(bboxes(), bboxes())
    def test_matches_independent_formula(self, a, b):
        assert min_bbox_distance(a, b) == pytest.approx(oracle_rect_distance(a, b), abs=1e-12)

    @settings(max_examples=30)
    @given(bboxes(), bboxes(), st.integers(0, 10**6))
    def test_lower_bounds_sampled_point_pairs(self, a, b, seed):
        rng = np.random.default_rng(seed)
        d = min_bbox_distance(a, b)
        pa = np.stack(
            [rng.uniform(a.x_min, a.x_max, 40), rng.uniform(a.y_min, a.y_max, 40)], axis=1
        )
        pb = np.stack(
            [rng.uniform(b.x_min, b.x_max, 40), rng.uniform(b.y_min, b.y_max, 40)], axis=1
        )
        pair_d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
        assert d <= pair_d.min() + 1e-12

    def test_translation_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            x0, y0 = rng.uniform(0, 0.3, 2)
            a = box(x0, y0, x0 + rng.uniform(0.01, 0.2), y0 + rng.uniform(0.01, 0.2))
            u0, v0 = rng.uniform(0, 0.3, 2)
            b = box(u0, v0, u0 + rng.uniform(0.01, 0.2), v0 + rng.uniform(0.01, 0.2))
            tx, ty = rng.uniform(0, 0.4, 2)
            a2 = box(a.x_min + tx, a.y_min + ty, a.x_max + tx, a.y_max + ty)
            b2 = box(b.x_min + tx, b.y_min + ty, b.x_max + tx, b.y_max + ty)
            assert min_bbox_distance(a2, b2) == pytest.approx(
                min_bbox_distance(a, b), abs=1e-12
            )


class TestIntervalOverlap:
    def test_x_overlap(self):
        assert interval_overlap_x(box(0, 0, 0.5, 0.1), box(0.2, 0.8, 0.3, 0.9))

    def test_touching_is_not_overlap(self):
        assert not interval_overlap_x(box(0, 0, 0.2, 0.1), box(0.2, 0.5, 0.4, 0.6))

    def test_identical_boxes_overlap_both_axes(self):
        b = box(0.1, 0.2, 0.4, 0.5)
        assert interval_overlap_x(b, b) and interval_overlap_y(b, b)

    def test_y_overlap_independent_of_x(self):
        assert interval_overlap_y(box(0, 0.3, 0.1, 0.6), box(0.8, 0.5, 0.9, 0.9))
        assert not interval_overlap_y(box(0, 0.3, 0.1, 0.4), box(0.8, 0.5, 0.9, 0.9))


def brute_force_cells(bbox, grid):
    """Independent enumeration: every cell with positive-area intersection."""
    out = []
    for p in range(grid.num_patches):
        r, c = divmod(p, grid.cols)
        x0, y0 = c / grid.cols, r / grid.rows
        x1, y1 = (c + 1) / grid.cols, (r + 1) / grid.rows
        if min(bbox.x_max, x1) - max(bbox.x_min, x0) > 0 and (
            min(bbox.y_max, y1) - max(bbox.y_min, y0) > 0
        ):
            out.append(p)
    return tuple(out)


class TestPatchAlignment:
    def test_quadrant_on_2x2(self):
        assert patch_alignment(box(0, 0, 0.5, 0.5), PatchGrid(2, 2)) == (0,)

    def test_center_box_covers_all_four(self):
        grid = PatchGrid(2, 2)
        b = box(0.25, 0.25, 0.75, 0.75)
        assert patch_alignment(b, grid) == (0, 1, 2, 3)
        assert patch_alignment(b, grid) == brute_force_cells(b, grid)

    def test_degenerate_box_maps_to_center_patch(self):
        assert patch_alignment(box(0.9, 0.9, 0.9, 0.9), PatchGrid(2, 2)) == (3,)

    def test_full_image(self):
        assert patch_alignment(box(0, 0, 1, 1), PatchGrid(3, 3)) == tuple(range(9))

    @settings(max_examples=150)
    @given(bboxes(), st.integers(1, 7), st.integers(1, 7))
    def test_matches_brute_force_enumeration(self, b, rows, cols):
        grid = PatchGrid(rows, cols)
        got = patch_alignment(b, grid)
        if b.area > 0:
            assert got == brute_force_cells(b, grid)
        assert len(got) >= 1
        assert list(got) == sorted(got)

    @settings(max_examples=60)
    @given(bboxes(), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
    def test_cells_cover_bbox(self, b, rows, cols, seed):
        if b.area == 0.0:  # degenerate boxes map to the single center patch
            return
        grid = PatchGrid(rows, cols)
        cells = patch_alignment(b, grid)
        rng = np.random.default_rng(seed)
        # interior points of the bbox must land in a returned cell
        for _ in range(20):
            px = rng.uniform(b.x_min, b.x_max)
            py = rng.uniform(b.y_min, b.y_max)
            containing = [
                p
                for p in cells
                for (r, c) in [divmod(p, grid.cols)]
                if c / grid.cols <= px <= (c + 1) / grid.cols
                and r / grid.rows <= py <= (r + 1) / grid.rows
            ]
            assert containing


def obj(oid, cls, bbox_coords, conf=0.9):
    return ChartObject(id=oid, cls=cls, bbox=box(*bbox_coords), confidence=conf)


class TestNearestObject:
    def test_single_candidate(self):
        src = obj(0, ObjectClass.LEGEND_LABEL, (0.8, 0.1, 0.9, 0.15))
        marker = obj(1, ObjectClass.LEGEND_MARKER, (0.7, 0.1, 0.75, 0.15))
        assert nearest_object(src, [src, marker], {ObjectClass.LEGEND_MARKER}) == 1

    def test_picks_smaller_distance(self):
        src = obj(0, ObjectClass.LEGEND_LABEL, (0.0, 0.0, 0.1, 0.1))
        near = obj(1, ObjectClass.LEGEND_MARKER, (0.2, 0.0, 0.3, 0.1))  # d = 0.1
        far = obj(2, ObjectClass.LEGEND_MARKER, (0.4, 0.0, 0.5, 0.1))  # d = 0.3
        assert min_bbox_distance(src.bbox, near.bbox) == pytest.approx(0.1)
        assert min_bbox_distance(src.bbox, far.bbox) == pytest.approx(0.3)
        assert nearest_object(src, [src, far, near], {ObjectClass.LEGEND_MARKER}) == 1

    def test_tie_breaks_by_smaller_id(self):
        # dyadic coordinates make both gaps exactly 0.125
        src = obj(0, ObjectClass.PIE_LABEL, (0.25, 0.25, 0.5, 0.5))
        left = obj(7, ObjectClass.PIE_SLICE, (0.0, 0.25, 0.125, 0.5))
        right = obj(2, ObjectClass.PIE_SLICE, (0.625, 0.25, 0.75, 0.5))
        assert min_bbox_distance(src.bbox, left.bbox) == min_bbox_distance(src.bbox, right.bbox)
        assert nearest_object(src, [src, left, right], {ObjectClass.PIE_SLICE}) == 2

    def test_no_candidate(self):
        src = obj(0, ObjectClass.PIE_LABEL, (0.4, 0.4, 0.5, 0.5))
        with pytest.raises(NoCandidate):
            nearest_object(src, [src], {ObjectClass.PIE_SLICE})
