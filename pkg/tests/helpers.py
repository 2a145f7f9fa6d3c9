"""Independent oracles and random-input generators shared across tests.

Everything here deliberately re-derives geometry and rule semantics from
scratch (plain arithmetic, sequential loops) so the production code is
checked against a second implementation, not against itself.
"""

from __future__ import annotations

import numpy as np

from chartgraph.chart_model import BBox, ChartAnnotation, ChartObject, ObjectClass


# ---------------------------------------------------------------------------
# random annotations


def random_bbox(rng: np.random.Generator, max_extent: float = 0.4) -> BBox:
    x0 = rng.uniform(0.0, 1.0 - 1e-3)
    y0 = rng.uniform(0.0, 1.0 - 1e-3)
    w = rng.uniform(1e-3, min(max_extent, 1.0 - x0))
    h = rng.uniform(1e-3, min(max_extent, 1.0 - y0))
    return BBox(x0, y0, x0 + w, y0 + h)


def random_annotation(
    rng: np.random.Generator,
    min_objects: int = 2,
    max_objects: int = 14,
    chart_id: str = "random",
) -> ChartAnnotation:
    """Positive-area boxes, all classes possible, OCR on some non-shape objects."""
    n = int(rng.integers(min_objects, max_objects + 1))
    classes = list(ObjectClass)
    ids = rng.permutation(n * 3)[:n]  # unique, not necessarily dense
    objects = []
    for i in range(n):
        cls = classes[int(rng.integers(0, len(classes)))]
        ocr = None
        if not cls.is_shape and rng.random() < 0.6:
            ocr = f"txt{int(rng.integers(0, 50))}"
        objects.append(
            ChartObject(
                id=int(ids[i]),
                cls=cls,
                bbox=random_bbox(rng),
                confidence=float(rng.uniform(0.0, 1.0)),
                ocr_text=ocr,
            )
        )
    return ChartAnnotation(chart_id=chart_id, objects=tuple(objects), image_size=(800, 600))


# ---------------------------------------------------------------------------
# independent geometry


def oracle_rect_distance(a: BBox, b: BBox) -> float:
    dx = max(0.0, b.x_min - a.x_max, a.x_min - b.x_max)
    dy = max(0.0, b.y_min - a.y_max, a.y_min - b.y_max)
    return float(np.sqrt(dx * dx + dy * dy))


def _pos_overlap(lo1: float, hi1: float, lo2: float, hi2: float) -> bool:
    return min(hi1, hi2) - max(lo1, lo2) > 0.0


def boundary_points(bbox: BBox, per_side: int) -> np.ndarray:
    """Points sampled along the rectangle boundary (corners included)."""
    xs = np.linspace(bbox.x_min, bbox.x_max, per_side)
    ys = np.linspace(bbox.y_min, bbox.y_max, per_side)
    top = np.stack([xs, np.full_like(xs, bbox.y_min)], axis=1)
    bottom = np.stack([xs, np.full_like(xs, bbox.y_max)], axis=1)
    left = np.stack([np.full_like(ys, bbox.x_min), ys], axis=1)
    right = np.stack([np.full_like(ys, bbox.x_max), ys], axis=1)
    return np.concatenate([top, bottom, left, right], axis=0)


def oracle_min_distance_sampled(a: BBox, b: BBox, per_side: int = 250) -> float:
    """Brute-force min distance over sampled boundary-point pairs."""
    pa = boundary_points(a, per_side)
    pb = boundary_points(b, per_side)
    diff = pa[:, None, :] - pb[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=2)).min())


# ---------------------------------------------------------------------------
# independent textual-graph rule checker


def expected_textual_edges(objects, fully_connected: bool = False) -> dict[tuple[int, int], int]:
    """Re-derive the full edge set {(i, j) -> lowest rule number} from scratch.

    Node indexing mirrors the builder contract: label node per object in
    input order, then OCR nodes (non-shape objects with text) in input order.
    """
    n = len(objects)
    edges: dict[tuple[int, int], int] = {}

    def add(i: int, j: int, rule: int) -> None:
        key = (min(i, j), max(i, j))
        if key not in edges or rule < edges[key]:
            edges[key] = rule

    cls = [o.cls for o in objects]
    if fully_connected:
        for i in range(n):
            for j in range(i + 1, n):
                add(i, j, 7)
    else:
        shapes2 = (ObjectClass.BAR, ObjectClass.LINE, ObjectClass.DOT_LINE)
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                a, b = objects[i], objects[j]
                # R1
                if cls[i] == ObjectClass.X_AXIS_TITLE and cls[j] == ObjectClass.X_AXIS_LABEL:
                    add(i, j, 1)
                if cls[i] == ObjectClass.Y_AXIS_TITLE and cls[j] == ObjectClass.Y_AXIS_LABEL:
                    add(i, j, 1)
                # R2
                if cls[i] == ObjectClass.X_AXIS_LABEL and cls[j] in shapes2:
                    if _pos_overlap(a.bbox.x_min, a.bbox.x_max, b.bbox.x_min, b.bbox.x_max):
                        add(i, j, 2)
                if cls[i] == ObjectClass.Y_AXIS_LABEL and cls[j] in shapes2:
                    if _pos_overlap(a.bbox.y_min, a.bbox.y_max, b.bbox.y_min, b.bbox.y_max):
                        add(i, j, 2)
                # R4
                if cls[i] == ObjectClass.PIE and cls[j] == ObjectClass.PIE_SLICE:
                    add(i, j, 4)
        # R3 / R5: nearest by boundary distance, ties by smaller id
        for i in range(n):
            if cls[i] == ObjectClass.LEGEND_LABEL:
                _add_nearest(objects, i, ObjectClass.LEGEND_MARKER, 3, add)
            if cls[i] == ObjectClass.PIE_LABEL:
                _add_nearest(objects, i, ObjectClass.PIE_SLICE, 5, add)
    # R6: OCR nodes to their label node
    next_node = n
    for i, obj in enumerate(objects):
        if obj.ocr_text is not None and not obj.cls.is_shape:
            add(next_node, i, 6)
            next_node += 1
    return edges


def _add_nearest(objects, src: int, target_cls: ObjectClass, rule: int, add) -> None:
    best = None
    for j, cand in enumerate(objects):
        if cand.cls is not target_cls or j == src:
            continue
        key = (oracle_rect_distance(objects[src].bbox, cand.bbox), cand.id)
        if best is None or key < best[0]:
            best = (key, j)
    if best is not None:
        add(src, best[1], rule)


# ---------------------------------------------------------------------------
# independent bias oracle


def oracle_bias(h_g: np.ndarray, objects, grid_rows: int, grid_cols: int,
                node_ids) -> np.ndarray:
    """Sequential reference: loop patches, loop objects ascending id, average."""
    row_of = {oid: r for r, oid in enumerate(node_ids)}
    by_id = sorted(objects, key=lambda o: o.id)
    dim = h_g.shape[1]
    out = np.zeros((grid_rows * grid_cols, dim))
    for p in range(grid_rows * grid_cols):
        r, c = divmod(p, grid_cols)
        cx0, cy0 = c / grid_cols, r / grid_rows
        cx1, cy1 = (c + 1) / grid_cols, (r + 1) / grid_rows
        acc = np.zeros(dim)
        count = 0
        for obj in by_id:
            bb = obj.bbox
            if _pos_overlap(bb.x_min, bb.x_max, cx0, cx1) and _pos_overlap(
                bb.y_min, bb.y_max, cy0, cy1
            ):
                acc += h_g[row_of[obj.id]]
                count += 1
        if count:
            out[p] = acc / count
    return out
