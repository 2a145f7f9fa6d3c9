"""Visual graph: fully connected object graph with distance-decay edge weights.

Every pair of detected objects is connected; the edge weight exp(-d) with d
the minimum bounding-box distance prioritizes closer neighbours. Distances
are measured in normalized coordinates so the coefficients stay in a usable
range regardless of image resolution; ``distance_scale`` rescales d before
exponentiation for sensitivity studies.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chart_model import ChartObject
from .errors import EmptyAnnotation, InvalidDistance, ShapeMismatch
from .geometry import PatchGrid, min_bbox_distance, patch_alignment

GRAPH_FORMAT_VERSION = "1"


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected graph over object ids with per-edge coefficients.

    edges hold (i, j, weight) with i < j indexing into node_ids; self-loops
    are never stored (the GCN adds its own).
    """

    node_ids: tuple[int, ...]
    edges: tuple[tuple[int, int, float], ...]

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def weighted_edges(self) -> tuple[tuple[int, int, float], ...]:
        return self.edges


def edge_coefficient(d: float) -> float:
    """Distance-decay coefficient exp(-d), in (0, 1] for finite d >= 0."""
    if not math.isfinite(d) or d < 0.0:
        raise InvalidDistance(f"distance must be finite and non-negative, got {d!r}")
    return math.exp(-d)


def build_visual_graph(
    objects: Sequence[ChartObject], distance_scale: float = 1.0
) -> WeightedGraph:
    """Complete graph over objects in input order, weight(i,j) = exp(-d_ij)."""
    if not objects:
        raise EmptyAnnotation("visual graph requires at least one object")
    edges = []
    for i in range(len(objects)):
        for j in range(i + 1, len(objects)):
            d = distance_scale * min_bbox_distance(objects[i].bbox, objects[j].bbox)
            edges.append((i, j, edge_coefficient(d)))
    return WeightedGraph(
        node_ids=tuple(obj.id for obj in objects),
        edges=tuple(edges),
    )


def init_visual_nodes_patch(
    objects: Sequence[ChartObject], grid: PatchGrid, encoder_states: np.ndarray
) -> np.ndarray:
    """Node features as the mean of the encoder states of each object's patches."""
    encoder_states = np.asarray(encoder_states, dtype=np.float64)
    if encoder_states.ndim != 2 or encoder_states.shape[0] != grid.num_patches:
        raise ShapeMismatch(
            f"encoder_states must be ({grid.num_patches} x dim), got {encoder_states.shape}"
        )
    out = np.empty((len(objects), encoder_states.shape[1]), dtype=np.float64)
    for row, obj in enumerate(objects):
        patches = patch_alignment(obj.bbox, grid)
        out[row] = encoder_states[list(patches)].mean(axis=0)
    return out


def init_visual_nodes_roi(
    roi_features: np.ndarray, objects: Sequence[ChartObject]
) -> np.ndarray:
    """One ROI row per object, copied in object index order."""
    roi_features = np.asarray(roi_features, dtype=np.float64)
    if roi_features.ndim != 2 or roi_features.shape[0] != len(objects):
        raise ShapeMismatch(
            f"expected one ROI row per object ({len(objects)}), got {roi_features.shape}"
        )
    return roi_features.copy()


def weighted_graph_to_json(graph: WeightedGraph) -> str:
    """Structured-text export mirroring the WeightedGraph fields."""
    doc = {
        "format_version": GRAPH_FORMAT_VERSION,
        "kind": "visual",
        "n": graph.n,
        "node_ids": list(graph.node_ids),
        "edges": [[i, j, w] for i, j, w in graph.edges],
    }
    return json.dumps(doc, indent=2)


def weighted_graph_from_json(text: str) -> WeightedGraph:
    doc = json.loads(text)
    return WeightedGraph(
        node_ids=tuple(doc["node_ids"]),
        edges=tuple((int(i), int(j), float(w)) for i, j, w in doc["edges"]),
    )


def visual_graph_to_dot(graph: WeightedGraph, objects: Sequence[ChartObject]) -> str:
    """DOT export; nodes labeled id/class, edge labels the weight to 4 decimals."""
    by_id = {obj.id: obj for obj in objects}
    lines = ["graph visual {"]
    for idx, node_id in enumerate(graph.node_ids):
        cls = by_id[node_id].cls.value if node_id in by_id else "?"
        lines.append(f'  n{idx} [label="{node_id}/{cls}"];')
    for i, j, w in graph.edges:
        lines.append(f'  n{i} -- n{j} [label="{w:.4f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
