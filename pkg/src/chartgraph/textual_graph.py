"""Textual graph: rule-based semantic graph over label nodes and OCR nodes.

Label nodes carry the class name predicted for an object; OCR nodes carry the
text extracted from non-shape objects and link to their label node. Label
nodes are wired by chart semantics:

  R1  axis title        -- every matching axis label
  R2  axis label        -- bar/line/dot-line whose box overlaps on that axis
  R3  legend label      -- closest legend marker
  R4  pie               -- every pie slice
  R5  pie label         -- nearest pie slice
  R6  OCR node          -- its own label node

A fully-connected mode replaces R1-R5 with all label-node pairs (R6 kept)
for ablation runs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum, IntEnum
from hashlib import sha256
from typing import Protocol, Sequence

import numpy as np

from .chart_model import ChartObject, ObjectClass
from .errors import (
    EmptyAnnotation,
    MissingEmbedding,
    NoCandidate,
    SchemaViolation,
    ShapeMismatch,
    ZeroLengthText,
)
from .geometry import interval_overlap_x, interval_overlap_y, nearest_object

logger = logging.getLogger(__name__)

EMBEDDINGS_FORMAT_VERSION = "1"

_R2_SHAPES = (ObjectClass.BAR, ObjectClass.LINE, ObjectClass.DOT_LINE)


class EdgeRule(IntEnum):
    """Edge-generating rules; numeric value is the dedup priority (lower wins)."""

    AXIS_TITLE_TO_LABEL = 1
    AXIS_LABEL_TO_SHAPE = 2
    LEGEND_LABEL_TO_MARKER = 3
    PIE_TO_SLICE = 4
    PIE_LABEL_TO_SLICE = 5
    OCR_TO_LABEL = 6
    FULLY_CONNECTED = 7

    @property
    def label(self) -> str:
        return _RULE_LABELS[self]


_RULE_LABELS = {
    EdgeRule.AXIS_TITLE_TO_LABEL: "AxisTitleToLabel",
    EdgeRule.AXIS_LABEL_TO_SHAPE: "AxisLabelToShape",
    EdgeRule.LEGEND_LABEL_TO_MARKER: "LegendLabelToMarker",
    EdgeRule.PIE_TO_SLICE: "PieToSlice",
    EdgeRule.PIE_LABEL_TO_SLICE: "PieLabelToSlice",
    EdgeRule.OCR_TO_LABEL: "OcrToLabel",
    EdgeRule.FULLY_CONNECTED: "FullyConnected",
}
_RULE_BY_LABEL = {v: k for k, v in _RULE_LABELS.items()}


class NodeKind(Enum):
    LABEL = "label"
    OCR = "ocr"


class TextualEdgeMode(Enum):
    RULES = "rules"
    FULLY_CONNECTED = "fully-connected"

    @classmethod
    def from_string(cls, value: str) -> "TextualEdgeMode":
        normalized = value.replace("_", "-").lower()
        for mode in cls:
            if mode.value == normalized:
                return mode
        raise ValueError(f"unknown textual edge mode {value!r}")


@dataclass(frozen=True)
class TextualNode:
    index: int
    kind: NodeKind
    object_id: int
    text: str


@dataclass(frozen=True)
class RuleEdge:
    i: int
    j: int
    rule: EdgeRule


@dataclass(frozen=True)
class TextualGraph:
    nodes: tuple[TextualNode, ...]
    edges: tuple[RuleEdge, ...]

    @property
    def n(self) -> int:
        return len(self.nodes)

    def weighted_edges(self) -> tuple[tuple[int, int, float], ...]:
        """Unit-weight view of the edge list for adjacency construction."""
        return tuple((e.i, e.j, 1.0) for e in self.edges)

    def label_node_index(self, object_id: int) -> int:
        for node in self.nodes:
            if node.kind is NodeKind.LABEL and node.object_id == object_id:
                return node.index
        raise KeyError(object_id)


def build_textual_graph(
    objects: Sequence[ChartObject],
    mode: TextualEdgeMode = TextualEdgeMode.RULES,
) -> TextualGraph:
    """Build label and OCR nodes plus the rule edges active under ``mode``.

    Node order: one label node per object in input order, then OCR nodes in
    input order. Edges derivable from several rules keep the lowest-numbered
    tag. Missing nearest-neighbour targets (R3/R5) are skipped with a warning
    so detector dropout degrades instead of aborting.
    """
    if not objects:
        raise EmptyAnnotation("textual graph requires at least one object")

    nodes: list[TextualNode] = [
        TextualNode(index=i, kind=NodeKind.LABEL, object_id=obj.id, text=obj.cls.value)
        for i, obj in enumerate(objects)
    ]
    ocr_label_pairs: list[tuple[int, int]] = []
    for i, obj in enumerate(objects):
        if obj.ocr_text is not None and not obj.cls.is_shape:
            node = TextualNode(
                index=len(nodes), kind=NodeKind.OCR, object_id=obj.id, text=obj.ocr_text
            )
            nodes.append(node)
            ocr_label_pairs.append((node.index, i))

    best_rule: dict[tuple[int, int], EdgeRule] = {}

    def add(i: int, j: int, rule: EdgeRule) -> None:
        if i == j:
            return
        key = (i, j) if i < j else (j, i)
        if key not in best_rule or rule < best_rule[key]:
            best_rule[key] = rule

    if mode is TextualEdgeMode.RULES:
        _add_rule_edges(objects, add)
    else:
        for i in range(len(objects)):
            for j in range(i + 1, len(objects)):
                add(i, j, EdgeRule.FULLY_CONNECTED)
    for ocr_idx, label_idx in ocr_label_pairs:
        add(ocr_idx, label_idx, EdgeRule.OCR_TO_LABEL)

    edges = tuple(
        RuleEdge(i=i, j=j, rule=best_rule[(i, j)]) for i, j in sorted(best_rule)
    )
    return TextualGraph(nodes=tuple(nodes), edges=edges)


def _add_rule_edges(objects: Sequence[ChartObject], add) -> None:
    by_class: dict[ObjectClass, list[int]] = {}
    for i, obj in enumerate(objects):
        by_class.setdefault(obj.cls, []).append(i)
    index_of_id = {obj.id: i for i, obj in enumerate(objects)}

    # R1: axis titles to all their axis labels
    for title_cls, label_cls in (
        (ObjectClass.X_AXIS_TITLE, ObjectClass.X_AXIS_LABEL),
        (ObjectClass.Y_AXIS_TITLE, ObjectClass.Y_AXIS_LABEL),
    ):
        for t in by_class.get(title_cls, ()):
            for l in by_class.get(label_cls, ()):
                add(t, l, EdgeRule.AXIS_TITLE_TO_LABEL)

    # R2: axis labels to shapes whose box projection overlaps on that axis
    for label_cls, overlaps in (
        (ObjectClass.X_AXIS_LABEL, interval_overlap_x),
        (ObjectClass.Y_AXIS_LABEL, interval_overlap_y),
    ):
        for l in by_class.get(label_cls, ()):
            for shape_cls in _R2_SHAPES:
                for s in by_class.get(shape_cls, ()):
                    if overlaps(objects[l].bbox, objects[s].bbox):
                        add(l, s, EdgeRule.AXIS_LABEL_TO_SHAPE)

    # R3: legend labels to the closest legend marker
    for l in by_class.get(ObjectClass.LEGEND_LABEL, ()):
        try:
            marker_id = nearest_object(objects[l], objects, {ObjectClass.LEGEND_MARKER})
        except NoCandidate:
            logger.warning("legend label %d has no legend marker; skipping R3", objects[l].id)
            continue
        add(l, index_of_id[marker_id], EdgeRule.LEGEND_LABEL_TO_MARKER)

    # R4: pies to all slices
    for p in by_class.get(ObjectClass.PIE, ()):
        for s in by_class.get(ObjectClass.PIE_SLICE, ()):
            add(p, s, EdgeRule.PIE_TO_SLICE)

    # R5: pie labels to the nearest slice
    for l in by_class.get(ObjectClass.PIE_LABEL, ()):
        try:
            slice_id = nearest_object(objects[l], objects, {ObjectClass.PIE_SLICE})
        except NoCandidate:
            logger.warning("pie label %d has no pie slice; skipping R5", objects[l].id)
            continue
        add(l, index_of_id[slice_id], EdgeRule.PIE_LABEL_TO_SLICE)


class EmbeddingSource(Protocol):
    """Anything that maps a text to a fixed-width vector."""

    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashedNgramEmbedder:
    """Deterministic fallback embedder: hashed character 3-grams, L2-normalized.

    Stands in for a language-model embedding service at desk scale; identical
    strings always map to identical vectors.
    """

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("embedding dim must be positive")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def embed(self, text: str) -> np.ndarray:
        if text == "":
            raise ZeroLengthText("cannot embed an empty string")
        cached = self._cache.get(text)
        if cached is not None:
            return cached
        padded = f"##{text}##"
        vec = np.zeros(self.dim, dtype=np.float64)
        for k in range(len(padded) - 2):
            gram = padded[k : k + 3]
            bucket = int.from_bytes(sha256(gram.encode("utf-8")).digest()[:8], "big") % self.dim
            vec[bucket] += 1.0
        vec /= np.linalg.norm(vec)
        self._cache[text] = vec
        return vec


class TableEmbedder:
    """Lookup embedder backed by an embeddings file.

    ``level`` declares what the file stores: one vector per string, or
    token-level vectors which are mean-pooled here.
    """

    def __init__(self, dim: int, level: str, entries: dict[str, np.ndarray]):
        if level not in ("string", "token"):
            raise SchemaViolation(f"embeddings level must be 'string' or 'token', got {level!r}")
        self.dim = dim
        self.level = level
        self._entries = entries

    def embed(self, text: str) -> np.ndarray:
        if text == "":
            raise ZeroLengthText("cannot embed an empty string")
        if text not in self._entries:
            raise MissingEmbedding(f"no embedding for text {text!r}")
        return self._entries[text]


def load_embedding_table(data: bytes | str) -> TableEmbedder:
    """Parse an embeddings file (JSON with e_dim/level header) into a TableEmbedder."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    doc = json.loads(data)
    if not isinstance(doc, dict):
        raise SchemaViolation("embeddings: top level must be an object")
    e_dim = doc.get("e_dim")
    if not isinstance(e_dim, int) or e_dim < 1:
        raise SchemaViolation("embeddings: e_dim must be a positive integer")
    level = doc.get("level", "string")
    raw_entries = doc.get("entries")
    if not isinstance(raw_entries, dict):
        raise SchemaViolation("embeddings: entries must be a mapping")
    entries: dict[str, np.ndarray] = {}
    for text, value in raw_entries.items():
        arr = np.asarray(value, dtype=np.float64)
        if level == "token":
            if arr.ndim != 2 or arr.shape[1] != e_dim:
                raise SchemaViolation(
                    f"embeddings: entry {text!r} must be (tokens x {e_dim}), got {arr.shape}"
                )
            arr = arr.mean(axis=0)
        else:
            if arr.shape != (e_dim,):
                raise SchemaViolation(
                    f"embeddings: entry {text!r} must have {e_dim} values, got {arr.shape}"
                )
        entries[text] = arr
    return TableEmbedder(dim=e_dim, level=level, entries=entries)


def embed_texts(texts: Sequence[str], embedder: EmbeddingSource) -> np.ndarray:
    """Row t = embedding of texts[t]."""
    out = np.empty((len(texts), embedder.dim), dtype=np.float64)
    for t, text in enumerate(texts):
        out[t] = embedder.embed(text)
    return out


def init_textual_nodes(graph: TextualGraph, embeddings: np.ndarray, projector) -> np.ndarray:
    """Project per-node text embeddings into the visual feature space.

    ``projector`` is any affine map with ``w`` (e_dim x dim) and ``b`` (dim)
    attributes, e.g. :class:`chartgraph.gnn.LinearParams`.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    weight = np.asarray(projector.w, dtype=np.float64)
    bias = np.asarray(projector.b, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] != graph.n:
        raise ShapeMismatch(
            f"expected one embedding row per node ({graph.n}), got {embeddings.shape}"
        )
    if weight.ndim != 2 or weight.shape[0] != embeddings.shape[1] or bias.shape != (weight.shape[1],):
        raise ShapeMismatch(
            f"projector shapes {weight.shape}/{bias.shape} do not map "
            f"e_dim {embeddings.shape[1]} to a common dim"
        )
    return embeddings @ weight + bias


def textual_graph_to_json(graph: TextualGraph) -> str:
    """Structured-text export mirroring the TextualGraph fields."""
    doc = {
        "format_version": "1",
        "kind": "textual",
        "nodes": [
            {
                "index": node.index,
                "kind": node.kind.value,
                "object_id": node.object_id,
                "text": node.text,
            }
            for node in graph.nodes
        ],
        "edges": [[e.i, e.j, e.rule.label] for e in graph.edges],
    }
    return json.dumps(doc, indent=2)


def textual_graph_from_json(text: str) -> TextualGraph:
    doc = json.loads(text)
    nodes = tuple(
        TextualNode(
            index=entry["index"],
            kind=NodeKind(entry["kind"]),
            object_id=entry["object_id"],
            text=entry["text"],
        )
        for entry in doc["nodes"]
    )
    edges = tuple(
        RuleEdge(i=int(i), j=int(j), rule=_RULE_BY_LABEL[label]) for i, j, label in doc["edges"]
    )
    return TextualGraph(nodes=nodes, edges=edges)


def textual_graph_to_dot(graph: TextualGraph) -> str:
    """DOT export; rule names as edge labels, node shape marks label vs OCR."""
    lines = ["graph textual {"]
    for node in graph.nodes:
        shape = "box" if node.kind is NodeKind.LABEL else "ellipse"
        text = node.text.replace("\\", "\\\\").replace('"', '\\"')
        lines.append(f'  n{node.index} [label="{node.object_id}/{text}", shape={shape}];')
    for e in graph.edges:
        lines.append(f'  n{e.i} -- n{e.j} [label="{e.rule.label}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
