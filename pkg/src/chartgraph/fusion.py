"""Fusion of graph representations into encoder hidden states.

Per-object visual and textual graph representations are concatenated,
projected by an MLP, turned into a per-slot bias (mean of the projected
rows of all objects intersecting the slot's patch, zero for empty patches),
and added residually to the encoder states. ROI mode is the one-object-per-
slot special case with top-36 confidence selection and zero padding.

Bias accumulation always sums rows in ascending object-id order, so the
result is independent of annotation input order and reproducible bit for
bit against a sequential reference loop.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .chart_model import ChartAnnotation, ChartObject
from .errors import (
    MissingLabelNode,
    ShapeMismatch,
    UnknownObjectId,
)
from .geometry import PatchGrid, patch_alignment
from .gnn import (
    GcnParams,
    GcnTape,
    LinearParams,
    MlpParams,
    MlpTape,
    gcn_backward,
    gcn_forward,
    mlp_backward,
    mlp_project,
    normalized_adjacency,
)
from .textual_graph import (
    EmbeddingSource,
    HashedNgramEmbedder,
    NodeKind,
    TextualEdgeMode,
    TextualGraph,
    build_textual_graph,
    embed_texts,
)
from .visual_graph import build_visual_graph, init_visual_nodes_patch, init_visual_nodes_roi

ROI_SLOTS = 36

GRAPH_CHOICES = ("both", "visual-only", "textual-only", "none")
MODE_CHOICES = ("patch", "roi")


@dataclass(frozen=True)
class RoiSelection:
    """Top-36 objects by confidence; pad slots are masked out and zeroed."""

    kept_ids: tuple[int, ...]
    mask: tuple[bool, ...]


def select_rois(objects: Sequence[ChartObject]) -> RoiSelection:
    """Keep the 36 most confident objects (ties: smaller id), pad the rest."""
    ranked = sorted(objects, key=lambda obj: (-obj.confidence, obj.id))
    kept = tuple(obj.id for obj in ranked[:ROI_SLOTS])
    mask = tuple(i < len(kept) for i in range(ROI_SLOTS))
    return RoiSelection(kept_ids=kept, mask=mask)


@dataclass(frozen=True)
class AlignmentIndex:
    """Per slot, the ids of the objects whose bbox intersects that slot's patch."""

    slots: tuple[tuple[int, ...], ...]

    @property
    def num_slots(self) -> int:
        return len(self.slots)


def patch_alignment_index(objects: Sequence[ChartObject], grid: PatchGrid) -> AlignmentIndex:
    """Inverse of patch_alignment: slot -> ascending object ids."""
    per_slot: list[list[int]] = [[] for _ in range(grid.num_patches)]
    for obj in objects:
        for patch in patch_alignment(obj.bbox, grid):
            per_slot[patch].append(obj.id)
    return AlignmentIndex(slots=tuple(tuple(sorted(ids)) for ids in per_slot))


def roi_alignment_index(selection: RoiSelection) -> AlignmentIndex:
    """One object per kept slot, empty for pads."""
    slots = tuple(
        (selection.kept_ids[i],) if i < len(selection.kept_ids) else ()
        for i in range(ROI_SLOTS)
    )
    return AlignmentIndex(slots=slots)


class _BiasPlan:
    """Precomputed gather/scatter indices for compute_bias over a fixed alignment."""

    def __init__(self, align: AlignmentIndex, node_ids: Sequence[int]):
        row_of = {oid: r for r, oid in enumerate(node_ids)}
        slot_idx: list[int] = []
        row_idx: list[int] = []
        counts = np.zeros(align.num_slots, dtype=np.float64)
        for slot, ids in enumerate(align.slots):
            counts[slot] = len(ids)
            for oid in sorted(ids):
                if oid not in row_of:
                    raise UnknownObjectId(f"alignment references unknown object id {oid}")
                slot_idx.append(slot)
                row_idx.append(row_of[oid])
        self.num_slots = align.num_slots
        self.n_rows = len(node_ids)
        self.slot_idx = np.asarray(slot_idx, dtype=np.intp)
        self.row_idx = np.asarray(row_idx, dtype=np.intp)
        self.counts = counts
        self.occupied = counts > 0

    def apply(self, h_g: np.ndarray) -> np.ndarray:
        h_b = np.zeros((self.num_slots, h_g.shape[1]), dtype=np.float64)
        if self.slot_idx.size:
            np.add.at(h_b, self.slot_idx, h_g[self.row_idx])
        h_b[self.occupied] /= self.counts[self.occupied][:, None]
        return h_b

    def backward(self, d_h_b: np.ndarray) -> np.ndarray:
        d_h_g = np.zeros((self.n_rows, d_h_b.shape[1]), dtype=np.float64)
        if self.slot_idx.size:
            scaled = d_h_b.copy()
            scaled[self.occupied] /= self.counts[self.occupied][:, None]
            np.add.at(d_h_g, self.row_idx, scaled[self.slot_idx])
        return d_h_g


def compute_bias(
    h_g: np.ndarray, align: AlignmentIndex, node_ids: Sequence[int]
) -> np.ndarray:
    """Per-slot bias: mean of the h_g rows of the slot's objects, else zero.

    ``node_ids[r]`` names the object whose representation is row r of h_g.
    """
    h_g = np.asarray(h_g, dtype=np.float64)
    if h_g.ndim != 2 or h_g.shape[0] != len(node_ids):
        raise ShapeMismatch(f"h_g {h_g.shape} does not match {len(node_ids)} node ids")
    return _BiasPlan(align, node_ids).apply(h_g)


def fuse(h_e: np.ndarray, h_b: np.ndarray) -> np.ndarray:
    """Residual update of the encoder states: h_e + h_b."""
    h_e = np.asarray(h_e, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    if h_e.shape != h_b.shape:
        raise ShapeMismatch(f"cannot fuse {h_e.shape} with {h_b.shape}")
    return h_e + h_b


def extract_label_rows(graph: TextualGraph, objects: Sequence[ChartObject]) -> np.ndarray:
    """Node index of each object's label node, in object order."""
    label_row = {
        node.object_id: node.index for node in graph.nodes if node.kind is NodeKind.LABEL
    }
    rows = []
    for obj in objects:
        if obj.id not in label_row:
            raise MissingLabelNode(f"textual graph has no label node for object {obj.id}")
        rows.append(label_row[obj.id])
    return np.asarray(rows, dtype=np.intp)


def concat_object_representations(h_v: np.ndarray, h_t_label: np.ndarray) -> np.ndarray:
    """Row-wise concatenation of per-object graph representations, visual first."""
    h_v = np.asarray(h_v, dtype=np.float64)
    h_t_label = np.asarray(h_t_label, dtype=np.float64)
    if h_v.ndim != 2 or h_t_label.ndim != 2 or h_v.shape[0] != h_t_label.shape[0]:
        raise ShapeMismatch(
            f"per-object rows must match: visual {h_v.shape}, textual {h_t_label.shape}"
        )
    return np.concatenate([h_v, h_t_label], axis=1)


@dataclass(frozen=True)
class GraphModuleConfig:
    """Mode flags for the graph module (ablation axes included)."""

    mode: str = "patch"  # "patch" | "roi"
    graphs: str = "both"  # "both" | "visual-only" | "textual-only" | "none"
    textual_edges: str = "rules"  # "rules" | "fully-connected"
    grid: PatchGrid | None = None  # required in patch mode
    dim: int = 32
    e_dim: int = 64
    dropout: float = 0.2
    distance_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODE_CHOICES:
            raise ValueError(f"mode must be one of {MODE_CHOICES}, got {self.mode!r}")
        if self.graphs not in GRAPH_CHOICES:
            raise ValueError(f"graphs must be one of {GRAPH_CHOICES}, got {self.graphs!r}")
        TextualEdgeMode.from_string(self.textual_edges)
        if self.mode == "patch" and self.grid is None:
            raise ValueError("patch mode requires a grid")

    @property
    def wants_visual(self) -> bool:
        return self.graphs in ("both", "visual-only")

    @property
    def wants_textual(self) -> bool:
        return self.graphs in ("both", "textual-only")


@dataclass
class GraphModuleParams:
    """All learnable weights of the graph module."""

    gcn_v: GcnParams
    gcn_t: GcnParams
    text_proj: LinearParams
    mlp: MlpParams

    @classmethod
    def init(cls, rng: np.random.Generator, config: GraphModuleConfig) -> "GraphModuleParams":
        dim, e_dim = config.dim, config.e_dim
        return cls(
            gcn_v=GcnParams.init(rng, dim, dim, dim, dropout=config.dropout),
            gcn_t=GcnParams.init(rng, dim, dim, dim, dropout=config.dropout),
            text_proj=LinearParams.init(rng, e_dim, dim),
            mlp=MlpParams.init(rng, 2 * dim, dim, dim),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "gcn_v.w1": self.gcn_v.w1,
            "gcn_v.w2": self.gcn_v.w2,
            "gcn_t.w1": self.gcn_t.w1,
            "gcn_t.w2": self.gcn_t.w2,
            "text_proj.w": self.text_proj.w,
            "text_proj.b": self.text_proj.b,
            "mlp.w_a": self.mlp.w_a,
            "mlp.b_a": self.mlp.b_a,
            "mlp.w_b": self.mlp.w_b,
            "mlp.b_b": self.mlp.b_b,
        }

    @classmethod
    def from_tensors(
        cls, tensors: dict[str, np.ndarray], dropout: float = 0.2
    ) -> "GraphModuleParams":
        return cls(
            gcn_v=GcnParams(tensors["gcn_v.w1"], tensors["gcn_v.w2"], dropout=dropout),
            gcn_t=GcnParams(tensors["gcn_t.w1"], tensors["gcn_t.w2"], dropout=dropout),
            text_proj=LinearParams(tensors["text_proj.w"], tensors["text_proj.b"]),
            mlp=MlpParams(
                tensors["mlp.w_a"], tensors["mlp.b_a"], tensors["mlp.w_b"], tensors["mlp.b_b"]
            ),
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.tensors().items()}


@dataclass
class GraphContext:
    """Parameter-independent per-annotation precomputation for the graph module."""

    config: GraphModuleConfig
    objects: tuple[ChartObject, ...]
    node_ids: tuple[int, ...]
    num_slots: int
    bias_plan: _BiasPlan | None
    a_hat_v: np.ndarray | None
    v_nodes: np.ndarray | None
    a_hat_t: np.ndarray | None
    t_embed: np.ndarray | None
    label_rows: np.ndarray | None
    roi_selection: RoiSelection | None


def prepare_graph_context(
    annotation: ChartAnnotation,
    encoder_states: np.ndarray,
    config: GraphModuleConfig,
    embedder: EmbeddingSource | None = None,
) -> GraphContext:
    """Build graphs, node features, and the slot alignment for one annotation."""
    encoder_states = np.asarray(encoder_states, dtype=np.float64)
    if encoder_states.ndim != 2:
        raise ShapeMismatch(f"encoder states must be 2-D, got {encoder_states.shape}")
    num_slots = encoder_states.shape[0]
    if config.mode == "roi" and num_slots != ROI_SLOTS:
        raise ShapeMismatch(f"roi mode expects {ROI_SLOTS} encoder slots, got {num_slots}")
    if config.mode == "patch" and num_slots != config.grid.num_patches:
        raise ShapeMismatch(
            f"patch mode expects {config.grid.num_patches} encoder slots, got {num_slots}"
        )

    if config.graphs == "none":
        return GraphContext(
            config=config,
            objects=annotation.objects,
            node_ids=(),
            num_slots=num_slots,
            bias_plan=None,
            a_hat_v=None,
            v_nodes=None,
            a_hat_t=None,
            t_embed=None,
            label_rows=None,
            roi_selection=None,
        )

    selection: RoiSelection | None = None
    if config.mode == "roi":
        selection = select_rois(annotation.objects)
        by_id = {obj.id: obj for obj in annotation.objects}
        objects = tuple(by_id[oid] for oid in selection.kept_ids)
        align = roi_alignment_index(selection)
    else:
        objects = annotation.objects
        align = patch_alignment_index(objects, config.grid)
    node_ids = tuple(obj.id for obj in objects)

    a_hat_v = v_nodes = None
    if config.wants_visual:
        graph_v = build_visual_graph(objects, distance_scale=config.distance_scale)
        a_hat_v = normalized_adjacency(graph_v)
        if config.mode == "roi":
            v_nodes = init_visual_nodes_roi(encoder_states[: len(objects)], objects)
        else:
            v_nodes = init_visual_nodes_patch(objects, config.grid, encoder_states)

    a_hat_t = t_embed = label_rows = None
    if config.wants_textual:
        graph_t = build_textual_graph(objects, TextualEdgeMode.from_string(config.textual_edges))
        a_hat_t = normalized_adjacency(graph_t)
        if embedder is None:
            embedder = HashedNgramEmbedder(config.e_dim)
        if embedder.dim != config.e_dim:
            raise ShapeMismatch(f"embedder dim {embedder.dim} != configured e_dim {config.e_dim}")
        t_embed = embed_texts([node.text for node in graph_t.nodes], embedder)
        label_rows = extract_label_rows(graph_t, objects)

    return GraphContext(
        config=config,
        objects=objects,
        node_ids=node_ids,
        num_slots=num_slots,
        bias_plan=_BiasPlan(align, node_ids),
        a_hat_v=a_hat_v,
        v_nodes=v_nodes,
        a_hat_t=a_hat_t,
        t_embed=t_embed,
        label_rows=label_rows,
        roi_selection=selection,
    )


@dataclass
class GraphModuleTape:
    ctx: GraphContext
    params: GraphModuleParams
    tape_v: GcnTape | None
    tape_t: GcnTape | None
    tape_mlp: MlpTape | None
    concat: np.ndarray | None
    h_b: np.ndarray | None
    h_e_shape: tuple[int, int]


def forward_prepared(
    ctx: GraphContext,
    h_e: np.ndarray,
    params: GraphModuleParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, GraphModuleTape]:
    """Graph-module forward over a prepared context; returns fused states + tape."""
    h_e = np.asarray(h_e, dtype=np.float64)
    config = ctx.config
    if config.graphs == "none":
        tape = GraphModuleTape(
            ctx=ctx, params=params, tape_v=None, tape_t=None, tape_mlp=None,
            concat=None, h_b=None, h_e_shape=h_e.shape,
        )
        return h_e.copy(), tape

    n = len(ctx.node_ids)
    dim = config.dim
    tape_v = tape_t = None
    if config.wants_visual:
        h_v, tape_v = gcn_forward(ctx.a_hat_v, ctx.v_nodes, params.gcn_v, train=train, rng=rng)
    else:
        h_v = np.zeros((n, dim), dtype=np.float64)
    if config.wants_textual:
        t_nodes = ctx.t_embed @ params.text_proj.w + params.text_proj.b
        h_t_all, tape_t = gcn_forward(ctx.a_hat_t, t_nodes, params.gcn_t, train=train, rng=rng)
        h_t = h_t_all[ctx.label_rows]
    else:
        h_t = np.zeros((n, dim), dtype=np.float64)

    concat = concat_object_representations(h_v, h_t)
    h_g, tape_mlp = mlp_project(concat, params.mlp)
    h_b = ctx.bias_plan.apply(h_g)
    h_tilde = fuse(h_e, h_b)
    tape = GraphModuleTape(
        ctx=ctx, params=params, tape_v=tape_v, tape_t=tape_t, tape_mlp=tape_mlp,
        concat=concat, h_b=h_b, h_e_shape=h_e.shape,
    )
    return h_tilde, tape


def graph_module_forward(
    annotation: ChartAnnotation,
    encoder_states: np.ndarray,
    config: GraphModuleConfig,
    params: GraphModuleParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
    embedder: EmbeddingSource | None = None,
) -> tuple[np.ndarray, GraphModuleTape]:
    """Full composition: build graphs, encode, project, bias, fuse."""
    ctx = prepare_graph_context(annotation, encoder_states, config, embedder=embedder)
    return forward_prepared(ctx, encoder_states, params, train=train, rng=rng)


def graph_module_backward(
    tape: GraphModuleTape, d_h_tilde: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients of a scalar loss wrt encoder states and every module parameter."""
    d_h_tilde = np.asarray(d_h_tilde, dtype=np.float64)
    grads = tape.params.zero_grads()
    d_h_e = d_h_tilde.copy()
    ctx = tape.ctx
    if ctx.config.graphs == "none":
        return d_h_e, grads

    dim = ctx.config.dim
    d_h_g = ctx.bias_plan.backward(d_h_tilde)
    d_concat, d_w_a, d_b_a, d_w_b, d_b_b = mlp_backward(tape.tape_mlp, d_h_g)
    grads["mlp.w_a"] = d_w_a
    grads["mlp.b_a"] = d_b_a
    grads["mlp.w_b"] = d_w_b
    grads["mlp.b_b"] = d_b_b

    d_h_v = d_concat[:, :dim]
    d_h_t_label = d_concat[:, dim:]
    if ctx.config.wants_visual:
        _, d_w1, d_w2 = gcn_backward(tape.tape_v, d_h_v)
        grads["gcn_v.w1"] = d_w1
        grads["gcn_v.w2"] = d_w2
    if ctx.config.wants_textual:
        d_h_t_all = np.zeros((ctx.t_embed.shape[0], dim), dtype=np.float64)
        d_h_t_all[ctx.label_rows] = d_h_t_label
        d_t, d_w1, d_w2 = gcn_backward(tape.tape_t, d_h_t_all)
        grads["gcn_t.w1"] = d_w1
        grads["gcn_t.w2"] = d_w2
        grads["text_proj.w"] = ctx.t_embed.T @ d_t
        grads["text_proj.b"] = d_t.sum(axis=0)
    return d_h_e, grads
