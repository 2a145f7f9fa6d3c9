"""chartgraph: multimodal scene graphs for charts.

Builds a fully connected visual graph with exp(-distance) edge weights and a
rule-based textual graph over detected chart elements, encodes both with a
2-layer GCN, and fuses the projected representations into encoder hidden
states as a per-patch additive bias. Includes a desk-scale synthetic
training pipeline and a CLI (``chartgraph``).
"""

__version__ = "0.1.0"

from .chart_model import (
    BBox,
    ChartAnnotation,
    ChartObject,
    ObjectClass,
    parse_annotation,
    serialize_annotation,
    validate_semantics,
)
from .fusion import (
    AlignmentIndex,
    GraphModuleConfig,
    GraphModuleParams,
    RoiSelection,
    compute_bias,
    concat_object_representations,
    fuse,
    graph_module_backward,
    graph_module_forward,
    select_rois,
)
from .geometry import (
    PatchGrid,
    interval_overlap_x,
    interval_overlap_y,
    min_bbox_distance,
    nearest_object,
    patch_alignment,
)
from .gnn import (
    GcnParams,
    MlpParams,
    finite_diff_check,
    gcn_backward,
    gcn_forward,
    make_rng,
    mlp_backward,
    mlp_project,
    normalized_adjacency,
)
from .textual_graph import (
    EdgeRule,
    HashedNgramEmbedder,
    TextualEdgeMode,
    TextualGraph,
    build_textual_graph,
    embed_texts,
    init_textual_nodes,
)
from .toy_pipeline import (
    ChartSample,
    TrainConfig,
    TrainReport,
    generate_synthetic_chart,
    nll_loss,
    relaxed_accuracy,
    train,
)
from .visual_graph import (
    WeightedGraph,
    build_visual_graph,
    edge_coefficient,
    init_visual_nodes_patch,
    init_visual_nodes_roi,
)
