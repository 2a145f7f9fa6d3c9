"""Command-line surface: build-graph, grad-check, train, fuse.

Exit codes: 0 success, 1 parse/schema/config error, 2 I/O error,
3 gradient check failure, 4 diverged training loss. stdout carries
machine-readable output only; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import gnn
from .chart_model import (
    ANNOTATION_FORMAT_VERSION,
    parse_annotation,
    validate_semantics,
)
from .errors import ChartGraphError, DivergedLoss, MalformedInput, SchemaViolation
from .fusion import (
    GraphModuleConfig,
    GraphModuleParams,
    forward_prepared,
    graph_module_backward,
    prepare_graph_context,
)
from .geometry import PatchGrid
from .gnn import (
    CHECKPOINT_FORMAT_VERSION,
    GcnParams,
    MlpParams,
    finite_diff_check,
    load_checkpoint,
    make_rng,
    mlp_project,
    normalized_adjacency,
    save_checkpoint,
)
from .report import REPORT_FORMAT_VERSION, write_report
from .textual_graph import (
    EMBEDDINGS_FORMAT_VERSION,
    TextualEdgeMode,
    build_textual_graph,
    textual_graph_to_dot,
    textual_graph_to_json,
)
from .toy_pipeline import (
    DATASET_FORMAT_VERSION,
    GeneratorSpec,
    PseudoEncoder,
    TrainConfig,
    VOCAB,
    build_model,
    config_hash,
    decoder_backward,
    decoder_forward,
    generate_synthetic_chart,
    make_dataset,
    nll_loss,
    nll_loss_backward,
    save_dataset,
    train,
)
from .visual_graph import (
    GRAPH_FORMAT_VERSION,
    build_visual_graph,
    visual_graph_to_dot,
    weighted_graph_to_json,
)

GRAD_CHECK_TOLERANCE = 1e-4


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # config errors exit 1, not argparse's default 2
        raise _UsageError(message)


def _parse_grid(text: str) -> PatchGrid:
    try:
        rows, cols = text.lower().split("x")
        return PatchGrid(int(rows), int(cols))
    except (ValueError, TypeError) as exc:
        raise _UsageError(f"--grid expects ROWSxCOLS, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chartgraph", description=__doc__)
    parser.add_argument("--version", action="store_true", help="print format versions and exit")
    sub = parser.add_subparsers(dest="command")

    p_build = sub.add_parser("build-graph", help="build visual and textual graphs", add_help=True)
    p_build.add_argument("annotation", help="annotation JSON file")
    p_build.add_argument("-o", "--out-dir", default=".", help="output directory")
    p_build.add_argument("--dot", action="store_true", help="also write DOT files")
    p_build.add_argument(
        "--textual-edges", choices=("rules", "fully-connected"), default="rules"
    )
    p_build.add_argument("--distance-scale", type=float, default=1.0)

    p_grad = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p_grad.add_argument("--seed", type=int, default=42)
    p_grad.add_argument("--objects", type=int, default=5, help="objects in the check chart")
    p_grad.add_argument("--dim", type=int, default=8)
    p_grad.add_argument("--eps", type=float, default=1e-5)

    p_train = sub.add_parser("train", help="generate data, train, evaluate, write report")
    p_train.add_argument("config", nargs="?", help="JSON config file (defaults used if omitted)")
    p_train.add_argument("-o", "--out-dir", default="train_out")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--graphs", choices=("both", "visual-only", "textual-only", "none"))
    p_train.add_argument("--textual-edges", choices=("rules", "fully-connected"))
    p_train.add_argument("--mode", choices=("patch", "roi"))
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--train-size", type=int)
    p_train.add_argument("--test-size", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--optimizer", choices=("sgd", "adamw"))
    p_train.add_argument("--no-figures", action="store_true")
    p_train.add_argument("--dump-dataset", metavar="PATH", help="also write the train set")

    p_fuse = sub.add_parser("fuse", help="compute and dump the encoder bias for an annotation")
    p_fuse.add_argument("annotation")
    p_fuse.add_argument("-o", "--out", required=True, help="output tensor file")
    p_fuse.add_argument("--mode", choices=("patch", "roi"), default="patch")
    p_fuse.add_argument("--grid", default=None, help="ROWSxCOLS (patch mode, default 16x16)")
    p_fuse.add_argument("--graphs", choices=("both", "visual-only", "textual-only"), default="both")
    p_fuse.add_argument("--textual-edges", choices=("rules", "fully-connected"), default="rules")
    p_fuse.add_argument("--distance-scale", type=float, default=1.0)
    p_fuse.add_argument("--dim", type=int, default=32)
    p_fuse.add_argument("--e-dim", type=int, default=64)
    p_fuse.add_argument("--seed", type=int, default=42)
    p_fuse.add_argument("--params", help="graph-module checkpoint file")
    p_fuse.add_argument("--states", help="encoder-states tensor file (else pseudo-encoder)")
    return parser


def _print_versions() -> None:
    print(f"chartgraph {__version__}")
    print(f"annotation-format {ANNOTATION_FORMAT_VERSION}")
    print(f"graph-format {GRAPH_FORMAT_VERSION}")
    print(f"embeddings-format {EMBEDDINGS_FORMAT_VERSION}")
    print(f"checkpoint-format {CHECKPOINT_FORMAT_VERSION}")
    print(f"dataset-format {DATASET_FORMAT_VERSION}")
    print(f"report-format {REPORT_FORMAT_VERSION}")


def cmd_build_graph(args) -> int:
    data = Path(args.annotation).read_bytes()
    annotation = parse_annotation(data)
    for warning in validate_semantics(annotation):
        print(f"warning: {warning.message}", file=sys.stderr)
    visual = build_visual_graph(annotation.objects, distance_scale=args.distance_scale)
    textual = build_textual_graph(
        annotation.objects, TextualEdgeMode.from_string(args.textual_edges)
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.annotation).stem
    written = {}
    visual_path = out_dir / f"{stem}.visual.json"
    visual_path.write_text(weighted_graph_to_json(visual), encoding="utf-8")
    written["visual"] = str(visual_path)
    textual_path = out_dir / f"{stem}.textual.json"
    textual_path.write_text(textual_graph_to_json(textual), encoding="utf-8")
    written["textual"] = str(textual_path)
    if args.dot:
        dot_v = out_dir / f"{stem}.visual.dot"
        dot_v.write_text(visual_graph_to_dot(visual, annotation.objects), encoding="utf-8")
        written["visual_dot"] = str(dot_v)
        dot_t = out_dir / f"{stem}.textual.dot"
        dot_t.write_text(textual_graph_to_dot(textual), encoding="utf-8")
        written["textual_dot"] = str(dot_t)
    print(json.dumps(written, sort_keys=True))
    return 0


def run_gradient_checks(
    seed: int = 42, n_objects: int = 5, dim: int = 8, eps: float = 1e-5
) -> dict[str, float]:
    """Max relative finite-difference error per verified block."""
    rng = make_rng(seed)
    grid = PatchGrid(4, 4)
    encoder = PseudoEncoder(rng, grid, dim)
    spec = GeneratorSpec(chart_type="bar", n_elements=min(3, max(1, n_objects // 2)), grid=grid)
    sample = generate_synthetic_chart(rng, spec, encoder, chart_id="grad-check")
    config = TrainConfig(
        dim=dim, e_dim=16, embed_dim=6, decoder_hidden=12,
        grid_rows=grid.rows, grid_cols=grid.cols, dropout=0.0,
    )
    model = build_model(config, rng)
    ctx = prepare_graph_context(sample.annotation, sample.patch_features, model.gm_config)
    results: dict[str, float] = {}

    # standalone GCN over the visual adjacency
    gcn_params = GcnParams.init(rng, dim, dim, dim, dropout=0.0)
    x = rng.standard_normal((len(ctx.node_ids), dim))
    a_hat = ctx.a_hat_v
    r_gcn = rng.standard_normal((len(ctx.node_ids), dim))

    def gcn_loss() -> float:
        h, _ = gnn.gcn_forward(a_hat, x, gcn_params)
        return float((h * r_gcn).sum())

    _, tape = gnn.gcn_forward(a_hat, x, gcn_params)
    _, d_w1, d_w2 = gnn.gcn_backward(tape, r_gcn)
    results["gcn"] = finite_diff_check(
        gcn_loss, {"w1": gcn_params.w1, "w2": gcn_params.w2},
        {"w1": d_w1, "w2": d_w2}, eps=eps, rng=make_rng(seed + 1),
    )

    # standalone projection MLP
    mlp_params = MlpParams.init(rng, 2 * dim, dim, dim)
    xm = rng.standard_normal((4, 2 * dim))
    r_mlp = rng.standard_normal((4, dim))

    def mlp_loss() -> float:
        y, _ = mlp_project(xm, mlp_params)
        return float((y * r_mlp).sum())

    _, tape_m = mlp_project(xm, mlp_params)
    _, d_w_a, d_b_a, d_w_b, d_b_b = gnn.mlp_backward(tape_m, r_mlp)
    results["mlp"] = finite_diff_check(
        mlp_loss,
        {"w_a": mlp_params.w_a, "b_a": mlp_params.b_a,
         "w_b": mlp_params.w_b, "b_b": mlp_params.b_b},
        {"w_a": d_w_a, "b_a": d_b_a, "w_b": d_w_b, "b_b": d_b_b},
        eps=eps, rng=make_rng(seed + 2),
    )

    # decoder with NLL head
    h_states = rng.standard_normal((grid.num_patches, dim))

    def decoder_loss() -> float:
        logits, _ = decoder_forward(
            h_states, sample.question_tokens, sample.answer_tokens, model.dec_params
        )
        return nll_loss(logits, sample.answer_tokens)

    logits, tape_d = decoder_forward(
        h_states, sample.question_tokens, sample.answer_tokens, model.dec_params
    )
    _, dec_grads = decoder_backward(tape_d, nll_loss_backward(logits, sample.answer_tokens))
    results["decoder"] = finite_diff_check(
        decoder_loss, model.dec_params.tensors(), dec_grads, eps=eps, rng=make_rng(seed + 3)
    )

    # NLL alone, treating the logits as the parameter tensor
    logits_free = rng.standard_normal((len(sample.answer_tokens), VOCAB.size))

    def nll_only() -> float:
        return nll_loss(logits_free, sample.answer_tokens)

    results["nll"] = finite_diff_check(
        nll_only, {"logits": logits_free},
        {"logits": nll_loss_backward(logits_free, sample.answer_tokens)},
        eps=eps, rng=make_rng(seed + 4),
    )

    # full composition: graph module + decoder + NLL, all parameters at once
    def composed_loss() -> float:
        h_tilde, _ = forward_prepared(ctx, sample.patch_features, model.gm_params)
        lg, _ = decoder_forward(
            h_tilde, sample.question_tokens, sample.answer_tokens, model.dec_params
        )
        return nll_loss(lg, sample.answer_tokens)

    h_tilde, tape_g = forward_prepared(ctx, sample.patch_features, model.gm_params)
    lg, tape_d2 = decoder_forward(
        h_tilde, sample.question_tokens, sample.answer_tokens, model.dec_params
    )
    d_states, dec_grads2 = decoder_backward(tape_d2, nll_loss_backward(lg, sample.answer_tokens))
    _, gm_grads = graph_module_backward(tape_g, d_states)
    results["graph_module"] = finite_diff_check(
        composed_loss, model.tensors(), {**gm_grads, **dec_grads2},
        eps=eps, rng=make_rng(seed + 5),
    )
    return results


def cmd_grad_check(args) -> int:
    results = run_gradient_checks(
        seed=args.seed, n_objects=args.objects, dim=args.dim, eps=args.eps
    )
    failed = []
    for name, err in results.items():
        print(f"{name}\t{err:.3e}")
        if not err < GRAD_CHECK_TOLERANCE:
            failed.append(name)
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 3
    return 0


def cmd_train(args) -> int:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise _UsageError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise _UsageError("config must be a JSON object")
    overrides = {
        "seed": args.seed,
        "graphs": args.graphs,
        "textual_edges": args.textual_edges,
        "mode": args.mode,
        "epochs": args.epochs,
        "train_size": args.train_size,
        "test_size": args.test_size,
        "lr": args.lr,
        "optimizer": args.optimizer,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = TrainConfig.from_dict(doc)
    except (ValueError, TypeError) as exc:
        raise _UsageError(f"bad config: {exc}") from exc

    report = train(config)
    paths = write_report(report, args.out_dir, figures=not args.no_figures)
    if args.dump_dataset:
        # regenerate from the same seed streams used inside train()
        ss = np.random.SeedSequence(config.seed)
        s_encoder, s_train = ss.spawn(6)[:2]
        grid = PatchGrid(config.grid_rows, config.grid_cols)
        encoder = PseudoEncoder(make_rng(s_encoder), grid, config.dim)
        samples = make_dataset(make_rng(s_train), config, encoder, config.train_size, "train")
        save_dataset(args.dump_dataset, samples, config.seed, config_hash(config))
        paths["dataset"] = Path(args.dump_dataset)
    print(json.dumps({name: str(path) for name, path in paths.items()}, sort_keys=True))
    return 0


def cmd_fuse(args) -> int:
    if args.mode == "roi" and args.grid is not None:
        raise _UsageError("roi mode forbids --grid")
    grid = _parse_grid(args.grid) if args.grid else PatchGrid(16, 16)
    data = Path(args.annotation).read_bytes()
    annotation = parse_annotation(data)
    config = GraphModuleConfig(
        mode=args.mode,
        graphs=args.graphs,
        textual_edges=args.textual_edges,
        grid=grid if args.mode == "patch" else None,
        dim=args.dim,
        e_dim=args.e_dim,
        dropout=0.0,
        distance_scale=args.distance_scale,
    )
    rng = make_rng(args.seed)
    if args.params:
        tensors, _meta = load_checkpoint(Path(args.params).read_text(encoding="utf-8"))
        params = GraphModuleParams.from_tensors(tensors, dropout=0.0)
    else:
        params = GraphModuleParams.init(rng, config)
    if args.states:
        tensors, _meta = load_checkpoint(Path(args.states).read_text(encoding="utf-8"))
        if "encoder_states" not in tensors:
            raise SchemaViolation("states file must contain an 'encoder_states' tensor")
        states = tensors["encoder_states"]
    else:
        encoder = PseudoEncoder(rng, grid, args.dim)
        if args.mode == "roi":
            states = encoder.encode_rois(annotation)
        else:
            states = encoder.encode_patches(annotation)
    ctx = prepare_graph_context(annotation, states, config)
    h_tilde, tape = forward_prepared(ctx, states, params)
    h_b = tape.h_b if tape.h_b is not None else np.zeros_like(states)
    out_text = save_checkpoint(
        {"h_b": h_b, "h_tilde": h_tilde},
        meta={
            "chart_id": annotation.chart_id,
            "mode": args.mode,
            "graphs": args.graphs,
            "textual_edges": args.textual_edges,
            "seed": args.seed,
            "dim": args.dim,
            "e_dim": args.e_dim,
        },
    )
    Path(args.out).write_text(out_text, encoding="utf-8")
    print(json.dumps({"out": args.out}, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.version:
            _print_versions()
            return 0
        if args.command is None:
            raise _UsageError("a command is required (see --help)")
        handler = {
            "build-graph": cmd_build_graph,
            "grad-check": cmd_grad_check,
            "train": cmd_train,
            "fuse": cmd_fuse,
        }[args.command]
        return handler(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MalformedInput, SchemaViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ChartGraphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
