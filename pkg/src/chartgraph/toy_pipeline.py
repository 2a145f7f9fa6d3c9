"""Desk-scale end-to-end exercise of the graph module.

Synthetic bar/line/pie annotations are generated with layout-plausible
geometry, paired with one extractive question ("value of <name>" or
"count of <shape>") over a closed vocabulary. A deterministic pseudo-encoder
replaces the vision backbone: each patch feature is a fixed seeded random
projection of the patch's object-class occupancy histogram, so encoder
states genuinely encode which objects occupy each patch. A teacher-forced
token classifier stands in for the text decoder; everything trains jointly
by plain SGD (or a decoupled-weight-decay variant) on the summed
negative log-likelihood of the answer tokens.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .chart_model import (
    BBox,
    ChartAnnotation,
    ChartObject,
    ObjectClass,
    parse_annotation,
    serialize_annotation,
)
from .errors import (
    DivergedLoss,
    IndexOutOfVocab,
    LengthMismatch,
    ShapeMismatch,
)
from .fusion import (
    GraphContext,
    GraphModuleConfig,
    GraphModuleParams,
    ROI_SLOTS,
    forward_prepared,
    graph_module_backward,
    prepare_graph_context,
    select_rois,
)
from .geometry import PatchGrid, patch_alignment
from .gnn import glorot_uniform, make_rng
from .textual_graph import HashedNgramEmbedder

DATASET_FORMAT_VERSION = "1"

CLASS_ORDER = tuple(ObjectClass)
_CLASS_INDEX = {cls: i for i, cls in enumerate(CLASS_ORDER)}

VALUE_TOKENS = tuple(str(v) for v in range(10, 101, 10))
COUNT_TOKENS = tuple(str(k) for k in range(1, 7))
CATEGORY_NAMES = ("c0", "c1", "c2", "c3", "c4")
SERIES_NAMES = ("s0", "s1", "s2", "s3", "s4")
PIE_NAMES = ("p0", "p1", "p2", "p3", "p4")
BOS_TOKEN = "<s>"


@dataclass(frozen=True)
class Vocabulary:
    """Closed token vocabulary shared by questions and answers."""

    tokens: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> tuple[int, ...]:
        index = _vocab_index(self.tokens)
        try:
            return tuple(index[w] for w in words)
        except KeyError as exc:
            raise IndexOutOfVocab(f"word {exc.args[0]!r} not in vocabulary") from exc

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        for t in ids:
            if not 0 <= t < self.size:
                raise IndexOutOfVocab(f"token id {t} outside vocabulary of size {self.size}")
        return tuple(self.tokens[t] for t in ids)


_VOCAB_INDEX_CACHE: dict[tuple[str, ...], dict[str, int]] = {}


def _vocab_index(tokens: tuple[str, ...]) -> dict[str, int]:
    cached = _VOCAB_INDEX_CACHE.get(tokens)
    if cached is None:
        cached = {w: i for i, w in enumerate(tokens)}
        _VOCAB_INDEX_CACHE[tokens] = cached
    return cached


def build_vocabulary() -> Vocabulary:
    tokens = (
        (BOS_TOKEN,)
        + VALUE_TOKENS
        + COUNT_TOKENS
        + CATEGORY_NAMES
        + SERIES_NAMES
        + PIE_NAMES
        + ("value", "count", "of", "bar", "line", "slice")
    )
    return Vocabulary(tokens=tokens)


VOCAB = build_vocabulary()
BOS_ID = 0


@dataclass(frozen=True)
class ChartSample:
    """One synthetic training unit: annotation, encoder states, QA pair."""

    annotation: ChartAnnotation
    patch_features: np.ndarray
    question_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.answer_tokens:
            raise ShapeMismatch("answer must be non-empty")
        for t in self.question_tokens + self.answer_tokens:
            if not 0 <= t < VOCAB.size:
                raise IndexOutOfVocab(f"token id {t} outside vocabulary of size {VOCAB.size}")


class PseudoEncoder:
    """Fixed seeded projection of per-patch class occupancy (shared per dataset).

    ROI features project one-hot class plus bbox coordinates per object.
    """

    def __init__(self, rng: np.random.Generator, grid: PatchGrid, dim: int):
        self.grid = grid
        self.dim = dim
        n_cls = len(CLASS_ORDER)
        self.patch_proj = rng.uniform(-1.0, 1.0, size=(n_cls, dim)) / math.sqrt(n_cls)
        self.roi_proj = rng.uniform(-1.0, 1.0, size=(n_cls + 4, dim)) / math.sqrt(n_cls + 4)

    def encode_patches(self, annotation: ChartAnnotation) -> np.ndarray:
        hist = np.zeros((self.grid.num_patches, len(CLASS_ORDER)), dtype=np.float64)
        for obj in annotation.objects:
            col = _CLASS_INDEX[obj.cls]
            for patch in patch_alignment(obj.bbox, self.grid):
                hist[patch, col] += 1.0
        return hist @ self.patch_proj

    def encode_rois(self, annotation: ChartAnnotation) -> np.ndarray:
        selection = select_rois(annotation.objects)
        by_id = {obj.id: obj for obj in annotation.objects}
        out = np.zeros((ROI_SLOTS, self.dim), dtype=np.float64)
        for slot, oid in enumerate(selection.kept_ids):
            obj = by_id[oid]
            feat = np.zeros(len(CLASS_ORDER) + 4, dtype=np.float64)
            feat[_CLASS_INDEX[obj.cls]] = 1.0
            feat[-4:] = obj.bbox.as_list()
            out[slot] = feat @ self.roi_proj
        return out


@dataclass(frozen=True)
class GeneratorSpec:
    chart_type: str  # "bar" | "line" | "pie"
    n_elements: int
    grid: PatchGrid


# Shared layout constants: plot area with axis bands around it.
_BASELINE = 0.85
_PLOT_TOP = 0.15
_SPAN = _BASELINE - _PLOT_TOP
_PLOT_X0 = 0.15
_PLOT_X1 = 0.95


def _value_to_y(value: float) -> float:
    return _BASELINE - value / 100.0 * _SPAN


class _Builder:
    def __init__(self) -> None:
        self.objects: list[ChartObject] = []

    def add(self, cls: ObjectClass, bbox: tuple[float, float, float, float],
            ocr: str | None = None, confidence: float = 0.9) -> int:
        oid = len(self.objects)
        x0, y0, x1, y1 = bbox
        clamped = BBox(
            min(max(x0, 0.0), 1.0), min(max(y0, 0.0), 1.0),
            min(max(x1, 0.0), 1.0), min(max(y1, 0.0), 1.0),
        )
        self.objects.append(
            ChartObject(id=oid, cls=cls, bbox=clamped, confidence=confidence, ocr_text=ocr)
        )
        return oid


def _add_frame(b: _Builder, rng: np.random.Generator, title: str) -> None:
    jx = rng.uniform(-0.02, 0.02)
    b.add(ObjectClass.CHART_TITLE, (0.30 + jx, 0.02, 0.70 + jx, 0.07), ocr=title)
    b.add(ObjectClass.X_AXIS_TITLE, (0.45, 0.94, 0.65, 0.985), ocr="category")
    b.add(ObjectClass.Y_AXIS_TITLE, (0.01, 0.40, 0.045, 0.60), ocr="value")
    for g in (0, 50, 100):
        yc = _value_to_y(g)
        b.add(ObjectClass.Y_AXIS_LABEL, (0.06, yc - 0.015, 0.125, yc + 0.015), ocr=str(g))


def _gen_bar(rng: np.random.Generator, k: int, b: _Builder) -> tuple[list[str], list[int]]:
    _add_frame(b, rng, "bars")
    names = [CATEGORY_NAMES[i] for i in rng.choice(len(CATEGORY_NAMES), size=k, replace=False)]
    values = [int(rng.integers(1, 10)) * 10 for _ in range(k)]
    slot = (_PLOT_X1 - _PLOT_X0) / k
    for i in range(k):
        jitter = rng.uniform(-0.1, 0.1) * slot
        x0 = _PLOT_X0 + i * slot + 0.18 * slot + jitter
        x1 = _PLOT_X0 + (i + 1) * slot - 0.18 * slot + jitter
        top = _value_to_y(values[i])
        b.add(ObjectClass.BAR, (x0, top, x1, _BASELINE))
        pad = 0.12 * (x1 - x0)
        b.add(ObjectClass.X_AXIS_LABEL, (x0 + pad, 0.865, x1 - pad, 0.92), ocr=names[i])
    return names, values


def _gen_line(rng: np.random.Generator, k: int, b: _Builder) -> tuple[list[str], list[int]]:
    _add_frame(b, rng, "lines")
    for t, xc in enumerate((0.25, 0.48, 0.70)):
        b.add(ObjectClass.X_AXIS_LABEL, (xc - 0.04, 0.865, xc + 0.04, 0.92), ocr=f"t{t}")
    names = [SERIES_NAMES[i] for i in rng.choice(len(SERIES_NAMES), size=k, replace=False)]
    values = [int(VALUE_TOKENS[i]) for i in rng.choice(9, size=k, replace=False)]
    for i in range(k):
        yc = _value_to_y(values[i]) + rng.uniform(-0.005, 0.005)
        b.add(ObjectClass.LINE, (_PLOT_X0, yc - 0.015, 0.78, yc + 0.015))
        row_y = 0.15 + i * 0.08
        b.add(ObjectClass.LEGEND_MARKER, (0.84, row_y, 0.86, row_y + 0.02))
        b.add(ObjectClass.LEGEND_LABEL, (0.87, row_y, 0.97, row_y + 0.02), ocr=names[i])
    return names, values


def _pie_shares(rng: np.random.Generator, k: int) -> list[int]:
    if k == 1:
        return [100]
    if k == 2:
        v = int(rng.integers(1, 10)) * 10
        return [v, 100 - v]
    shares = []
    remaining = 100
    for i in range(k - 1):
        # leave at least 10 for each slice still to come
        hi = remaining - 10 * (k - 1 - i)
        v = int(rng.integers(1, hi // 10)) * 10
        shares.append(v)
        remaining -= v
    shares.append(remaining)
    return shares


def _gen_pie(rng: np.random.Generator, k: int, b: _Builder) -> tuple[list[str], list[int]]:
    jx = rng.uniform(-0.02, 0.02)
    b.add(ObjectClass.CHART_TITLE, (0.30 + jx, 0.02, 0.70 + jx, 0.07), ocr="shares")
    cx, cy, radius = 0.5, 0.52, 0.26
    b.add(ObjectClass.PIE, (cx - radius - 0.02, cy - radius - 0.02,
                            cx + radius + 0.02, cy + radius + 0.02))
    names = [PIE_NAMES[i] for i in rng.choice(len(PIE_NAMES), size=k, replace=False)]
    shares = _pie_shares(rng, k)
    start = rng.uniform(0.0, 2.0 * math.pi)
    labels = []
    for i in range(k):
        extent = shares[i] / 100.0 * 2.0 * math.pi
        angles = np.linspace(start, start + extent, max(3, int(extent / 0.05) + 2))
        xs = cx + radius * np.cos(angles)
        ys = cy + radius * np.sin(angles)
        b.add(
            ObjectClass.PIE_SLICE,
            (min(xs.min(), cx), min(ys.min(), cy), max(xs.max(), cx), max(ys.max(), cy)),
        )
        mid = start + 0.5 * extent
        px = cx + (radius + 0.07) * math.cos(mid)
        py = cy + (radius + 0.07) * math.sin(mid)
        labels.append((px, py, names[i]))
        start += extent
    for px, py, name in labels:
        b.add(ObjectClass.PIE_LABEL, (px - 0.045, py - 0.018, px + 0.045, py + 0.018), ocr=name)
    return names, shares


_GENERATORS = {"bar": _gen_bar, "line": _gen_line, "pie": _gen_pie}
_SHAPE_WORD = {"bar": "bar", "line": "line", "pie": "slice"}


def generate_synthetic_chart(
    rng: np.random.Generator,
    spec: GeneratorSpec,
    encoder: PseudoEncoder,
    chart_id: str = "synthetic",
    mode: str = "patch",
) -> ChartSample:
    """One layout-plausible annotation plus pseudo encoder states and a QA pair."""
    if spec.chart_type not in _GENERATORS:
        raise ValueError(f"unknown chart type {spec.chart_type!r}")
    if spec.n_elements < 1:
        raise ValueError("n_elements must be >= 1")
    if spec.n_elements > len(COUNT_TOKENS):
        raise ValueError(f"n_elements must be <= {len(COUNT_TOKENS)}")
    builder = _Builder()
    names, values = _GENERATORS[spec.chart_type](rng, spec.n_elements, builder)
    annotation = ChartAnnotation(
        chart_id=chart_id, objects=tuple(builder.objects), image_size=(640, 480)
    )
    if rng.random() < 0.5:
        target = int(rng.integers(0, spec.n_elements))
        question = ("value", "of", names[target])
        answer = (str(values[target]),)
    else:
        question = ("count", "of", _SHAPE_WORD[spec.chart_type])
        answer = (str(spec.n_elements),)
    if mode == "roi":
        features = encoder.encode_rois(annotation)
    else:
        features = encoder.encode_patches(annotation)
    return ChartSample(
        annotation=annotation,
        patch_features=features,
        question_tokens=VOCAB.encode(question),
        answer_tokens=VOCAB.encode(answer),
    )


def sample_to_record(sample: ChartSample) -> dict:
    return {
        "annotation": json.loads(serialize_annotation(sample.annotation)),
        "features": {
            "shape": list(sample.patch_features.shape),
            "data": sample.patch_features.ravel().tolist(),
        },
        "question_tokens": list(sample.question_tokens),
        "answer_tokens": list(sample.answer_tokens),
    }


def sample_from_record(record: dict) -> ChartSample:
    features = np.asarray(record["features"]["data"], dtype=np.float64).reshape(
        record["features"]["shape"]
    )
    return ChartSample(
        annotation=parse_annotation(json.dumps(record["annotation"])),
        patch_features=features,
        question_tokens=tuple(record["question_tokens"]),
        answer_tokens=tuple(record["answer_tokens"]),
    )


def save_dataset(path, samples: Sequence[ChartSample], seed: int, config_hash: str) -> None:
    """One JSON record per line, after a header declaring seed and config hash."""
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "dataset",
        "seed": seed,
        "config_hash": config_hash,
        "num_samples": len(samples),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in samples:
            fh.write(json.dumps(sample_to_record(sample), sort_keys=True) + "\n")


def load_dataset(path) -> tuple[list[ChartSample], dict]:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        samples = [sample_from_record(json.loads(line)) for line in fh if line.strip()]
    return samples, header


@dataclass
class DecoderParams:
    """Token-classifier decoder: pooled states + question mean + previous token."""

    embed: np.ndarray  # vocab x embed_dim
    w_h: np.ndarray
    b_h: np.ndarray
    w_o: np.ndarray
    b_o: np.ndarray

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        vocab_size: int,
        embed_dim: int,
        state_dim: int,
        hidden_dim: int,
    ) -> "DecoderParams":
        in_dim = state_dim + 2 * embed_dim
        return cls(
            embed=glorot_uniform(rng, vocab_size, embed_dim),
            w_h=glorot_uniform(rng, in_dim, hidden_dim),
            b_h=np.zeros(hidden_dim),
            w_o=glorot_uniform(rng, hidden_dim, vocab_size),
            b_o=np.zeros(vocab_size),
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "decoder.embed": self.embed,
            "decoder.w_h": self.w_h,
            "decoder.b_h": self.b_h,
            "decoder.w_o": self.w_o,
            "decoder.b_o": self.b_o,
        }

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.tensors().items()}


@dataclass
class DecoderTape:
    z: np.ndarray
    hid: np.ndarray
    question: tuple[int, ...]
    prev_ids: tuple[int, ...]
    num_states: int
    params: DecoderParams


def _check_tokens(tokens: Sequence[int], vocab_size: int) -> None:
    for t in tokens:
        if not 0 <= t < vocab_size:
            raise IndexOutOfVocab(f"token id {t} outside vocabulary of size {vocab_size}")


def _decoder_logits(
    h_states: np.ndarray,
    question: tuple[int, ...],
    prev_ids: tuple[int, ...],
    params: DecoderParams,
) -> tuple[np.ndarray, DecoderTape]:
    vocab_size, embed_dim = params.embed.shape
    _check_tokens(question, vocab_size)
    _check_tokens(prev_ids, vocab_size)
    state_dim = h_states.shape[1]
    if params.w_h.shape[0] != state_dim + 2 * embed_dim:
        raise ShapeMismatch(
            f"decoder w_h expects input {params.w_h.shape[0]}, "
            f"got state {state_dim} + 2x{embed_dim}"
        )
    pooled = h_states.mean(axis=0)
    q_emb = params.embed[list(question)].mean(axis=0)
    prev = params.embed[list(prev_ids)]
    length = len(prev_ids)
    z = np.concatenate(
        [np.tile(pooled, (length, 1)), np.tile(q_emb, (length, 1)), prev], axis=1
    )
    hid = np.maximum(z @ params.w_h + params.b_h, 0.0)
    logits = hid @ params.w_o + params.b_o
    tape = DecoderTape(
        z=z, hid=hid, question=tuple(question), prev_ids=tuple(prev_ids),
        num_states=h_states.shape[0], params=params,
    )
    return logits, tape


def decoder_forward(
    h_states: np.ndarray,
    question_tokens: Sequence[int],
    answer_tokens: Sequence[int],
    params: DecoderParams,
) -> tuple[np.ndarray, DecoderTape]:
    """Teacher-forced logits for every answer position, shape (len(answer) x V)."""
    h_states = np.asarray(h_states, dtype=np.float64)
    if h_states.ndim != 2:
        raise ShapeMismatch(f"decoder states must be 2-D, got {h_states.shape}")
    prev_ids = (BOS_ID,) + tuple(answer_tokens[:-1])
    return _decoder_logits(h_states, tuple(question_tokens), prev_ids, params)


def decoder_backward(
    tape: DecoderTape, d_logits: np.ndarray
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Gradients wrt the fused encoder states and all decoder parameters."""
    params = tape.params
    grads = params.zero_grads()
    d_logits = np.asarray(d_logits, dtype=np.float64)
    grads["decoder.w_o"] = tape.hid.T @ d_logits
    grads["decoder.b_o"] = d_logits.sum(axis=0)
    d_hid = d_logits @ params.w_o.T
    d_z = d_hid * (tape.hid > 0.0)
    grads["decoder.w_h"] = tape.z.T @ d_z
    grads["decoder.b_h"] = d_z.sum(axis=0)
    d_back = d_z @ params.w_h.T
    embed_dim = params.embed.shape[1]
    state_dim = d_back.shape[1] - 2 * embed_dim
    d_pooled = d_back[:, :state_dim].sum(axis=0)
    d_q = d_back[:, state_dim : state_dim + embed_dim].sum(axis=0)
    d_prev = d_back[:, state_dim + embed_dim :]
    d_states = np.tile(d_pooled / tape.num_states, (tape.num_states, 1))
    d_embed = grads["decoder.embed"]
    q_rows = np.asarray(tape.question, dtype=np.intp)
    np.add.at(d_embed, q_rows, np.tile(d_q / len(tape.question), (len(tape.question), 1)))
    np.add.at(d_embed, np.asarray(tape.prev_ids, dtype=np.intp), d_prev)
    return d_states, grads


def nll_loss(logits: np.ndarray, answer_tokens: Sequence[int]) -> float:
    """Summed negative log-likelihood of the answer under per-position softmax."""
    logits = np.asarray(logits, dtype=np.float64)
    tokens = tuple(answer_tokens)
    if logits.ndim != 2 or logits.shape[0] != len(tokens):
        raise ShapeMismatch(f"logits {logits.shape} do not match answer length {len(tokens)}")
    _check_tokens(tokens, logits.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(tokens))
    return float((lse - shifted[rows, list(tokens)]).sum())


def nll_loss_backward(logits: np.ndarray, answer_tokens: Sequence[int]) -> np.ndarray:
    """d loss / d logits = softmax - one_hot(answer)."""
    logits = np.asarray(logits, dtype=np.float64)
    tokens = tuple(answer_tokens)
    _check_tokens(tokens, logits.shape[1])
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    probs[np.arange(len(tokens)), list(tokens)] -= 1.0
    return probs


def greedy_decode(
    h_states: np.ndarray,
    question_tokens: Sequence[int],
    length: int,
    params: DecoderParams,
) -> tuple[int, ...]:
    """Autoregressive argmax decode of ``length`` tokens."""
    h_states = np.asarray(h_states, dtype=np.float64)
    out: list[int] = []
    prev = BOS_ID
    for _ in range(length):
        logits, _ = _decoder_logits(h_states, tuple(question_tokens), (prev,), params)
        prev = int(np.argmax(logits[0]))
        out.append(prev)
    return tuple(out)


def relaxed_accuracy(predictions: Sequence[str], golds: Sequence[str]) -> float:
    """Exact match for text answers; 5% relative tolerance for numeric ones."""
    if len(predictions) != len(golds):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(golds)} golds")
    if not golds:
        return 0.0
    correct = 0
    for pred, gold in zip(predictions, golds):
        pred_s = pred.strip()
        gold_s = gold.strip()
        try:
            gold_num = float(gold_s)
        except ValueError:
            correct += pred_s == gold_s
            continue
        try:
            pred_num = float(pred_s)
        except ValueError:
            continue
        if gold_num == 0.0:
            correct += pred_num == 0.0
        else:
            correct += abs(pred_num - gold_num) <= 0.05 * abs(gold_num)
    return correct / len(golds)


@dataclass(frozen=True)
class TrainConfig:
    """Toy training configuration; defaults are the desk-scale smoke setup."""

    seed: int = 42
    train_size: int = 500
    test_size: int = 200
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 8
    optimizer: str = "sgd"  # "sgd" | "adamw"
    weight_decay: float = 0.0
    mode: str = "patch"
    graphs: str = "both"
    textual_edges: str = "rules"
    grid_rows: int = 8
    grid_cols: int = 8
    dim: int = 32
    e_dim: int = 64
    embed_dim: int = 16
    decoder_hidden: int = 64
    dropout: float = 0.2
    distance_scale: float = 1.0
    chart_types: tuple[str, ...] = ("bar", "line", "pie")
    max_elements: int = 3

    def __post_init__(self) -> None:
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be sgd or adamw, got {self.optimizer!r}")
        if self.mode not in ("patch", "roi"):
            raise ValueError(f"mode must be patch or roi, got {self.mode!r}")
        if self.graphs not in ("both", "visual-only", "textual-only", "none"):
            raise ValueError(f"unknown graphs setting {self.graphs!r}")
        if self.textual_edges not in ("rules", "fully-connected"):
            raise ValueError(f"unknown textual_edges setting {self.textual_edges!r}")
        if self.epochs < 0 or self.train_size < 1 or self.test_size < 0:
            raise ValueError("sizes/epochs out of range")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.chart_types or any(t not in _GENERATORS for t in self.chart_types):
            raise ValueError(f"chart_types must be drawn from {sorted(_GENERATORS)}")
        if not 1 <= self.max_elements <= len(COUNT_TOKENS):
            raise ValueError(f"max_elements must be in [1, {len(COUNT_TOKENS)}]")

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["chart_types"] = list(self.chart_types)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "chart_types" in doc:
            doc = dict(doc)
            doc["chart_types"] = tuple(doc["chart_types"])
        return cls(**doc)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


@dataclass
class TrainReport:
    """Outcome of one training run; epoch_mean_nll[e] is the eval-mode mean
    train-set NLL after e epochs (entry 0 is the pre-training baseline)."""

    seed: int
    config: dict
    config_hash: str
    initial_nll: float
    epoch_mean_nll: list[float]
    final_nll: float
    relaxed_accuracy: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "initial_nll": self.initial_nll,
            "epoch_mean_nll": self.epoch_mean_nll,
            "final_nll": self.final_nll,
            "relaxed_accuracy": self.relaxed_accuracy,
        }


def make_dataset(
    rng: np.random.Generator,
    config: TrainConfig,
    encoder: PseudoEncoder,
    count: int,
    tag: str,
) -> list[ChartSample]:
    samples = []
    for i in range(count):
        chart_type = config.chart_types[int(rng.integers(0, len(config.chart_types)))]
        k = int(rng.integers(1, config.max_elements + 1))
        spec = GeneratorSpec(chart_type=chart_type, n_elements=k, grid=encoder.grid)
        samples.append(
            generate_synthetic_chart(
                rng, spec, encoder, chart_id=f"{tag}-{i}-{chart_type}", mode=config.mode
            )
        )
    return samples


def _graph_module_config(config: TrainConfig) -> GraphModuleConfig:
    return GraphModuleConfig(
        mode=config.mode,
        graphs=config.graphs,
        textual_edges=config.textual_edges,
        grid=PatchGrid(config.grid_rows, config.grid_cols) if config.mode == "patch" else None,
        dim=config.dim,
        e_dim=config.e_dim,
        dropout=config.dropout,
        distance_scale=config.distance_scale,
    )


@dataclass
class _Model:
    gm_config: GraphModuleConfig
    gm_params: GraphModuleParams
    dec_params: DecoderParams

    def tensors(self) -> dict[str, np.ndarray]:
        return {**self.gm_params.tensors(), **self.dec_params.tensors()}


def _sample_loss(
    model: _Model,
    sample: ChartSample,
    ctx: GraphContext,
    train: bool,
    rng: np.random.Generator | None,
) -> tuple[float, dict[str, np.ndarray] | None]:
    h_tilde, g_tape = forward_prepared(
        ctx, sample.patch_features, model.gm_params, train=train, rng=rng
    )
    logits, d_tape = decoder_forward(
        h_tilde, sample.question_tokens, sample.answer_tokens, model.dec_params
    )
    loss = nll_loss(logits, sample.answer_tokens)
    if not train:
        return loss, None
    d_logits = nll_loss_backward(logits, sample.answer_tokens)
    d_states, dec_grads = decoder_backward(d_tape, d_logits)
    _, gm_grads = graph_module_backward(g_tape, d_states)
    return loss, {**gm_grads, **dec_grads}


def _eval_mean_nll(model: _Model, samples: Sequence[ChartSample], contexts) -> float:
    total = 0.0
    for sample, ctx in zip(samples, contexts):
        loss, _ = _sample_loss(model, sample, ctx, train=False, rng=None)
        total += loss
    return total / len(samples)


def _evaluate_accuracy(model: _Model, samples: Sequence[ChartSample], contexts) -> float:
    predictions = []
    golds = []
    for sample, ctx in zip(samples, contexts):
        h_tilde, _ = forward_prepared(ctx, sample.patch_features, model.gm_params, train=False)
        decoded = greedy_decode(
            h_tilde, sample.question_tokens, len(sample.answer_tokens), model.dec_params
        )
        predictions.append(" ".join(VOCAB.decode(decoded)))
        golds.append(" ".join(VOCAB.decode(sample.answer_tokens)))
    return relaxed_accuracy(predictions, golds)


class _AdamW:
    def __init__(self, tensors: dict[str, np.ndarray], lr: float, weight_decay: float):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, arr in tensors.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            arr -= self.lr * (update + self.weight_decay * arr)


def build_model(config: TrainConfig, rng: np.random.Generator) -> _Model:
    gm_config = _graph_module_config(config)
    gm_params = GraphModuleParams.init(rng, gm_config)
    dec_params = DecoderParams.init(
        rng, VOCAB.size, config.embed_dim, config.dim, config.decoder_hidden
    )
    return _Model(gm_config=gm_config, gm_params=gm_params, dec_params=dec_params)


def train(config: TrainConfig) -> TrainReport:
    """Seeded data generation, joint gradient training, relaxed-accuracy eval."""
    ss = np.random.SeedSequence(config.seed)
    s_encoder, s_train, s_test, s_params, s_dropout, s_shuffle = ss.spawn(6)
    grid = PatchGrid(config.grid_rows, config.grid_cols)
    encoder = PseudoEncoder(make_rng(s_encoder), grid, config.dim)
    train_samples = make_dataset(make_rng(s_train), config, encoder, config.train_size, "train")
    test_samples = make_dataset(make_rng(s_test), config, encoder, config.test_size, "test")

    model = build_model(config, make_rng(s_params))
    embedder = HashedNgramEmbedder(config.e_dim)
    train_ctx = [
        prepare_graph_context(s.annotation, s.patch_features, model.gm_config, embedder)
        for s in train_samples
    ]
    test_ctx = [
        prepare_graph_context(s.annotation, s.patch_features, model.gm_config, embedder)
        for s in test_samples
    ]

    tensors = model.tensors()
    drop_rng = make_rng(s_dropout)
    shuffle_rng = make_rng(s_shuffle)
    adamw = (
        _AdamW(tensors, config.lr, config.weight_decay) if config.optimizer == "adamw" else None
    )

    losses = [_eval_mean_nll(model, train_samples, train_ctx)]
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(config.train_size)
        for start in range(0, config.train_size, config.batch_size):
            batch = order[start : start + config.batch_size]
            accum = {name: np.zeros_like(arr) for name, arr in tensors.items()}
            for idx in batch:
                loss, grads = _sample_loss(
                    model, train_samples[idx], train_ctx[idx], train=True, rng=drop_rng
                )
                if not math.isfinite(loss):
                    raise DivergedLoss(
                        f"non-finite loss at epoch {epoch + 1}, sample {int(idx)}"
                    )
                for name in accum:
                    accum[name] += grads[name]
            scale = 1.0 / len(batch)
            if adamw is not None:
                adamw.step(tensors, {name: g * scale for name, g in accum.items()})
            else:
                for name, arr in tensors.items():
                    arr -= config.lr * scale * accum[name]
                    if config.weight_decay > 0.0:
                        arr -= config.lr * config.weight_decay * arr
        epoch_nll = _eval_mean_nll(model, train_samples, train_ctx)
        if not math.isfinite(epoch_nll):
            raise DivergedLoss(f"non-finite eval loss after epoch {epoch + 1}")
        losses.append(epoch_nll)

    accuracy = _evaluate_accuracy(model, test_samples, test_ctx) if test_samples else 0.0
    return TrainReport(
        seed=config.seed,
        config=config.to_dict(),
        config_hash=config_hash(config),
        initial_nll=losses[0],
        epoch_mean_nll=losses,
        final_nll=losses[-1],
        relaxed_accuracy=accuracy,
    )
