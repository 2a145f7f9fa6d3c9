"""Dense numeric kernel: 2-layer GCN, projection MLP, manual backprop.

Propagation follows the symmetric-normalized rule over weighted adjacency
with unit self-loops: A_hat = D^{-1/2} (A + I) D^{-1/2}. Forward passes
record a tape of intermediates; backward passes replay it for exact
gradients (verified by central finite differences). Everything runs in
float64 so the gradient checker is reliable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch, TapeMismatch

CHECKPOINT_FORMAT_VERSION = "1"

RNG_ALGORITHM = "pcg64"  # numpy PCG64: portable, bit-exact stream per seed


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Seeded portable generator; same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class GraphLike(Protocol):
    """Structural view shared by visual and textual graphs."""

    @property
    def n(self) -> int: ...

    def weighted_edges(self) -> tuple[tuple[int, int, float], ...]: ...


@dataclass
class LinearParams:
    """Affine map x -> x @ w + b."""

    w: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int) -> "LinearParams":
        return cls(w=glorot_uniform(rng, in_dim, out_dim), b=np.zeros(out_dim))


@dataclass
class GcnParams:
    """Weights of the fixed 2-layer GCN; dropout applies between the layers."""

    w1: np.ndarray
    w2: np.ndarray
    dropout: float = 0.2

    def __post_init__(self) -> None:
        if self.w1.ndim != 2 or self.w2.ndim != 2 or self.w1.shape[1] != self.w2.shape[0]:
            raise ShapeMismatch(
                f"layer-1 out_dim must equal layer-2 in_dim, got {self.w1.shape} / {self.w2.shape}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        in_dim: int,
        hidden_dim: int,
        out_dim: int,
        dropout: float = 0.2,
    ) -> "GcnParams":
        return cls(
            w1=glorot_uniform(rng, in_dim, hidden_dim),
            w2=glorot_uniform(rng, hidden_dim, out_dim),
            dropout=dropout,
        )


@dataclass
class MlpParams:
    """Two affine layers with ReLU after the first."""

    w_a: np.ndarray
    b_a: np.ndarray
    w_b: np.ndarray
    b_b: np.ndarray

    @classmethod
    def init(
        cls, rng: np.random.Generator, in_dim: int, hidden_dim: int, out_dim: int
    ) -> "MlpParams":
        return cls(
            w_a=glorot_uniform(rng, in_dim, hidden_dim),
            b_a=np.zeros(hidden_dim),
            w_b=glorot_uniform(rng, hidden_dim, out_dim),
            b_b=np.zeros(out_dim),
        )


def normalized_adjacency(graph: GraphLike) -> np.ndarray:
    """Symmetric-normalized adjacency with unit self-loops.

    A_hat = D^{-1/2} (A + I) D^{-1/2} where D is the degree matrix of A + I.
    Exactly symmetric; an isolated node's row is its unit self-loop.
    """
    n = graph.n
    a = np.zeros((n, n), dtype=np.float64)
    for i, j, w in graph.weighted_edges():
        a[i, j] = w
        a[j, i] = w
    a += np.eye(n)
    scale = 1.0 / np.sqrt(a.sum(axis=1))
    # outer product first keeps A_hat bitwise symmetric
    return a * np.outer(scale, scale)


@dataclass
class GcnTape:
    """Intermediates of one gcn_forward call, replayed by gcn_backward."""

    a_hat: np.ndarray
    m1: np.ndarray  # A_hat @ X
    z1_dropped: np.ndarray  # pre-ReLU activation after dropout
    drop_scale: np.ndarray | None  # mask / (1 - p), None in eval mode
    a1: np.ndarray  # ReLU output
    m2: np.ndarray  # A_hat @ a1
    params: GcnParams
    x_shape: tuple[int, int]


def gcn_forward(
    a_hat: np.ndarray,
    x: np.ndarray,
    params: GcnParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, GcnTape]:
    """H = A_hat @ ReLU(dropout(A_hat @ X @ W1)) @ W2.

    Inverted dropout (kept units scaled by 1/(1-p)) runs only in train mode
    and requires an rng.
    """
    a_hat = np.asarray(a_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or a_hat.shape != (x.shape[0], x.shape[0]):
        raise ShapeMismatch(f"a_hat {a_hat.shape} does not match x {x.shape}")
    if x.shape[1] != params.w1.shape[0]:
        raise ShapeMismatch(f"x dim {x.shape[1]} does not match w1 {params.w1.shape}")
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput("gcn input features contain NaN or infinity")

    m1 = a_hat @ x
    z1 = m1 @ params.w1
    if train and params.dropout > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout requires an rng")
        keep = rng.random(z1.shape) >= params.dropout
        drop_scale = keep / (1.0 - params.dropout)
        z1_dropped = z1 * drop_scale
    else:
        drop_scale = None
        z1_dropped = z1
    a1 = np.maximum(z1_dropped, 0.0)
    m2 = a_hat @ a1
    h = m2 @ params.w2
    tape = GcnTape(
        a_hat=a_hat,
        m1=m1,
        z1_dropped=z1_dropped,
        drop_scale=drop_scale,
        a1=a1,
        m2=m2,
        params=params,
        x_shape=x.shape,
    )
    return h, tape


def gcn_backward(tape: GcnTape, d_h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients (d_x, d_w1, d_w2) under the recorded dropout mask."""
    d_h = np.asarray(d_h, dtype=np.float64)
    expected = (tape.x_shape[0], tape.params.w2.shape[1])
    if d_h.shape != expected:
        raise TapeMismatch(f"d_h shape {d_h.shape} does not match forward output {expected}")
    d_w2 = tape.m2.T @ d_h
    d_a1 = tape.a_hat.T @ (d_h @ tape.params.w2.T)
    d_z1 = d_a1 * (tape.z1_dropped > 0.0)
    if tape.drop_scale is not None:
        d_z1 = d_z1 * tape.drop_scale
    d_w1 = tape.m1.T @ d_z1
    d_x = tape.a_hat.T @ (d_z1 @ tape.params.w1.T)
    return d_x, d_w1, d_w2


@dataclass
class MlpTape:
    x: np.ndarray
    a: np.ndarray  # ReLU output of the first affine layer
    params: MlpParams


def mlp_project(x: np.ndarray, params: MlpParams) -> tuple[np.ndarray, MlpTape]:
    """H = ReLU(x @ W_a + b_a) @ W_b + b_b."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.w_a.shape[0]:
        raise ShapeMismatch(f"mlp input {x.shape} does not match w_a {params.w_a.shape}")
    a = np.maximum(x @ params.w_a + params.b_a, 0.0)
    y = a @ params.w_b + params.b_b
    return y, MlpTape(x=x, a=a, params=params)


def mlp_backward(
    tape: MlpTape, d_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_x, d_w_a, d_b_a, d_w_b, d_b_b)."""
    d_y = np.asarray(d_y, dtype=np.float64)
    expected = (tape.x.shape[0], tape.params.w_b.shape[1])
    if d_y.shape != expected:
        raise TapeMismatch(f"d_y shape {d_y.shape} does not match forward output {expected}")
    d_w_b = tape.a.T @ d_y
    d_b_b = d_y.sum(axis=0)
    d_a = d_y @ tape.params.w_b.T
    d_z = d_a * (tape.a > 0.0)
    d_w_a = tape.x.T @ d_z
    d_b_a = d_z.sum(axis=0)
    d_x = d_z @ tape.params.w_a.T
    return d_x, d_w_a, d_b_a, d_w_b, d_b_b


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    max_coords_per_tensor: int = 24,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` must be deterministic (eval mode or a fixed mask) and read the
    arrays in ``params``, which are perturbed in place one coordinate at a
    time. Error per coordinate: |analytic - fd| / max(1, |analytic|).
    """
    if rng is None:
        rng = make_rng(0)
    worst = 0.0
    for name, arr in params.items():
        grad = analytic[name]
        if grad.shape != arr.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {grad.shape}, want {arr.shape}")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        if flat.size <= max_coords_per_tensor:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + eps
            f_plus = loss_fn()
            flat[idx] = original - eps
            f_minus = loss_fn()
            flat[idx] = original
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[idx] - fd) / max(1.0, abs(gflat[idx]))
            worst = max(worst, err)
    return worst


def save_checkpoint(tensors: Mapping[str, np.ndarray], meta: Mapping) -> str:
    """Serialize named tensors with a structured header; round-trips bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": dict(meta),
        "tensors": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in tensors.items()
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def load_checkpoint(text: str | bytes) -> tuple[dict[str, np.ndarray], dict]:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    doc = json.loads(text)
    tensors = {
        name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["tensors"].items()
    }
    return tensors, doc.get("meta", {})
