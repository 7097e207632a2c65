"""A small reverse-mode autodiff engine and the graph network built on it.

Tensors wrap float64 ndarrays and record the backward closure of the
operation that produced them; backward() runs the closures in reverse
topological order.  The op set is exactly what the model needs: dense
matmul, broadcast add/mul, gather, ELU, tanh, mean, and multiplication by
a constant sparse matrix (the graph propagation step, which never needs a
gradient of its own).

Model layers:

  gcn_conv     H' = A_hat H W^T with A_hat = D~^{-1/2} (A + I) D~^{-1/2}
  graph_conv   h'_i = W1 h_i + W2 sum_{j in N(i)} h_j + b
  sag_mean     gate nodes by a one-channel gcn score, keep the top
               ceil(ratio * n) per graph, mean the kept rows
  global_mean  mean over all of a graph's rows

The top-k selection inside SAG pooling is treated as a constant during
backpropagation: gradients flow through the kept rows and the gate values
but not through the ranking itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil, sqrt
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .core import (
    NoRecordedForward,
    ShapeMismatch,
    ValidationError,
)

OPERATORS = ("gcn", "graphconv")
POOLINGS = ("sag_mean", "global_mean")


class Tensor:
    """An ndarray plus the backward closure that fills its parents' grads."""

    __slots__ = ("data", "grad", "_backward", "_parents")

    def __init__(self, data, parents: tuple["Tensor", ...] = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._backward = None
        self._parents = parents

    @property
    def shape(self):
        return self.data.shape

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape})"


def constant(data) -> Tensor:
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, (a, b))

    def backward():
        a.add_grad(_unbroadcast(out.grad, a.data.shape))
        b.add_grad(_unbroadcast(out.grad, b.data.shape))
    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, (a, b))

    def backward():
        a.add_grad(_unbroadcast(out.grad, a.data.shape))
        b.add_grad(_unbroadcast(-out.grad, b.data.shape))
    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, (a, b))

    def backward():
        a.add_grad(_unbroadcast(out.grad * b.data, a.data.shape))
        b.add_grad(_unbroadcast(out.grad * a.data, b.data.shape))
    out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 \
            or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch(
            f"matmul {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, (a, b))

    def backward():
        a.add_grad(out.grad @ b.data.T)
        b.add_grad(a.data.T @ out.grad)
    out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T, (a,))

    def backward():
        a.add_grad(out.grad.T)
    out._backward = backward
    return out


def propagate(matrix, h: Tensor) -> Tensor:
    """Multiply by a constant (sparse) matrix: out = S h, grad = S^T g."""
    if matrix.shape[1] != h.data.shape[0]:
        raise ShapeMismatch(
            f"propagation {matrix.shape} against features {h.data.shape}")
    out = Tensor(matrix @ h.data, (h,))
    matrix_t = matrix.T.tocsr() if sp.issparse(matrix) else matrix.T

    def backward():
        h.add_grad(matrix_t @ out.grad)
    out._backward = backward
    return out


def gather_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    out = Tensor(a.data[rows], (a,))

    def backward():
        g = np.zeros_like(a.data)
        np.add.at(g, rows, out.grad)
        a.add_grad(g)
    out._backward = backward
    return out


def elu(a: Tensor) -> Tensor:
    neg = np.expm1(np.minimum(a.data, 0.0))
    out = Tensor(np.where(a.data > 0.0, a.data, neg), (a,))

    def backward():
        local = np.where(a.data > 0.0, 1.0, neg + 1.0)
        a.add_grad(out.grad * local)
    out._backward = backward
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t, (a,))

    def backward():
        a.add_grad(out.grad * (1.0 - t * t))
    out._backward = backward
    return out


def mean_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.mean(), (a,))

    def backward():
        a.add_grad(np.full_like(a.data, float(out.grad) / a.data.size))
    out._backward = backward
    return out


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.data.shape != target.data.shape:
        raise ShapeMismatch(
            f"mse over {pred.data.shape} vs {target.data.shape}")
    d = sub(pred, target)
    return mean_all(mul(d, d))


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss."""
    if loss.data.size != 1:
        raise ShapeMismatch("backward starts from a scalar")
    if loss._backward is None and not loss._parents:
        raise NoRecordedForward("tensor has no recorded forward pass")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()


# ---------------------------------------------------------------------------
# propagation matrices

def adj_matrix(n_nodes: int, edges: np.ndarray) -> sp.csr_matrix:
    """Symmetric binary adjacency (no self loops)."""
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size:
        rows = np.concatenate([edges[:, 0], edges[:, 1]])
        cols = np.concatenate([edges[:, 1], edges[:, 0]])
        data = np.ones(rows.size, dtype=np.float64)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        data = np.zeros(0, dtype=np.float64)
    return sp.coo_matrix((data, (rows, cols)),
                         shape=(n_nodes, n_nodes)).tocsr()


def gcn_matrix(n_nodes: int, edges: np.ndarray) -> sp.csr_matrix:
    """Symmetrically normalized adjacency with self loops."""
    a = adj_matrix(n_nodes, edges) + sp.eye(n_nodes, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    return (d @ a @ d).tocsr()


# ---------------------------------------------------------------------------
# layers

def linear(h: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """h [n, in] times weight [out, in] transposed, plus bias [out]."""
    if weight.data.ndim != 2 or h.data.shape[1] != weight.data.shape[1]:
        raise ShapeMismatch(
            f"linear {h.data.shape} with weight {weight.data.shape}")
    out = matmul(h, transpose(weight))
    if bias is not None:
        if bias.data.shape != (weight.data.shape[0],):
            raise ShapeMismatch(
                f"bias {bias.data.shape} for weight {weight.data.shape}")
        out = add(out, bias)
    return out


def gcn_conv(h: Tensor, prop: sp.csr_matrix, weight: Tensor) -> Tensor:
    return matmul(propagate(prop, h), transpose(weight))


def graph_conv(h: Tensor, adj: sp.csr_matrix, w_self: Tensor,
               w_neigh: Tensor, bias: Tensor) -> Tensor:
    own = matmul(h, transpose(w_self))
    agg = matmul(propagate(adj, h), transpose(w_neigh))
    return add(add(own, agg), bias)


def global_mean_readout(h: Tensor, slices: Sequence[tuple[int, int]]
                        ) -> Tensor:
    rows, cols, vals = [], [], []
    for g, (s, e) in enumerate(slices):
        if e <= s:
            raise ValidationError(f"empty graph {g} in batch")
        for k in range(s, e):
            rows.append(g)
            cols.append(k)
            vals.append(1.0 / (e - s))
    pool = sp.coo_matrix((vals, (rows, cols)),
                         shape=(len(slices), h.data.shape[0])).tocsr()
    return propagate(pool, h)


def sag_mean_readout(h: Tensor, score_prop: sp.csr_matrix, score_w: Tensor,
                     ratio: float, slices: Sequence[tuple[int, int]]
                     ) -> Tensor:
    """Gated top-k mean per graph.

    Scores come from a one-channel gcn over the same node features; the
    top ceil(ratio * n) rows per graph (stable order, ties keep the lower
    index) are gated by tanh(score) and averaged.
    """
    if score_w.data.shape != (1, h.data.shape[1]):
        raise ShapeMismatch(
            f"score weight {score_w.data.shape} for features "
            f"{h.data.shape}")
    score = gcn_conv(h, score_prop, score_w)  # [n, 1]

    kept: list[int] = []
    counts: list[int] = []
    for s, e in slices:
        n = e - s
        if n <= 0:
            raise ValidationError("empty graph in batch")
        k = ceil(ratio * n)
        order = np.argsort(-score.data[s:e, 0], kind="stable")
        chosen = np.sort(order[:k]) + s
        kept.extend(int(c) for c in chosen)
        counts.append(k)

    rows_idx = np.array(kept, dtype=np.int64)
    gated = mul(gather_rows(h, rows_idx), tanh(gather_rows(score, rows_idx)))

    rows, cols, vals = [], [], []
    pos = 0
    for g, k in enumerate(counts):
        for _ in range(k):
            rows.append(g)
            cols.append(pos)
            vals.append(1.0 / k)
            pos += 1
    pool = sp.coo_matrix((vals, (rows, cols)),
                         shape=(len(counts), rows_idx.size)).tocsr()
    return propagate(pool, gated)


# ---------------------------------------------------------------------------
# the spatial correction model

@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the spatial correction network."""

    in_width: int
    n_genes: int
    pre_widths: tuple[int, ...] = ()
    operator: str = "graphconv"
    gnn_widths: tuple[int, ...] = (256,)
    pooling: str = "sag_mean"
    sag_ratio: float = 0.5
    post_widths: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "pre_widths", tuple(self.pre_widths))
        object.__setattr__(self, "gnn_widths", tuple(self.gnn_widths))
        object.__setattr__(self, "post_widths", tuple(self.post_widths))
        if self.operator not in OPERATORS:
            raise ValidationError(f"unknown operator {self.operator!r}")
        if self.pooling not in POOLINGS:
            raise ValidationError(f"unknown pooling {self.pooling!r}")
        if not 0.0 < self.sag_ratio <= 1.0:
            raise ValidationError(
                f"sag_ratio must lie in (0, 1], got {self.sag_ratio}")
        if self.in_width < 1 or self.n_genes < 1:
            raise ValidationError("widths must be positive")
        if not self.gnn_widths:
            raise ValidationError("at least one graph layer is required")
        for w in (*self.pre_widths, *self.gnn_widths, *self.post_widths):
            if w < 1:
                raise ValidationError(f"layer width {w} must be positive")
        out = self.post_widths[-1] if self.post_widths else self.gnn_widths[-1]
        if out != self.n_genes:
            raise ShapeMismatch(
                f"model emits {out} channels but {self.n_genes} genes are "
                f"expected")


@dataclass
class ModelState:
    """Parameter tensors for one ModelSpec, keyed by layer path."""

    spec: ModelSpec
    params: dict[str, Tensor]
    seed: int

    def param_items(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def clone_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.array(arrays[k], dtype=np.float64, copy=True)


def glorot(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    lim = sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_out, n_in))


def init_model_state(spec: ModelSpec, seed: int) -> ModelState:
    """Seeded init: glorot-uniform weights, zero biases, and a zeroed
    final layer so the correction starts exactly at zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    width = spec.in_width
    for i, w in enumerate(spec.pre_widths):
        params[f"pre.{i}.W"] = Tensor(glorot(rng, w, width))
        params[f"pre.{i}.b"] = Tensor(np.zeros(w))
        width = w
    for i, w in enumerate(spec.gnn_widths):
        if spec.operator == "gcn":
            params[f"gnn.{i}.W"] = Tensor(glorot(rng, w, width))
        else:
            params[f"gnn.{i}.W1"] = Tensor(glorot(rng, w, width))
            params[f"gnn.{i}.W2"] = Tensor(glorot(rng, w, width))
            params[f"gnn.{i}.b"] = Tensor(np.zeros(w))
        width = w
    if spec.pooling == "sag_mean":
        params["pool.score.W"] = Tensor(glorot(rng, 1, width))
    for i, w in enumerate(spec.post_widths):
        params[f"post.{i}.W"] = Tensor(glorot(rng, w, width))
        params[f"post.{i}.b"] = Tensor(np.zeros(w))
        width = w

    if spec.post_widths:
        last = len(spec.post_widths) - 1
        params[f"post.{last}.W"].data[:] = 0.0
        params[f"post.{last}.b"].data[:] = 0.0
    else:
        last = len(spec.gnn_widths) - 1
        for suffix in ("W", "W1", "W2", "b"):
            key = f"gnn.{last}.{suffix}"
            if key in params:
                params[key].data[:] = 0.0
    return ModelState(spec=spec, params=params, seed=seed)


@dataclass
class GraphBatch:
    """Disjoint union of local graphs for one forward pass."""

    features: np.ndarray
    edges: np.ndarray
    slices: tuple[tuple[int, int], ...]
    center_rows: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_graphs(self) -> int:
        return len(self.slices)

    @classmethod
    def from_graphs(cls, graphs: Sequence) -> "GraphBatch":
        if not graphs:
            raise ValidationError("empty graph batch")
        feats = []
        edges = []
        slices = []
        centers = []
        offset = 0
        for g in graphs:
            n = g.features.shape[0]
            feats.append(g.features)
            if g.edges.size:
                edges.append(g.edges + offset)
            slices.append((offset, offset + n))
            centers.append(offset)  # node 0 of every graph is its center
            offset += n
        all_edges = (np.concatenate(edges, axis=0) if edges
                     else np.zeros((0, 2), dtype=np.int64))
        return cls(
            features=np.concatenate(feats, axis=0),
            edges=all_edges,
            slices=tuple(slices),
            center_rows=np.array(centers, dtype=np.int64),
        )


def spatial_forward(state: ModelState, batch: GraphBatch) -> Tensor:
    """Run the correction network over a batch; returns [n_graphs, n_genes]."""
    spec = state.spec
    if batch.features.shape[1] != spec.in_width:
        raise ShapeMismatch(
            f"batch features {batch.features.shape} for in_width "
            f"{spec.in_width}")
    p = state.params
    h = constant(batch.features)
    for i in range(len(spec.pre_widths)):
        h = elu(linear(h, p[f"pre.{i}.W"], p[f"pre.{i}.b"]))

    if spec.operator == "gcn":
        prop = gcn_matrix(batch.n_nodes, batch.edges)
        for i in range(len(spec.gnn_widths)):
            h = elu(gcn_conv(h, prop, p[f"gnn.{i}.W"]))
    else:
        prop = adj_matrix(batch.n_nodes, batch.edges)
        for i in range(len(spec.gnn_widths)):
            h = elu(graph_conv(h, prop, p[f"gnn.{i}.W1"],
                               p[f"gnn.{i}.W2"], p[f"gnn.{i}.b"]))

    if spec.pooling == "sag_mean":
        score_prop = gcn_matrix(batch.n_nodes, batch.edges)
        r = sag_mean_readout(h, score_prop, p["pool.score.W"],
                             spec.sag_ratio, batch.slices)
    else:
        r = global_mean_readout(h, batch.slices)

    n_post = len(spec.post_widths)
    for i in range(n_post):
        r = linear(r, p[f"post.{i}.W"], p[f"post.{i}.b"])
        if i < n_post - 1:
            r = elu(r)
    return r
