"""Two-stage training: a linear head on embeddings, then a frozen-head
graph correction.

Stage 1 regresses delta targets (expression minus the train-split gene
mean) directly from patch embeddings with a single linear layer.  Stage 2
freezes that head and trains the graph network to predict what the head
misses; its output is added to the head's prediction, and a zero-
initialized final layer guarantees the combined model starts exactly at
the stage-1 solution.

Both stages use bias-corrected Adam, seeded shuffling, and early stopping
on validation MSE.  Validation is always evaluated with the same plain
numpy expression, so stage transitions compare like with like.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    DivergedLoss,
    EmptySplit,
    ShapeMismatch,
    ValidationError,
)
from . import nn
from .ingest import read_checkpoint, write_checkpoint
from .nn import GraphBatch, ModelSpec, ModelState, Tensor, glorot

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
EVAL_CHUNK = 256


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValidationError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch size must be >= 1")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValidationError("max_steps must be >= 1")


class Adam:
    """Bias-corrected Adam over a list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / (1.0 - b1 ** self.t)
            v_hat = self.v[i] / (1.0 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float | None
    val_mse: float | None
    wall_seconds: float


def linear_prediction(x: np.ndarray, weight: np.ndarray, bias: np.ndarray
                      ) -> np.ndarray:
    return x @ weight.T + bias


def _val_mse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.mean((pred - target) ** 2))


@dataclass
class Stage1Result:
    weight: np.ndarray
    bias: np.ndarray
    history: list[EpochRecord]
    best_val_mse: float | None
    n_steps: int


def stage1_train(x_train: np.ndarray, y_train: np.ndarray,
                 x_val: np.ndarray | None, y_val: np.ndarray | None,
                 config: TrainConfig) -> Stage1Result:
    """Fit the linear head on (embedding, delta-target) pairs."""
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    if x_train.ndim != 2 or y_train.ndim != 2 \
            or x_train.shape[0] != y_train.shape[0]:
        raise ShapeMismatch(
            f"stage 1 inputs {x_train.shape} vs targets {y_train.shape}")
    n, d = x_train.shape
    n_genes = y_train.shape[1]
    if n == 0 or n_genes == 0:
        raise EmptySplit("stage 1 needs a non-empty train split")
    has_val = x_val is not None and y_val is not None and len(x_val) > 0

    rng = np.random.default_rng(config.seed)
    weight = Tensor(glorot(rng, n_genes, d))
    bias = Tensor(np.zeros(n_genes))
    opt = Adam([weight, bias], config.learning_rate)

    history: list[EpochRecord] = []
    best_val: float | None = None
    best_arrays = (weight.data.copy(), bias.data.copy())
    bad_epochs = 0
    steps = 0
    t0 = time.monotonic()
    stop = False

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        sq_sum = 0.0
        for k in range(0, n, config.batch_size):
            idx = perm[k:k + config.batch_size]
            pred = nn.linear(nn.constant(x_train[idx]), weight, bias)
            loss = nn.mse(pred, nn.constant(y_train[idx]))
            if not np.isfinite(loss.data):
                raise DivergedLoss(f"stage 1 loss not finite at step {steps}")
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
            steps += 1
            sq_sum += float(loss.data) * len(idx)
            if config.max_steps is not None and steps >= config.max_steps:
                stop = True
                break
        train_mse = sq_sum / n
        val = None
        if has_val:
            val = _val_mse(linear_prediction(x_val, weight.data, bias.data),
                           y_val)
        history.append(EpochRecord(epoch, train_mse, val,
                                   time.monotonic() - t0))
        if has_val:
            if best_val is None or val < best_val:
                best_val = val
                best_arrays = (weight.data.copy(), bias.data.copy())
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break
        else:
            best_arrays = (weight.data.copy(), bias.data.copy())
        if stop:
            break
    return Stage1Result(weight=best_arrays[0], bias=best_arrays[1],
                        history=history, best_val_mse=best_val,
                        n_steps=steps)


def spatial_predict(state: ModelState, graphs: Sequence,
                    chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Forward every graph in fixed-size chunks; no gradients recorded."""
    if not graphs:
        raise EmptySplit("no graphs to predict on")
    outs = []
    for k in range(0, len(graphs), chunk):
        batch = GraphBatch.from_graphs(graphs[k:k + chunk])
        outs.append(nn.spatial_forward(state, batch).data)
    return np.concatenate(outs, axis=0)


@dataclass
class Stage2Result:
    state: ModelState
    history: list[EpochRecord]
    initial_val_mse: float | None
    best_val_mse: float | None
    n_steps: int


def stage2_train(train_graphs: Sequence, delta_hat_train: np.ndarray,
                 target_train: np.ndarray,
                 val_graphs: Sequence | None,
                 delta_hat_val: np.ndarray | None,
                 target_val: np.ndarray | None,
                 spec: ModelSpec, config: TrainConfig) -> Stage2Result:
    """Train the graph correction on top of frozen head predictions.

    delta_hat_* are the stage-1 head outputs for the same spots; the
    optimized loss is mse(correction + delta_hat, target).  Epoch 0 of
    the history records the untouched model, whose correction is exactly
    zero, so its validation MSE is the stage-1 value.
    """
    if len(train_graphs) == 0:
        raise EmptySplit("stage 2 needs a non-empty train split")
    delta_hat_train = np.asarray(delta_hat_train, dtype=np.float64)
    target_train = np.asarray(target_train, dtype=np.float64)
    if delta_hat_train.shape != target_train.shape \
            or delta_hat_train.shape[0] != len(train_graphs):
        raise ShapeMismatch("stage 2 train arrays misaligned")
    has_val = val_graphs is not None and len(val_graphs) > 0

    state = nn.init_model_state(spec, config.seed)
    opt = Adam(list(state.params.values()), config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = len(train_graphs)

    def evaluate_val() -> float:
        s_hat = spatial_predict(state, val_graphs)
        return _val_mse(s_hat + delta_hat_val, target_val)

    history: list[EpochRecord] = []
    t0 = time.monotonic()
    initial_val = evaluate_val() if has_val else None
    history.append(EpochRecord(0, None, initial_val, time.monotonic() - t0))
    best_val = initial_val
    best_arrays = state.clone_arrays()
    bad_epochs = 0
    steps = 0
    stop = False

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(n)
        sq_sum = 0.0
        for k in range(0, n, config.batch_size):
            idx = perm[k:k + config.batch_size]
            batch = GraphBatch.from_graphs([train_graphs[i] for i in idx])
            s_hat = nn.spatial_forward(state, batch)
            pred = nn.add(s_hat, nn.constant(delta_hat_train[idx]))
            loss = nn.mse(pred, nn.constant(target_train[idx]))
            if not np.isfinite(loss.data):
                raise DivergedLoss(f"stage 2 loss not finite at step {steps}")
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
            steps += 1
            sq_sum += float(loss.data) * len(idx)
            if config.max_steps is not None and steps >= config.max_steps:
                stop = True
                break
        train_mse = sq_sum / n
        val = evaluate_val() if has_val else None
        history.append(EpochRecord(epoch, train_mse, val,
                                   time.monotonic() - t0))
        if has_val:
            if val < best_val:
                best_val = val
                best_arrays = state.clone_arrays()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break
        else:
            best_arrays = state.clone_arrays()
        if stop:
            break
    state.load_arrays(best_arrays)
    return Stage2Result(state=state, history=history,
                        initial_val_mse=initial_val, best_val_mse=best_val,
                        n_steps=steps)


# ---------------------------------------------------------------------------
# model checkpoints

@dataclass
class TrainedModel:
    """Everything needed to predict: head, optional correction, geometry."""

    gene_ids: tuple[str, ...]
    head_weight: np.ndarray
    head_bias: np.ndarray
    state: ModelState | None
    hops: int
    aggregation: str


def _join_genes(gene_ids: Sequence[str]) -> str:
    for g in gene_ids:
        if "," in g or "\t" in g:
            raise ValidationError(f"gene id {g!r} not serializable")
    return ",".join(gene_ids)


def _join_widths(widths: Sequence[int]) -> str:
    return ",".join(str(w) for w in widths)


def _split_widths(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",")) if text else ()


def save_stage1_checkpoint(path, result: Stage1Result,
                           gene_ids: Sequence[str], seed: int) -> None:
    meta = {
        "stage": "1",
        "genes": _join_genes(gene_ids),
        "d_emb": str(result.weight.shape[1]),
        "n_genes": str(result.weight.shape[0]),
        "seed": str(seed),
    }
    write_checkpoint(path, meta, {"head.W": result.weight,
                                  "head.b": result.bias})


def load_stage1_checkpoint(path) -> tuple[np.ndarray, np.ndarray,
                                          tuple[str, ...]]:
    meta, tensors = read_checkpoint(path)
    if meta.get("stage") != "1":
        raise ValidationError(f"{path}: not a stage-1 checkpoint")
    return tensors["head.W"], tensors["head.b"], tuple(
        meta["genes"].split(","))


def save_stage2_checkpoint(path, head_weight: np.ndarray,
                           head_bias: np.ndarray, state: ModelState,
                           gene_ids: Sequence[str], hops: int,
                           aggregation: str) -> None:
    spec = state.spec
    meta = {
        "stage": "2",
        "genes": _join_genes(gene_ids),
        "d_emb": str(head_weight.shape[1]),
        "n_genes": str(spec.n_genes),
        "in_width": str(spec.in_width),
        "pre_widths": _join_widths(spec.pre_widths),
        "operator": spec.operator,
        "gnn_widths": _join_widths(spec.gnn_widths),
        "pooling": spec.pooling,
        "sag_ratio": repr(spec.sag_ratio),
        "post_widths": _join_widths(spec.post_widths),
        "hops": str(hops),
        "aggregation": aggregation,
        "seed": str(state.seed),
    }
    tensors = {"head.W": head_weight, "head.b": head_bias}
    for name, t in state.params.items():
        tensors[name] = t.data
    write_checkpoint(path, meta, tensors)


def load_stage2_checkpoint(path) -> TrainedModel:
    meta, tensors = read_checkpoint(path)
    if meta.get("stage") != "2":
        raise ValidationError(f"{path}: not a stage-2 checkpoint")
    spec = ModelSpec(
        in_width=int(meta["in_width"]),
        n_genes=int(meta["n_genes"]),
        pre_widths=_split_widths(meta["pre_widths"]),
        operator=meta["operator"],
        gnn_widths=_split_widths(meta["gnn_widths"]),
        pooling=meta["pooling"],
        sag_ratio=float(meta["sag_ratio"]),
        post_widths=_split_widths(meta["post_widths"]),
    )
    state = nn.init_model_state(spec, int(meta["seed"]))
    arrays = {}
    for name in state.params:
        if name not in tensors:
            raise ValidationError(f"{path}: missing tensor {name!r}")
        arrays[name] = tensors[name]
    state.load_arrays(arrays)
    return TrainedModel(
        gene_ids=tuple(meta["genes"].split(",")),
        head_weight=tensors["head.W"],
        head_bias=tensors["head.b"],
        state=state,
        hops=int(meta["hops"]),
        aggregation=meta["aggregation"],
    )


def predict_expression(model: TrainedModel, embeddings: np.ndarray,
                       graphs: Sequence | None,
                       train_mean: np.ndarray) -> np.ndarray:
    """Combined prediction: correction + head delta + train mean."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    delta_hat = linear_prediction(embeddings, model.head_weight,
                                  model.head_bias)
    if model.state is not None:
        if graphs is None or len(graphs) != embeddings.shape[0]:
            raise ShapeMismatch("need one graph per spot for stage-2 models")
        s_hat = spatial_predict(model.state, graphs)
        delta_hat = s_hat + delta_hat
    return delta_hat + np.asarray(train_mean, dtype=np.float64)[None, :]
