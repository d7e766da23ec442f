"""Forward pass, loss and gradients of the virtual-graph significance model.

Per timepoint ("virtual node") the model embeds its most-recent-first
observation window with a bias-free two-layer ELU perceptron, measures
pairwise similarity of linearly projected, center-unit-normalized
embeddings (a significance in [-1, 1], symmetric, 1 on the self-loop),
aggregates neighbor embeddings through two significance-weighted sum
layers, and regresses the residual sum of all three representations onto
the q future values. The loss is the averaged squared error of a node
batch plus a squared-Frobenius penalty on the full significance matrix.

No layer carries a bias term, which gives exact zero propagation from
all-zero inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import FormatError, NumericalError, ShapeError
from .numerics import Rng, elu, matmul, row_center_unit, uniform_init

DEFAULT_HIDDEN = 256

CHECKPOINT_VERSION = "dvgsn-ckpt-1"

# Fixed parameter order: initialization draws and optimizer updates follow it.
PARAM_NAMES = ("w_embed_1", "w_embed_2", "w_proj", "w_gnn_1", "w_gnn_2", "w_out")


@dataclass
class ModelParams:
    """The six trainable weight matrices.

    w_embed_1 (p x h) and w_embed_2 (h x h) form the window embedder,
    w_proj (h x h) is the linear projection ahead of the similarity
    normalization, w_gnn_1 / w_gnn_2 (h x h) are the two aggregation layers
    and w_out (h x q) is the regression head.
    """

    w_embed_1: np.ndarray
    w_embed_2: np.ndarray
    w_proj: np.ndarray
    w_gnn_1: np.ndarray
    w_gnn_2: np.ndarray
    w_out: np.ndarray

    @classmethod
    def init(cls, rng: Rng, p: int, q: int, hidden: int = DEFAULT_HIDDEN) -> "ModelParams":
        """Uniform init scaled by each matrix's fan-in, drawn in PARAM_NAMES order."""
        return cls(
            w_embed_1=uniform_init(rng, p, hidden, fan_in=p),
            w_embed_2=uniform_init(rng, hidden, hidden, fan_in=hidden),
            w_proj=uniform_init(rng, hidden, hidden, fan_in=hidden),
            w_gnn_1=uniform_init(rng, hidden, hidden, fan_in=hidden),
            w_gnn_2=uniform_init(rng, hidden, hidden, fan_in=hidden),
            w_out=uniform_init(rng, hidden, q, fan_in=hidden),
        )

    @property
    def p(self) -> int:
        return self.w_embed_1.shape[0]

    @property
    def q(self) -> int:
        return self.w_out.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_embed_1.shape[1]

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def check_finite(self):
        for name, w in self.as_dict().items():
            if not np.all(np.isfinite(w)):
                raise NumericalError(f"non-finite values in {name}")


@dataclass
class GraphActivations:
    """Everything the forward pass produces, kept for gradients, evaluation
    and neighbor inspection."""

    embeddings: np.ndarray  # n x h, layer-0 representations
    layer1: np.ndarray  # n x h
    layer2: np.ndarray  # n x h
    significance: np.ndarray  # n x n masked similarity matrix
    predictions: np.ndarray  # n x q


def complete_mask(n: int) -> np.ndarray:
    """Every node attends to every node (self-loop included)."""
    return np.ones((n, n), dtype=bool)


def _check_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise ShapeError(f"mask shape {mask.shape} does not match {n} nodes")
    if not np.all(np.diagonal(mask)):
        raise ShapeError("mask must keep every self-loop")
    return mask


def embed_nodes(windows: np.ndarray, params: ModelParams) -> np.ndarray:
    """Row-independent window embeddings: elu(elu(X W1) W2)."""
    return elu(matmul(elu(matmul(windows, params.w_embed_1)), params.w_embed_2))


def edge_significance(
    embeddings: np.ndarray, params: ModelParams, mask: np.ndarray
) -> np.ndarray:
    """Pairwise significance: inner products of center-unit-normalized
    projected embeddings, zeroed outside the mask.

    For non-degenerate rows the result is symmetric where the mask is,
    bounded by [-1, 1] (Cauchy-Schwarz on unit vectors) and exactly 1 on
    the diagonal.
    """
    n = embeddings.shape[0]
    mask = _check_mask(mask, n)
    z = row_center_unit(matmul(embeddings, params.w_proj))
    return (z @ z.T) * mask


def gnn_layer(
    h_prev: np.ndarray,
    significance: np.ndarray,
    weight: np.ndarray,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """One aggregation layer: elu((T*mask) H W), a significance-weighted sum
    over each node's permitted neighbors plus itself."""
    t = np.asarray(significance, dtype=np.float64)
    if t.shape[0] != t.shape[1] or t.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"significance {t.shape} does not match {h_prev.shape[0]} nodes")
    if mask is not None:
        t = t * _check_mask(mask, t.shape[0])
    return elu(matmul(matmul(t, h_prev), weight))


def forward(windows: np.ndarray, params: ModelParams, mask: np.ndarray) -> GraphActivations:
    """Full forward pass over one graph of windows."""
    n = windows.shape[0]
    if windows.shape[1] != params.p:
        raise ShapeError(f"windows have lag {windows.shape[1]}, params expect {params.p}")
    mask = _check_mask(mask, n)
    s = embed_nodes(windows, params)
    t = edge_significance(s, params, mask)
    h1 = gnn_layer(s, t, params.w_gnn_1)
    h2 = gnn_layer(h1, t, params.w_gnn_2)
    predictions = matmul(s + h1 + h2, params.w_out)
    return GraphActivations(
        embeddings=s, layer1=h1, layer2=h2, significance=t, predictions=predictions
    )


def loss(
    targets: np.ndarray,
    predictions: np.ndarray,
    significance: np.ndarray,
    penalty: float,
    batch: np.ndarray,
    mode: str = "averaged",
) -> float:
    """Squared-error data term over the batch nodes plus
    penalty * ||T||_F^2 over the whole graph.

    mode 'averaged' divides the data term by (batch size * q); 'summed'
    leaves it as a plain Frobenius square.
    """
    batch = np.asarray(batch, dtype=np.intp)
    if batch.size == 0:
        raise ShapeError("batch must contain at least one node")
    if penalty < 0:
        raise ShapeError(f"penalty must be >= 0, got {penalty}")
    diff = predictions[batch] - targets[batch]
    sse = float(np.sum(diff * diff))
    if mode == "averaged":
        data_term = sse / (batch.size * targets.shape[1])
    elif mode == "summed":
        data_term = sse
    else:
        raise ShapeError(f"unknown loss mode {mode!r}")
    return data_term + penalty * float(np.sum(significance * significance))


def _trace(windows, param_vars, mask_f):
    """Build the forward tape; returns (embeddings, layer1, layer2, T, yhat) Vars."""
    x = ad.constant(windows)
    s = ad.elu(ad.matmul(ad.elu(ad.matmul(x, param_vars["w_embed_1"])), param_vars["w_embed_2"]))
    z = ad.row_center_unit(ad.matmul(s, param_vars["w_proj"]))
    t = ad.gram_masked(z, mask_f)
    h1 = ad.elu(ad.matmul(ad.matmul(t, s), param_vars["w_gnn_1"]))
    h2 = ad.elu(ad.matmul(ad.matmul(t, h1), param_vars["w_gnn_2"]))
    yhat = ad.matmul(ad.add(ad.add(s, h1), h2), param_vars["w_out"])
    return s, h1, h2, t, yhat


def gradients(
    windows: np.ndarray,
    targets: np.ndarray,
    params: ModelParams,
    mask: np.ndarray,
    penalty: float,
    batch: np.ndarray,
    mode: str = "averaged",
) -> tuple:
    """Exact gradients of :func:`loss` for all six parameter matrices,
    including the penalty path through the projection and embedding weights.

    Returns (loss value, {name: gradient}).
    """
    batch = np.asarray(batch, dtype=np.intp)
    if batch.size == 0:
        raise ShapeError("batch must contain at least one node")
    mask_f = _check_mask(mask, windows.shape[0]).astype(np.float64)
    param_vars = {name: ad.leaf(w) for name, w in params.as_dict().items()}
    _, _, _, t, yhat = _trace(windows, param_vars, mask_f)
    sse = ad.sse_rows(yhat, batch, targets[batch])
    pen = ad.frob_sq(t)
    if mode == "averaged":
        total = ad.scalar_mix([sse, pen], [1.0 / (batch.size * targets.shape[1]), penalty])
    elif mode == "summed":
        total = ad.scalar_mix([sse, pen], [1.0, penalty])
    else:
        raise ShapeError(f"unknown loss mode {mode!r}")
    if not np.isfinite(total.value):
        raise NumericalError("non-finite loss in forward pass")
    ad.backward(total)
    grads = {}
    for name, var in param_vars.items():
        g = var.grad if var.grad is not None else np.zeros_like(var.value)
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
        grads[name] = g
    return float(total.value), grads


def check_significance(t: np.ndarray, atol_sym=1e-10, atol_diag=1e-9, atol_range=1e-9) -> None:
    """Raise unless T is symmetric, unit-diagonal (or exactly 0 for rows the
    norm floor zeroed out) and bounded by [-1, 1] within tolerances."""
    if not np.allclose(t, t.T, rtol=0.0, atol=atol_sym):
        raise NumericalError("significance matrix is not symmetric")
    diag = np.diagonal(t)
    ok = (np.abs(diag - 1.0) < atol_diag) | (diag == 0.0)
    if not np.all(ok):
        raise NumericalError("significance diagonal is neither 1 nor degenerate-zero")
    if t.min() < -1.0 - atol_range or t.max() > 1.0 + atol_range:
        raise NumericalError("significance entries escape [-1, 1]")


def save_checkpoint(path, params: ModelParams, config: dict, norm=None) -> None:
    """Write a single JSON checkpoint with shape-annotated row-major weights,
    a config echo and the standardization statistics."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": dict(config),
        "norm": list(norm) if norm is not None else None,
        "weights": {
            name: {"shape": list(w.shape), "data": w.ravel().tolist()}
            for name, w in params.as_dict().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Read a checkpoint; returns (params, config, norm)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {doc.get('version')!r}")
    weights = {}
    for name in PARAM_NAMES:
        entry = doc["weights"][name]
        weights[name] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
    norm = tuple(doc["norm"]) if doc.get("norm") is not None else None
    return ModelParams(**weights), doc.get("config", {}), norm
