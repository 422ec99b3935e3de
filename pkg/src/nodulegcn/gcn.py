"""Two-layer graph convolutional classifier over slice features.

Layer rule: H' = act(A_hat @ H @ W), no bias. The network maps 512-dim slice
features to 32 hidden units with leaky ReLU (slope 0.01), then to 2 logits
and a row softmax. Inverted dropout precedes each layer at train time.
Per-nodule probabilities are the mean of the class-1 column over each span.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .tensor import Tensor, activation, dropout, matmul, softmax_rows

FEATURE_DIM = 512
HIDDEN_DIM = 32
NUM_CLASSES = 2


@dataclass
class GCNParams:
    w0: Tensor  # (in_dim, hidden)
    w1: Tensor  # (hidden, classes)
    dropout_rate: float = 0.3

    def tensors(self):
        return [self.w0, self.w1]

    def named(self):
        return {"w0": self.w0, "w1": self.w1}


def init_gcn(in_dim=FEATURE_DIM, hidden=HIDDEN_DIM, out_dim=NUM_CLASSES,
             dropout_rate=0.3, rng=None, dtype=np.float32):
    """Fan-in uniform weights, bound 1/sqrt(fan_in)."""
    if rng is None:
        rng = np.random.default_rng(0)
    if not 0.0 <= dropout_rate < 1.0:
        raise ValidationError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)

    return GCNParams(
        w0=uniform(in_dim, (in_dim, hidden)),
        w1=uniform(hidden, (hidden, out_dim)),
        dropout_rate=dropout_rate,
    )


def _adj_tensor(adj, like):
    return Tensor(adj.matrix.astype(like.dtype))


def gcn_layer(adj, h, w, act="leaky_relu", alpha=0.01):
    """act(A_hat @ h @ w); differentiable in h and w."""
    if adj.n != h.shape[0]:
        raise DimensionError(f"adjacency has {adj.n} nodes but features have {h.shape[0]} rows")
    if h.shape[1] != w.shape[0]:
        raise DimensionError(f"feature width {h.shape[1]} does not match weight rows {w.shape[0]}")
    return activation(matmul(matmul(_adj_tensor(adj, h), h), w), act, alpha=alpha)


def gcn_forward(adj, x, params, train_mode=False, rng=None, act="leaky_relu"):
    """Row-stochastic class probabilities, one row per slice node."""
    h = dropout(x, params.dropout_rate, rng=rng, train=train_mode)
    h = gcn_layer(adj, h, params.w0, act=act)
    h = dropout(h, params.dropout_rate, rng=rng, train=train_mode)
    logits = gcn_layer(adj, h, params.w1, act="linear")
    return softmax_rows(logits)


def check_spans(spans, n_rows):
    cursor = 0
    for start, stop in spans:
        if stop <= start:
            raise ValidationError(f"empty span ({start}, {stop})")
        if start != cursor:
            raise ValidationError(f"span ({start}, {stop}) leaves a gap at row {cursor}")
        cursor = stop
    if cursor != n_rows:
        raise ValidationError(f"spans cover {cursor} rows but P has {n_rows}")


def slice_to_nodule(p, spans):
    """Mean class-1 probability per span, in span order."""
    probs = p.numpy() if isinstance(p, Tensor) else np.asarray(p)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ValidationError(f"expected (n, 2) probabilities, got shape {probs.shape}")
    check_spans(spans, probs.shape[0])
    return np.array([float(probs[start:stop, 1].mean()) for start, stop in spans])


def nodule_labels(probs, threshold=0.5):
    """1 iff probability >= threshold; ties go to class 1."""
    return (np.asarray(probs) >= threshold).astype(np.int64)


def gcn_from_checkpoint(ckpt):
    """Rebuilds GCNParams from a checkpoint; settings stay in ckpt.config."""
    if ckpt.schema != "gcn":
        raise ValidationError(f"expected a gcn checkpoint, got {ckpt.schema!r}")
    for name in ("w0", "w1"):
        if name not in ckpt.params:
            raise ValidationError(f"gcn checkpoint is missing parameter {name!r}")
    return GCNParams(
        w0=Tensor(ckpt.params["w0"].copy(), requires_grad=True),
        w1=Tensor(ckpt.params["w1"].copy(), requires_grad=True),
        dropout_rate=float(ckpt.config.get("dropout", 0.3)),
    )
