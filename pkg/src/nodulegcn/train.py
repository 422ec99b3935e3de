"""Training loops: mini-batch extractor fine-tuning and full-batch GCN.

Extractor: Adam at lr 0.001, batches of 32 augmented slice patches, 50
epochs, learning rate halved after 20 epochs without a validation-accuracy
improvement. GCN: Adam at lr 0.0001, dropout 0.3, 200 full-batch epochs on
the block-diagonal training graph. Both loops keep the checkpoint with the
highest validation accuracy (earlier epoch wins ties) and emit one JSON log
line per split per epoch. Every random draw derives from the single run
seed through named substreams, so identical configs produce identical
artifacts byte for byte.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError
from .extractor import backbone_forward, init_backbone, slice_dataset
from .formats import Checkpoint
from .gcn import (
    FEATURE_DIM,
    gcn_forward,
    init_gcn,
    nodule_labels,
    slice_to_nodule,
)
from .graphs import block_diag, build_graph, normalize
from .preprocess import AUGMENT_OPS, augment
from .tensor import Tensor, backward, cross_entropy, no_grad, softmax_rows

# fixed substream ids: changing these changes every downstream artifact
STREAMS = {
    "synth": 0,
    "extractor_init": 1,
    "augment": 2,
    "shuffle": 3,
    "gcn_init": 4,
    "gcn_dropout": 5,
    "holdout": 6,
}


def stream_rng(seed, name):
    """Independent generator for one named stage of the run."""
    if name not in STREAMS:
        raise ValidationError(f"unknown seed stream {name!r}, expected one of {sorted(STREAMS)}")
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(STREAMS[name],))
    )


# ---------------------------------------------------------------------------
# Optimizer and scheduler
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam; reads gradients from each tensor's .grad."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValidationError(f"learning rate must be nonnegative, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * np.square(g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype, copy=False
            )
            p.grad = None


class PlateauScheduler:
    """Halves the rate after `patience` consecutive non-improving epochs.

    The staleness counter resets both on improvement and on each halving.
    """

    def __init__(self, lr, patience=20, factor=0.5):
        if lr <= 0 or not 0 < factor < 1 or patience < 1:
            raise ValidationError(
                f"bad schedule (lr={lr}, patience={patience}, factor={factor})"
            )
        self.lr = float(lr)
        self.patience = patience
        self.factor = factor
        self.best = -np.inf
        self.stale = 0

    def update(self, val_acc):
        if val_acc > self.best:
            self.best = val_acc
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


def plateau_schedule(history, lr, patience=20, factor=0.5):
    """Final learning rate after folding a whole accuracy history."""
    if len(history) == 0:
        raise ValidationError("plateau_schedule needs a nonempty history")
    sched = PlateauScheduler(lr, patience=patience, factor=factor)
    for acc in history:
        sched.update(acc)
    return sched.lr


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class ExtractorTrainConfig:
    lr0: float = 0.001
    plateau_patience: int = 20
    lr_factor: float = 0.5
    epochs: int = 50
    batch_size: int = 32

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValidationError(f"bad extractor training config: {self}")


@dataclass
class GcnTrainConfig:
    lr: float = 0.0001
    dropout: float = 0.3
    epochs: int = 200

    def __post_init__(self):
        if self.lr < 0 or not 0.0 <= self.dropout < 1.0 or self.epochs < 0:
            raise ValidationError(f"bad GCN training config: {self}")


@dataclass
class TrainConfig:
    extractor: ExtractorTrainConfig = field(default_factory=ExtractorTrainConfig)
    gcn: GcnTrainConfig = field(default_factory=GcnTrainConfig)
    seed: int = 0


def _log_line(log, **fields):
    if log is not None:
        log.write(json.dumps(fields) + "\n")


def _warn_single_class(labels, what):
    if len(np.unique(labels)) < 2:
        warnings.warn(
            f"{what} contains a single class; accuracy is still computed "
            "but AUC will be undefined",
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# Extractor loop
# ---------------------------------------------------------------------------

def _slice_probs(pixels, params, batch_size=64):
    probs = []
    with no_grad():
        for start in range(0, len(pixels), batch_size):
            _, logits = backbone_forward(Tensor(pixels[start : start + batch_size]), params)
            probs.append(softmax_rows(logits).numpy())
    return np.vstack(probs)


def _slice_eval(pixels, labels, params, batch_size=64):
    """Mean clamped CE and accuracy under the prob1 >= 0.5 rule."""
    probs = _slice_probs(pixels, params, batch_size)
    picked = np.clip(probs[np.arange(len(labels)), labels], 1e-12, 1.0)
    loss = float(-np.log(picked).mean())
    acc = float(((probs[:, 1] >= 0.5).astype(np.int64) == labels).mean())
    return loss, acc


def train_extractor(manifest, config=None, backbone_config=None, strategy="fixed5",
                    seed=0, log=None):
    """Returns the best-validation-accuracy backbone checkpoint."""
    train_px, train_y, _ = slice_dataset(manifest, strategy, splits=("train",))
    val_px, val_y, _ = slice_dataset(manifest, strategy, splits=("val",))
    return fit_backbone(train_px, train_y, val_px, val_y, config=config,
                        backbone_config=backbone_config, seed=seed, log=log)


def fit_backbone(train_px, train_y, val_px, val_y, config=None,
                 backbone_config=None, seed=0, log=None):
    """Core mini-batch loop over pre-assembled slice patches."""
    from .extractor import backbone_to_checkpoint

    config = config or ExtractorTrainConfig()
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    _warn_single_class(train_y, "training split")
    _warn_single_class(val_y, "validation split")

    params = init_backbone(backbone_config, rng=stream_rng(seed, "extractor_init"))
    aug_rng = stream_rng(seed, "augment")
    shuffle_rng = stream_rng(seed, "shuffle")
    opt = Adam(params.tensors(), config.lr0)
    sched = PlateauScheduler(config.lr0, config.plateau_patience, config.lr_factor)

    if config.epochs == 0:
        _, val_acc = _slice_eval(val_px, val_y, params)
        return backbone_to_checkpoint(params, epoch=0, val_acc=val_acc)

    best = None
    n = len(train_px)
    for epoch in range(1, config.epochs + 1):
        ops = aug_rng.integers(0, len(AUGMENT_OPS), size=n)
        order = shuffle_rng.permutation(n)
        opt.lr = sched.lr
        total_loss = 0.0
        total_hits = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = np.stack(
                [augment(train_px[i], AUGMENT_OPS[ops[i]]) for i in idx]
            )
            labels = train_y[idx]
            _, logits = backbone_forward(Tensor(batch), params)
            probs = softmax_rows(logits)
            loss = cross_entropy(probs, labels)
            backward(loss, params.tensors())
            opt.step()
            total_loss += loss.item() * len(idx)
            total_hits += int(((probs.numpy()[:, 1] >= 0.5).astype(np.int64) == labels).sum())
        train_loss = total_loss / n
        train_acc = total_hits / n
        val_loss, val_acc = _slice_eval(val_px, val_y, params)
        _log_line(log, epoch=epoch, split="train", loss=round(train_loss, 6),
                  acc=round(train_acc, 6), lr=opt.lr)
        _log_line(log, epoch=epoch, split="val", loss=round(val_loss, 6),
                  acc=round(val_acc, 6), lr=opt.lr)
        if best is None or val_acc > best.val_acc:
            best = backbone_to_checkpoint(params, epoch=epoch, val_acc=val_acc)
        sched.update(val_acc)
    return best


# ---------------------------------------------------------------------------
# GCN loop
# ---------------------------------------------------------------------------

@dataclass
class SplitGraph:
    """One split's block-diagonal graph with its stacked features."""

    x: np.ndarray  # (N, 512) float32
    adj: object  # NormalizedAdjacency over all slice nodes
    spans: list  # per-nodule half-open row ranges
    labels: np.ndarray  # per-nodule
    nodule_ids: list

    @property
    def slice_labels(self):
        out = np.empty(self.x.shape[0], dtype=np.int64)
        for (start, stop), label in zip(self.spans, self.labels):
            out[start:stop] = label
        return out


def build_split_graph(feature_set, split, topology):
    fs = feature_set.subset(split)
    groups = fs.groups()
    if not groups:
        raise ValidationError(f"no nodules in split {split!r}")
    blocks = [normalize(build_graph(stop - start, topology)) for _, (start, stop), _, _ in groups]
    adj = block_diag(blocks)
    return SplitGraph(
        x=fs.matrix,
        adj=adj,
        spans=adj.spans,
        labels=np.array([label for _, _, label, _ in groups], dtype=np.int64),
        nodule_ids=[rid for rid, _, _, _ in groups],
    )


def nodule_predictions(graph, params, activation="leaky_relu"):
    """Eval-mode per-nodule class-1 probabilities."""
    with no_grad():
        p = gcn_forward(graph.adj, Tensor(graph.x), params, train_mode=False,
                        act=activation)
    return slice_to_nodule(p, graph.spans)


def _nodule_acc(graph, params, activation):
    probs = nodule_predictions(graph, params, activation)
    return float((nodule_labels(probs) == graph.labels).mean())


def train_gcn(feature_set, topology="full", config=None, seed=0,
              activation="leaky_relu", log=None):
    """Returns the best-validation-accuracy GCN checkpoint."""
    if feature_set.matrix.shape[1] != FEATURE_DIM:
        raise FormatError(
            f"features are {feature_set.matrix.shape[1]}-dim, GCN expects {FEATURE_DIM}"
        )
    train_graph = build_split_graph(feature_set, "train", topology)
    val_graph = build_split_graph(feature_set, "val", topology)
    return fit_gcn(train_graph, val_graph, topology=topology, config=config,
                   seed=seed, activation=activation, log=log)


def fit_gcn(train_graph, val_graph, topology="full", config=None, seed=0,
            activation="leaky_relu", log=None):
    """Core full-batch loop over pre-built split graphs."""
    config = config or GcnTrainConfig()
    _warn_single_class(train_graph.labels, "training split")
    _warn_single_class(val_graph.labels, "validation split")

    in_dim = train_graph.x.shape[1]
    params = init_gcn(in_dim=in_dim, dropout_rate=config.dropout,
                      rng=stream_rng(seed, "gcn_init"))
    drop_rng = stream_rng(seed, "gcn_dropout")
    opt = Adam(params.tensors(), config.lr)
    slice_labels = train_graph.slice_labels
    x_train = Tensor(train_graph.x)

    def snapshot(epoch, val_acc):
        return Checkpoint(
            schema="gcn",
            params={name: t.numpy().copy() for name, t in params.named().items()},
            config={
                "in_dim": in_dim,
                "hidden": params.w0.shape[1],
                "dropout": config.dropout,
                "activation": activation,
                "topology": topology,
            },
            epoch=epoch,
            val_acc=val_acc,
        )

    if config.epochs == 0:
        return snapshot(0, _nodule_acc(val_graph, params, activation))

    best = None
    for epoch in range(1, config.epochs + 1):
        p = gcn_forward(train_graph.adj, x_train, params, train_mode=True,
                        rng=drop_rng, act=activation)
        loss = cross_entropy(p, slice_labels)
        backward(loss, params.tensors())
        opt.step()
        train_acc = _nodule_acc(train_graph, params, activation)
        val_acc = _nodule_acc(val_graph, params, activation)
        _log_line(log, epoch=epoch, split="train", loss=round(loss.item(), 6),
                  acc=round(train_acc, 6), lr=opt.lr)
        _log_line(log, epoch=epoch, split="val", loss=None,
                  acc=round(val_acc, 6), lr=opt.lr)
        if best is None or val_acc > best.val_acc:
            best = snapshot(epoch, val_acc)
    return best
