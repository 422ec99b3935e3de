"""Estimator wrappers with the scikit-learn fit/transform/predict contract.

``CbamSliceFeaturizer`` learns the attention CNN from labeled slice patches
and turns patches into 512-dim feature rows. ``NoduleGcnClassifier`` takes
one feature matrix per nodule (a list, since nodules have varying slice
counts) and learns the graph classifier over them. Both carve a deterministic
holdout split off the training data for checkpoint selection, mirror their
hyperparameters as constructor arguments, and so round-trip through
``get_params`` / ``clone``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .errors import UsageError, ValidationError
from .extractor import BackboneConfig, backbone_from_checkpoint
from .gcn import gcn_from_checkpoint, nodule_labels
from .graphs import block_diag, build_graph, normalize
from .tensor import Tensor, no_grad
from .train import (
    ExtractorTrainConfig,
    GcnTrainConfig,
    SplitGraph,
    fit_backbone,
    fit_gcn,
    nodule_predictions,
    stream_rng,
)


def check_patches(X):
    """Validates a batch of slice patches; returns float32 (N, 3, S, S)."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != arr.shape[3]:
        raise ValidationError(
            f"patches must have shape (N, 3, S, S), got {arr.shape}"
        )
    if arr.shape[0] == 0:
        raise ValidationError("need at least one patch")
    if not np.isfinite(arr).all():
        raise ValidationError("patches contain non-finite values")
    return arr


def check_binary_labels(y, n):
    arr = np.asarray(y, dtype=np.int64).ravel()
    if arr.shape[0] != n:
        raise ValidationError(f"{n} samples but {arr.shape[0]} labels")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("labels must be 0 or 1")
    return arr


def check_feature_groups(X, dim=None):
    """Validates a list of per-nodule feature matrices, one row per slice."""
    if len(X) == 0:
        raise ValidationError("need at least one nodule")
    groups = []
    for i, block in enumerate(X):
        arr = np.asarray(block, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ValidationError(
                f"nodule {i} must be a nonempty 2-D array, got shape {arr.shape}"
            )
        if dim is None:
            dim = arr.shape[1]
        if arr.shape[1] != dim:
            raise ValidationError(
                f"nodule {i} has {arr.shape[1]} feature columns, expected {dim}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError(f"nodule {i} contains non-finite values")
        groups.append(arr)
    return groups, dim


def _holdout_split(n, fraction, seed):
    if n < 2:
        raise ValidationError("need at least 2 samples to carve a holdout split")
    if not 0.0 < fraction < 1.0:
        raise ValidationError(f"val_fraction must lie in (0, 1), got {fraction}")
    k = min(n - 1, max(1, int(round(n * fraction))))
    order = stream_rng(seed, "holdout").permutation(n)
    return order[k:], order[:k]


class CbamSliceFeaturizer(BaseEstimator, TransformerMixin):
    """CNN feature extractor trained on (N, 3, S, S) slice patches."""

    def __init__(self, widths=(32, 64, 128), feature_dim=512, cbam=True,
                 lr0=0.001, epochs=50, batch_size=32, plateau_patience=20,
                 lr_factor=0.5, val_fraction=0.2, seed=0):
        self.widths = widths
        self.feature_dim = feature_dim
        self.cbam = cbam
        self.lr0 = lr0
        self.epochs = epochs
        self.batch_size = batch_size
        self.plateau_patience = plateau_patience
        self.lr_factor = lr_factor
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        X = check_patches(X)
        y = check_binary_labels(y, X.shape[0])
        train_idx, val_idx = _holdout_split(X.shape[0], self.val_fraction,
                                            self.seed)
        config = ExtractorTrainConfig(
            lr0=self.lr0,
            plateau_patience=self.plateau_patience,
            lr_factor=self.lr_factor,
            epochs=self.epochs,
            batch_size=self.batch_size,
        )
        backbone = BackboneConfig(
            input_size=X.shape[-1],
            widths=tuple(self.widths),
            feature_dim=self.feature_dim,
            cbam_enabled=self.cbam,
        )
        self.checkpoint_ = fit_backbone(
            X[train_idx], y[train_idx], X[val_idx], y[val_idx],
            config=config, backbone_config=backbone, seed=self.seed,
        )
        self.params_ = backbone_from_checkpoint(self.checkpoint_)
        self.n_features_out_ = self.feature_dim
        return self

    def transform(self, X, batch_size=64):
        if not hasattr(self, "params_"):
            raise UsageError("transform called before fit")
        from .extractor import backbone_forward

        X = check_patches(X)
        if X.shape[-1] != self.params_.config.input_size:
            raise ValidationError(
                f"patches are {X.shape[-1]}px, model expects "
                f"{self.params_.config.input_size}px"
            )
        rows = []
        with no_grad():
            for start in range(0, X.shape[0], batch_size):
                features, _ = backbone_forward(
                    Tensor(X[start : start + batch_size]), self.params_
                )
                rows.append(features.numpy())
        return np.concatenate(rows, axis=0)


def _grouped_graph(groups, topology, labels, ids=None):
    blocks = [normalize(build_graph(len(g), topology)) for g in groups]
    adj = block_diag(blocks)
    return SplitGraph(
        x=np.concatenate(groups, axis=0),
        adj=adj,
        spans=adj.spans,
        labels=np.asarray(labels, dtype=np.int64),
        nodule_ids=list(ids) if ids is not None else list(range(len(groups))),
    )


class NoduleGcnClassifier(BaseEstimator, ClassifierMixin):
    """Graph classifier over lists of per-nodule feature matrices."""

    def __init__(self, topology="full", lr=0.0001, dropout=0.3, epochs=200,
                 activation="leaky_relu", val_fraction=0.2, seed=0):
        self.topology = topology
        self.lr = lr
        self.dropout = dropout
        self.epochs = epochs
        self.activation = activation
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y):
        groups, dim = check_feature_groups(X)
        y = check_binary_labels(y, len(groups))
        train_idx, val_idx = _holdout_split(len(groups), self.val_fraction,
                                            self.seed)
        train_graph = _grouped_graph([groups[i] for i in train_idx],
                                     self.topology, y[train_idx])
        val_graph = _grouped_graph([groups[i] for i in val_idx],
                                   self.topology, y[val_idx])
        self.checkpoint_ = fit_gcn(
            train_graph, val_graph, topology=self.topology,
            config=GcnTrainConfig(lr=self.lr, dropout=self.dropout,
                                  epochs=self.epochs),
            seed=self.seed, activation=self.activation,
        )
        self.params_ = gcn_from_checkpoint(self.checkpoint_)
        self.n_features_in_ = dim
        self.classes_ = np.array([0, 1], dtype=np.int64)
        return self

    def predict_proba(self, X):
        if not hasattr(self, "params_"):
            raise UsageError("predict called before fit")
        groups, _ = check_feature_groups(X, dim=self.n_features_in_)
        graph = _grouped_graph(groups, self.topology,
                               np.zeros(len(groups), dtype=np.int64))
        p1 = nodule_predictions(graph, self.params_, self.activation)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return nodule_labels(self.predict_proba(X)[:, 1])
