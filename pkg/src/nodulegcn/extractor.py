"""Slice feature extractor: a small VGG-style CNN with CBAM in block 2.

Input contract 3x60x60, output contract 512-dim penultimate features plus
2-class logits. Three conv blocks (two 3x3 convs each, pad 1) with 2x2 max
pools shrink the spatial trace 60 -> 30 -> 15 -> 7; CBAM refines block 2.
The head global-average-pools, then fc1 -> relu gives the features and fc2
the logits. Features are taken after the relu, so they are nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import CBAMParams, cbam, init_cbam
from .errors import ConfigError, DimensionError, ValidationError
from .formats import Checkpoint, read_features, write_features
from .preprocess import extract_patches
from .tensor import (
    Tensor,
    add,
    conv2d,
    global_pool,
    matmul,
    pool2d,
    relu,
    reshape,
)

FEATURE_DIM = 512


@dataclass
class BackboneConfig:
    in_channels: int = 3
    input_size: int = 60
    widths: tuple = (32, 64, 128)
    feature_dim: int = FEATURE_DIM
    num_classes: int = 2
    cbam_enabled: bool = True
    cbam_channel: bool = True
    cbam_spatial: bool = True
    cbam_reduction: int = 8
    cbam_kernel: int = 7

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be three positive ints, got {self.widths}")
        if self.input_size < 8:
            raise ConfigError(
                f"input_size {self.input_size} collapses under three 2x2 pools"
            )

    def to_json(self):
        return {
            "in_channels": self.in_channels,
            "input_size": self.input_size,
            "widths": list(self.widths),
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "cbam_enabled": self.cbam_enabled,
            "cbam_channel": self.cbam_channel,
            "cbam_spatial": self.cbam_spatial,
            "cbam_reduction": self.cbam_reduction,
            "cbam_kernel": self.cbam_kernel,
        }

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        obj["widths"] = tuple(obj.get("widths", (32, 64, 128)))
        return cls(**obj)


@dataclass
class BackboneParams:
    config: BackboneConfig
    convs: dict = field(default_factory=dict)  # name -> (weight, bias) Tensors
    cbam: CBAMParams | None = None
    fc1_w: Tensor | None = None  # (widths[2], feature_dim)
    fc1_b: Tensor | None = None
    fc2_w: Tensor | None = None  # (feature_dim, num_classes)
    fc2_b: Tensor | None = None

    CONV_NAMES = ("conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b")

    def named(self):
        out = {}
        for name in self.CONV_NAMES:
            w, b = self.convs[name]
            out[f"{name}.weight"] = w
            out[f"{name}.bias"] = b
        if self.cbam is not None:
            out.update(self.cbam.named("cbam"))
        out["fc1.weight"] = self.fc1_w
        out["fc1.bias"] = self.fc1_b
        out["fc2.weight"] = self.fc2_w
        out["fc2.bias"] = self.fc2_b
        return out

    def tensors(self):
        return list(self.named().values())


def init_backbone(config=None, rng=None, dtype=np.float32):
    """Fan-in uniform weights (bound 1/sqrt(fan_in)), zero biases."""
    config = config or BackboneConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    w1, w2, w3 = config.widths

    def conv(out_c, in_c):
        bound = 1.0 / np.sqrt(in_c * 9)
        weight = Tensor(
            rng.uniform(-bound, bound, size=(out_c, in_c, 3, 3)).astype(dtype),
            requires_grad=True,
        )
        bias = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True)
        return weight, bias

    def dense(rows, cols):
        bound = 1.0 / np.sqrt(rows)
        weight = Tensor(
            rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype),
            requires_grad=True,
        )
        bias = Tensor(np.zeros(cols, dtype=dtype), requires_grad=True)
        return weight, bias

    convs = {
        "conv1a": conv(w1, config.in_channels),
        "conv1b": conv(w1, w1),
        "conv2a": conv(w2, w1),
        "conv2b": conv(w2, w2),
        "conv3a": conv(w3, w2),
        "conv3b": conv(w3, w3),
    }
    attention = None
    if config.cbam_enabled:
        attention = init_cbam(
            w2, reduction=config.cbam_reduction, kernel_size=config.cbam_kernel,
            rng=rng, dtype=dtype,
        )
    fc1_w, fc1_b = dense(w3, config.feature_dim)
    fc2_w, fc2_b = dense(config.feature_dim, config.num_classes)
    return BackboneParams(
        config=config, convs=convs, cbam=attention,
        fc1_w=fc1_w, fc1_b=fc1_b, fc2_w=fc2_w, fc2_b=fc2_b,
    )


def _conv_block(x, params, names):
    for name in names:
        weight, bias = params.convs[name]
        x = conv2d(x, weight, stride=1, pad=1)
        x = relu(add(x, reshape(bias, (1, bias.shape[0], 1, 1))))
    return x


def backbone_forward(patch, params, train_mode=False):
    """Returns (features, logits); (512,) and (2,) for a single patch,
    (B, 512) and (B, 2) for a batch. train_mode is accepted for API symmetry;
    the backbone itself has no stochastic layers."""
    del train_mode
    cfg = params.config
    single = patch.ndim == 3
    if single:
        patch = reshape(patch, (1,) + patch.shape)
    if patch.ndim != 4 or patch.shape[1] != cfg.in_channels or patch.shape[2:] != (
        cfg.input_size,
        cfg.input_size,
    ):
        raise DimensionError(
            f"expected patches of shape ({cfg.in_channels}, {cfg.input_size}, "
            f"{cfg.input_size}), got {patch.shape}"
        )
    h = pool2d(_conv_block(patch, params, ("conv1a", "conv1b")), "max", 2)
    h = _conv_block(h, params, ("conv2a", "conv2b"))
    if params.cbam is not None:
        h = cbam(h, params.cbam, channel=cfg.cbam_channel, spatial=cfg.cbam_spatial)
    h = pool2d(h, "max", 2)
    h = pool2d(_conv_block(h, params, ("conv3a", "conv3b")), "max", 2)
    pooled = global_pool(h, "avg")
    features = relu(add(matmul(pooled, params.fc1_w), params.fc1_b))
    logits = add(matmul(features, params.fc2_w), params.fc2_b)
    if single:
        features = reshape(features, (cfg.feature_dim,))
        logits = reshape(logits, (cfg.num_classes,))
    return features, logits


# ---------------------------------------------------------------------------
# Dataset assembly and feature extraction
# ---------------------------------------------------------------------------

def load_volume_for(manifest, record):
    from .formats import read_nvol

    path = manifest.resolve(record)
    try:
        nodule_id, voxels = read_nvol(path)
    except FileNotFoundError as exc:
        raise FileNotFoundError(
            f"{record.nodule_id}: volume file {path} is missing"
        ) from exc
    if nodule_id != record.nodule_id:
        raise ValidationError(
            f"{path} holds volume {nodule_id!r} but manifest expects {record.nodule_id!r}"
        )
    return voxels


def slice_dataset(manifest, strategy="fixed5", splits=("train",)):
    """Stacked slice patches and labels for the given splits, manifest order.

    Returns (pixels (N,3,S,S) float32, labels (N,) int64, records) where each
    record is {nodule_id, slice_index, label, split}.
    """
    if manifest.dataset_mean is None:
        raise ValidationError("manifest has no dataset_mean; run preprocessing first")
    pixels, labels, records = [], [], []
    for rec in manifest.records:
        if splits is not None and rec.split not in splits:
            continue
        voxels = load_volume_for(manifest, rec)
        for patch in extract_patches(voxels, rec, manifest.dataset_mean, strategy):
            pixels.append(patch.pixels)
            labels.append(patch.label)
            records.append(
                {
                    "nodule_id": rec.nodule_id,
                    "slice_index": patch.slice_index,
                    "label": rec.label,
                    "split": rec.split,
                }
            )
    if not pixels:
        raise ValidationError(f"no records found for splits {splits}")
    return np.stack(pixels), np.asarray(labels, dtype=np.int64), records


@dataclass
class FeatureSet:
    """Stacked slice features with per-nodule grouping."""

    records: list  # dicts with nodule_id/slice_index/label/split
    matrix: np.ndarray  # (N, 512) float32

    def groups(self):
        """Consecutive per-nodule runs: (nodule_id, (start, stop), label, split)."""
        out = []
        i = 0
        n = len(self.records)
        while i < n:
            j = i
            rid = self.records[i]["nodule_id"]
            while j < n and self.records[j]["nodule_id"] == rid:
                j += 1
            out.append(
                (rid, (i, j), self.records[i]["label"], self.records[i]["split"])
            )
            i = j
        return out

    def subset(self, split):
        rows = [i for i, r in enumerate(self.records) if r["split"] == split]
        return FeatureSet(
            records=[self.records[i] for i in rows], matrix=self.matrix[rows]
        )


def extract_features(manifest, params, strategy="fixed5", batch_size=64):
    """Eval-mode features for every manifest record, all splits.

    Rows are grouped per nodule in manifest order, ascending slice index
    within each nodule (boundary slices repeat when a short nodule is padded
    to five entries).
    """
    pixels, _labels, records = slice_dataset(manifest, strategy, splits=None)
    rows = []
    for start in range(0, len(pixels), batch_size):
        chunk = Tensor(pixels[start : start + batch_size])
        features, _ = backbone_forward(chunk, params, train_mode=False)
        rows.append(features.numpy())
    matrix = np.vstack(rows).astype(np.float32)
    if matrix.shape[1] != params.config.feature_dim:
        raise ValidationError(
            f"extractor produced {matrix.shape[1]}-dim features, "
            f"expected {params.config.feature_dim}"
        )
    return FeatureSet(records=records, matrix=matrix)


def save_features(path, feature_set, strategy="fixed5"):
    """Writes unique (nodule_id, slice_index) rows; repeated boundary slices
    collapse to one stored row and are re-expanded on import."""
    seen = set()
    keep = []
    for i, rec in enumerate(feature_set.records):
        ident = (rec["nodule_id"], rec["slice_index"])
        if ident in seen:
            continue
        seen.add(ident)
        keep.append(i)
    records = [feature_set.records[i] for i in keep]
    write_features(path, records, feature_set.matrix[keep])
    # annotate the header with the selection strategy so import can rebuild
    # padded five-row groups
    _annotate_strategy(path, strategy)


def _annotate_strategy(path, strategy):
    import json
    import os

    with open(path, "rb") as fh:
        magic = fh.read(8)
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    header["strategy"] = strategy
    blob = (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")
    tmp = os.fspath(path) + ".partial"
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(blob)
        fh.write(payload)
    os.replace(tmp, path)


def import_features(path):
    """Loads an NFEA file into a FeatureSet.

    Files written by save_features under the fixed5 strategy store short
    nodules deduplicated; groups with fewer than five rows are re-expanded by
    repeating boundary slices.
    """
    import json

    records, matrix = read_features(path)
    with open(path, "rb") as fh:
        fh.read(8)
        header = json.loads(fh.readline().decode("utf-8"))
    strategy = header.get("strategy")
    fs = FeatureSet(records=records, matrix=matrix)
    if strategy != "fixed5":
        return fs
    from .preprocess import select_slices

    out_records, out_rows = [], []
    for rid, (start, stop), label, split in fs.groups():
        zs = [records[i]["slice_index"] for i in range(start, stop)]
        if stop - start >= 5:
            chosen = zs
        else:
            chosen = select_slices((min(zs), max(zs)), "fixed5")
        row_of = {z: start + k for k, z in enumerate(zs)}
        for z in chosen:
            out_records.append(
                {"nodule_id": rid, "slice_index": z, "label": label, "split": split}
            )
            out_rows.append(row_of[z])
    return FeatureSet(records=out_records, matrix=matrix[out_rows])


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------

def backbone_to_checkpoint(params, epoch=0, val_acc=0.0):
    arrays = {name: t.numpy() for name, t in params.named().items()}
    return Checkpoint(
        schema="extractor",
        params=arrays,
        config=params.config.to_json(),
        epoch=epoch,
        val_acc=val_acc,
    )


def backbone_from_checkpoint(ckpt):
    if ckpt.schema != "extractor":
        raise ValidationError(f"expected an extractor checkpoint, got {ckpt.schema!r}")
    config = BackboneConfig.from_json(ckpt.config)
    params = init_backbone(config, rng=np.random.default_rng(0))
    named = params.named()
    if set(named) != set(ckpt.params):
        missing = set(named) ^ set(ckpt.params)
        raise ValidationError(f"checkpoint parameter names do not match: {sorted(missing)}")
    for name, tensor in named.items():
        stored = ckpt.params[name]
        if tuple(stored.shape) != tensor.shape:
            raise ValidationError(
                f"{name}: checkpoint shape {stored.shape} != model shape {tensor.shape}"
            )
        tensor.data[...] = stored
    return params
