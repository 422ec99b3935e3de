"""On-disk formats: NVOL volumes, JSONL manifests, NFEA features, NCKP checkpoints.

Every binary format opens with an 8-byte magic followed by one UTF-8 JSON
header line terminated by ``\\n``, then a raw little-endian payload. Writers
are deterministic: the same inputs produce byte-identical files. Partially
written outputs keep a ``.partial`` suffix until the final rename.
"""

from __future__ import annotations

import contextlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

NVOL_MAGIC = b"NVOL\x00\x01\x00\x00"
NFEA_MAGIC = b"NFEA\x00\x01\x00\x00"
NCKP_MAGIC = b"NCKP\x00\x01\x00\x00"

FEATURE_DIM = 512


@contextlib.contextmanager
def atomic_output(path):
    """Write to ``<path>.partial`` and rename on success.

    A failure leaves the .partial file behind so callers can see that the
    output is incomplete.
    """
    path = os.fspath(path)
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    tmp = path + ".partial"
    with open(tmp, "wb") as fh:
        yield fh
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _json_line(obj):
    return (json.dumps(obj, separators=(",", ":"), sort_keys=False) + "\n").encode("utf-8")


def _read_header_line(fh, what):
    raw = fh.readline()
    if not raw.endswith(b"\n"):
        raise FormatError(f"{what}: header line is not newline-terminated")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: malformed JSON header ({exc})") from exc


# ---------------------------------------------------------------------------
# NVOL: one CT volume of int16 HU voxels, z-major row-major
# ---------------------------------------------------------------------------

def write_nvol(path, nodule_id, voxels):
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValidationError(f"NVOL voxels must be 3-D (Z,Y,X), got shape {voxels.shape}")
    if voxels.dtype != np.int16:
        info = np.iinfo(np.int16)
        if voxels.min() < info.min or voxels.max() > info.max:
            raise ValidationError("NVOL voxels exceed the int16 HU range")
        voxels = voxels.astype(np.int16)
    header = {"nodule_id": nodule_id, "dims": list(voxels.shape), "dtype": "i16"}
    with atomic_output(path) as fh:
        fh.write(NVOL_MAGIC)
        fh.write(_json_line(header))
        fh.write(np.ascontiguousarray(voxels, dtype="<i2").tobytes())


def read_nvol(path):
    """Returns (nodule_id, voxels) with voxels int16 indexed (z, y, x)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(NVOL_MAGIC))
        if magic != NVOL_MAGIC:
            raise FormatError(f"{path}: bad NVOL magic {magic!r}")
        header = _read_header_line(fh, path)
        for key in ("nodule_id", "dims", "dtype"):
            if key not in header:
                raise FormatError(f"{path}: NVOL header missing {key!r}")
        if header["dtype"] != "i16":
            raise FormatError(f"{path}: unsupported NVOL dtype {header['dtype']!r}")
        dims = tuple(int(d) for d in header["dims"])
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise FormatError(f"{path}: bad NVOL dims {dims}")
        count = dims[0] * dims[1] * dims[2]
        payload = fh.read(count * 2)
        if len(payload) != count * 2:
            raise FormatError(f"{path}: truncated NVOL payload")
        voxels = np.frombuffer(payload, dtype="<i2").reshape(dims).astype(np.int16)
    return header["nodule_id"], voxels


# ---------------------------------------------------------------------------
# Manifest: header line {dataset_mean, seed}, then one JSON object per nodule
# ---------------------------------------------------------------------------

RECORD_KEYS = ("nodule_id", "volume_path", "center", "slice_range", "label", "split")
SPLITS = ("train", "val", "test")


@dataclass
class ManifestRecord:
    nodule_id: str
    volume_path: str
    center: tuple  # (X, Y, Z) voxel coordinates
    slice_range: tuple  # inclusive (lo, hi) z-extent
    label: int
    split: str

    def to_json(self):
        return {
            "nodule_id": self.nodule_id,
            "volume_path": self.volume_path,
            "center": list(self.center),
            "slice_range": list(self.slice_range),
            "label": self.label,
            "split": self.split,
        }


@dataclass
class Manifest:
    records: list
    dataset_mean: float | None = None
    seed: int = 0
    root: str = "."  # directory relative volume paths resolve against

    def split_records(self, split):
        return [r for r in self.records if r.split == split]

    def resolve(self, record):
        path = record.volume_path
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def by_id(self, nodule_id):
        for r in self.records:
            if r.nodule_id == nodule_id:
                return r
        raise KeyError(nodule_id)


def _check_record(obj, where):
    for key in RECORD_KEYS:
        if key not in obj:
            raise FormatError(f"{where}: manifest record missing {key!r}")
    if obj["label"] not in (0, 1):
        raise FormatError(f"{where}: label must be 0 or 1, got {obj['label']!r}")
    if obj["split"] not in SPLITS:
        raise FormatError(f"{where}: split must be one of {SPLITS}, got {obj['split']!r}")
    lo, hi = obj["slice_range"]
    if lo > hi:
        raise FormatError(f"{where}: empty slice_range {obj['slice_range']}")
    cz = obj["center"][2]
    if not lo <= cz <= hi:
        raise FormatError(f"{where}: slice_range {obj['slice_range']} excludes center z={cz}")


def write_manifest(path, manifest):
    header = {"dataset_mean": manifest.dataset_mean, "seed": manifest.seed}
    with atomic_output(path) as fh:
        fh.write(_json_line(header))
        for rec in manifest.records:
            fh.write(_json_line(rec.to_json()))


def read_manifest(path):
    path = os.fspath(path)
    with open(path, "rb") as fh:
        header = _read_header_line(fh, path)
        if "dataset_mean" not in header:
            raise FormatError(f"{path}: manifest header must carry dataset_mean")
        records = []
        for i, raw in enumerate(fh):
            if not raw.strip():
                continue
            where = f"{path}:{i + 2}"
            try:
                obj = json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{where}: malformed record ({exc})") from exc
            _check_record(obj, where)
            records.append(
                ManifestRecord(
                    nodule_id=obj["nodule_id"],
                    volume_path=obj["volume_path"],
                    center=tuple(obj["center"]),
                    slice_range=tuple(obj["slice_range"]),
                    label=int(obj["label"]),
                    split=obj["split"],
                )
            )
    mean = header["dataset_mean"]
    return Manifest(
        records=records,
        dataset_mean=None if mean is None else float(mean),
        seed=int(header.get("seed", 0)),
        root=os.path.dirname(os.path.abspath(path)),
    )


# ---------------------------------------------------------------------------
# NFEA: stacked slice features, one 512-float row per (nodule, slice)
# ---------------------------------------------------------------------------

def write_features(path, records, matrix):
    """records: iterable of dicts with nodule_id/slice_index/label/split."""
    matrix = np.asarray(matrix, dtype=np.float32)
    records = list(records)
    if matrix.ndim != 2 or matrix.shape[0] != len(records):
        raise ValidationError(
            f"feature matrix shape {matrix.shape} does not match {len(records)} records"
        )
    header = {
        "D": int(matrix.shape[1]),
        "count": len(records),
        "records": records,
    }
    with atomic_output(path) as fh:
        fh.write(NFEA_MAGIC)
        fh.write(_json_line(header))
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def read_features(path):
    """Returns (records, matrix) in file order; validates D == 512 and
    uniqueness of (nodule_id, slice_index)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(NFEA_MAGIC))
        if magic != NFEA_MAGIC:
            raise FormatError(f"{path}: bad NFEA magic {magic!r}")
        header = _read_header_line(fh, path)
        d = int(header.get("D", -1))
        if d != FEATURE_DIM:
            raise FormatError(f"{path}: feature dimension {d} != required {FEATURE_DIM}")
        records = header.get("records")
        count = int(header.get("count", -1))
        if not isinstance(records, list) or len(records) != count:
            raise FormatError(f"{path}: record count mismatch in NFEA header")
        seen = set()
        for rec in records:
            for key in ("nodule_id", "slice_index", "label", "split"):
                if key not in rec:
                    raise FormatError(f"{path}: NFEA record missing {key!r}")
            ident = (rec["nodule_id"], rec["slice_index"])
            if ident in seen:
                raise FormatError(f"{path}: duplicate feature record for {ident}")
            seen.add(ident)
        payload = fh.read(count * d * 4)
        if len(payload) != count * d * 4:
            raise FormatError(f"{path}: truncated NFEA payload")
        matrix = np.frombuffer(payload, dtype="<f4").reshape(count, d).copy()
    return records, matrix


# ---------------------------------------------------------------------------
# NCKP: named float32 parameter blobs plus training metadata
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    schema: str  # "extractor" or "gcn"
    params: dict = field(default_factory=dict)  # name -> float32 ndarray, ordered
    config: dict = field(default_factory=dict)
    epoch: int = 0
    val_acc: float = 0.0


def write_checkpoint(path, ckpt):
    shapes = {name: list(arr.shape) for name, arr in ckpt.params.items()}
    header = {
        "schema": ckpt.schema,
        "shapes": shapes,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "val_acc": ckpt.val_acc,
    }
    with atomic_output(path) as fh:
        fh.write(NCKP_MAGIC)
        fh.write(_json_line(header))
        for name in shapes:
            arr = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
            fh.write(arr.tobytes())


def read_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(NCKP_MAGIC))
        if magic != NCKP_MAGIC:
            raise FormatError(f"{path}: bad NCKP magic {magic!r}")
        header = _read_header_line(fh, path)
        for key in ("schema", "shapes", "config", "epoch", "val_acc"):
            if key not in header:
                raise FormatError(f"{path}: NCKP header missing {key!r}")
        params = {}
        for name, shape in header["shapes"].items():
            count = int(np.prod(shape)) if shape else 1
            payload = fh.read(count * 4)
            if len(payload) != count * 4:
                raise FormatError(f"{path}: truncated NCKP payload at {name!r}")
            params[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return Checkpoint(
        schema=header["schema"],
        params=params,
        config=header["config"],
        epoch=int(header["epoch"]),
        val_acc=float(header["val_acc"]),
    )
