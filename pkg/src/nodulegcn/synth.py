"""Synthetic CT phantoms so every pipeline stage runs without real scans.

Each nodule gets its own small volume: noisy air background around -900 HU
with a few soft-tissue clutter blobs, plus one roughly spherical nodule at
approximately 50 HU. The two classes share the same mean intensity and
differ only in texture: negatives are smooth inside with a clean boundary,
positives carry high-variance interior noise and spiked (spiculated)
boundaries. Splits are assigned 6:2:2 at patient level; a patient carries
one or two nodules and never straddles splits.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ValidationError
from .formats import Manifest, ManifestRecord, write_manifest, write_nvol
from .train import stream_rng

AIR_HU = -900.0
TISSUE_HU = 50.0
SPLIT_WEIGHTS = (("train", 6), ("val", 2), ("test", 2))


def _patient_sizes(rng, n_nodules):
    """1-2 nodules per patient; at least three patients so the 6:2:2 split
    leaves no split empty."""
    sizes = []
    left = n_nodules
    while left > 0:
        size = int(min(rng.integers(1, 3), left))
        sizes.append(size)
        left -= size
    while len(sizes) < 3 and 2 in sizes:
        sizes.remove(2)
        sizes += [1, 1]
    return sizes


def _largest_remainder(total, weights):
    """Integer allocation of `total` proportional to weights, sum preserved."""
    raw = [total * w / sum(weights) for w in weights]
    base = [int(np.floor(r)) for r in raw]
    short = total - sum(base)
    order = np.argsort([b - r for b, r in zip(base, raw)], kind="stable")
    for i in order[:short]:
        base[i] += 1
    return base


def _assign_splits(rng, sizes):
    """Patient-level 6:2:2 assignment; returns one split name per patient."""
    n = len(sizes)
    counts = _largest_remainder(n, [w for _, w in SPLIT_WEIGHTS])
    names = []
    for (split, _), count in zip(SPLIT_WEIGHTS, counts):
        names += [split] * count
    order = rng.permutation(n)
    out = [None] * n
    for slot, patient in enumerate(order):
        out[patient] = names[slot]
    return out


def _assign_labels(rng, nodule_splits, positive_fraction):
    """Exactly round(n * fraction) positives, spread across splits
    proportionally so no split is accidentally single-class."""
    n = len(nodule_splits)
    n_pos = int(round(n * positive_fraction))
    if not 0 < n_pos < n:
        raise ValidationError(
            f"positive_fraction {positive_fraction} leaves {n_pos} positives of {n}; "
            "need at least one nodule of each class"
        )
    split_order = [s for s, _ in SPLIT_WEIGHTS]
    by_split = {s: [i for i, sp in enumerate(nodule_splits) if sp == s] for s in split_order}
    wanted = _largest_remainder(n_pos, [max(len(by_split[s]), 1) for s in split_order])
    labels = np.zeros(n, dtype=np.int64)
    for split, want in zip(split_order, wanted):
        members = by_split[split]
        for k in rng.permutation(len(members))[: min(want, len(members))]:
            labels[members[k]] = 1
    # rounding can under-fill when a split lacks capacity; top up elsewhere
    deficit = n_pos - int(labels.sum())
    if deficit > 0:
        zeros = np.flatnonzero(labels == 0)
        for k in rng.permutation(len(zeros))[:deficit]:
            labels[zeros[k]] = 1
    return labels


def _smooth_noise(rng, shape, sigma, cell=4):
    """Low-frequency noise: coarse grid inflated by repetition."""
    coarse = [max(1, int(np.ceil(s / cell))) for s in shape]
    grid = rng.normal(0.0, sigma, size=coarse)
    for axis, s in enumerate(shape):
        grid = np.repeat(grid, cell, axis=axis)
    return grid[tuple(slice(0, s) for s in shape)]


def _nodule_mask(rng, dims, center, radius, spiculated):
    """Boolean mask; positives get direction-dependent radius spikes."""
    cz, cy, cx = center
    margin = int(np.ceil(radius * 2.0)) + 2
    z0, z1 = max(0, cz - margin), min(dims[0], cz + margin + 1)
    y0, y1 = max(0, cy - margin), min(dims[1], cy + margin + 1)
    x0, x1 = max(0, cx - margin), min(dims[2], cx + margin + 1)
    zz, yy, xx = np.meshgrid(
        np.arange(z0, z1) - cz,
        np.arange(y0, y1) - cy,
        np.arange(x0, x1) - cx,
        indexing="ij",
    )
    dist = np.sqrt(zz**2 + yy**2 + xx**2)
    limit = np.full(dist.shape, radius)
    if spiculated:
        with np.errstate(invalid="ignore"):
            unit = np.stack([zz, yy, xx]) / np.maximum(dist, 1e-9)
        for _ in range(8):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            align = np.tensordot(direction, unit, axes=1)
            # narrow cones of extra radius produce spikes on the boundary
            limit = limit + radius * 0.9 * np.clip((align - 0.82) / 0.18, 0.0, 1.0)
    else:
        # mild ellipsoidal squash keeps negatives from being perfect spheres
        scale = rng.uniform(0.9, 1.1, size=3)
        dist = np.sqrt((zz * scale[0]) ** 2 + (yy * scale[1]) ** 2 + (xx * scale[2]) ** 2)
    box = dist <= limit
    mask = np.zeros(dims, dtype=bool)
    mask[z0:z1, y0:y1, x0:x1] = box
    return mask


def _make_volume(rng, dims, label):
    """Returns (hu_volume int16, center (X,Y,Z), slice_range)."""
    vol = rng.normal(AIR_HU, 30.0, size=dims)
    # a few faint tissue blobs keep the background from being pure noise
    for _ in range(3):
        blob_center = tuple(int(rng.integers(8, d - 8)) for d in dims)
        blob_r = float(rng.uniform(3.0, 6.0))
        blob = _nodule_mask(rng, dims, blob_center, blob_r, spiculated=False)
        vol[blob] = rng.normal(-500.0, 40.0, size=int(blob.sum()))
    jitter = rng.integers(-4, 5, size=3)
    center = (
        dims[0] // 2 + int(jitter[0]),
        dims[1] // 2 + int(jitter[1]),
        dims[2] // 2 + int(jitter[2]),
    )
    radius = float(rng.uniform(4.0, 6.0))
    mask = _nodule_mask(rng, dims, center, radius, spiculated=bool(label))
    if label:
        texture = rng.normal(0.0, 100.0, size=int(mask.sum()))
    else:
        texture = _smooth_noise(rng, dims, sigma=15.0)[mask]
    vol[mask] = TISSUE_HU + texture
    zs = np.flatnonzero(mask.any(axis=(1, 2)))
    slice_range = (int(zs[0]), int(zs[-1]))
    hu = np.clip(np.rint(vol), -32768, 32767).astype(np.int16)
    cz, cy, cx = center
    return hu, (cx, cy, cz), slice_range


def synth_generate(out_dir, n_nodules=60, positive_fraction=0.3,
                   dims=(64, 64, 64), seed=0):
    """Writes volumes/<id>.nvol files plus manifest.jsonl; returns the path
    of the manifest."""
    if n_nodules < 4:
        raise ValidationError(f"need at least 4 nodules, got {n_nodules}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 64 for d in dims):
        raise ValidationError(f"dims must be at least 64 per axis, got {dims}")
    rng = stream_rng(seed, "synth")

    sizes = _patient_sizes(rng, n_nodules)
    patient_splits = _assign_splits(rng, sizes)
    nodule_splits = []
    owners = []
    for patient, size in enumerate(sizes):
        for k in range(size):
            owners.append((patient, k))
            nodule_splits.append(patient_splits[patient])
    labels = _assign_labels(rng, nodule_splits, positive_fraction)

    out_dir = os.fspath(out_dir)
    vol_dir = os.path.join(out_dir, "volumes")
    os.makedirs(vol_dir, exist_ok=True)
    records = []
    for i, (patient, k) in enumerate(owners):
        nodule_id = f"p{patient:03d}_n{k}"
        hu, center, slice_range = _make_volume(rng, dims, int(labels[i]))
        rel_path = os.path.join("volumes", f"{nodule_id}.nvol")
        write_nvol(os.path.join(out_dir, rel_path), nodule_id, hu)
        records.append(
            ManifestRecord(
                nodule_id=nodule_id,
                volume_path=rel_path,
                center=center,
                slice_range=slice_range,
                label=int(labels[i]),
                split=nodule_splits[i],
            )
        )
    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest_path, Manifest(records=records, dataset_mean=None, seed=seed))
    return manifest_path
