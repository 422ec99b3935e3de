"""HU volumes to normalized 3-channel 60x60 slice patches.

Pipeline per nodule: clip HU to [-1400, 400], rescale to [0, 1], subtract the
dataset mean computed over the training split, pick representative slices,
crop a 60x60 window around the annotated center, replicate to three channels.
Training-time augmentation picks one axis-aligned transform per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError

HU_MIN = -1400
HU_MAX = 400
HU_SPAN = float(HU_MAX - HU_MIN)
PATCH_SIZE = 60
PATCH_CENTER = 30  # patch index of the annotated nodule center

AUGMENT_OPS = ("flip_h", "flip_v", "rot90", "rot180", "rot270", "swap")
SLICE_STRATEGIES = ("fixed5", "all")


@dataclass
class Volume:
    """Raw CT voxels in HU, indexed (z, y, x)."""

    nodule_id: str
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValidationError(f"volume must be 3-D (Z,Y,X), got shape {self.voxels.shape}")
        if any(d <= 0 for d in self.voxels.shape):
            raise ValidationError(f"volume dims must be positive, got {self.voxels.shape}")

    @property
    def dims(self):
        return self.voxels.shape  # (Z, Y, X)


@dataclass
class NoduleAnnotation:
    nodule_id: str
    center: tuple  # (X, Y, Z)
    label: int
    split: str
    slice_range: tuple  # inclusive (lo, hi)


@dataclass
class Patch:
    """One normalized slice patch; channels identical at creation."""

    pixels: np.ndarray  # (3, 60, 60) float32
    nodule_id: str
    slice_index: int
    label: int = 0


def validate_annotation(annotation, dims):
    """Checks an annotation against the (Z, Y, X) dims of its volume."""
    z, y, x = dims
    cx, cy, cz = annotation.center
    if not (0 <= cx < x and 0 <= cy < y and 0 <= cz < z):
        raise ValidationError(
            f"{annotation.nodule_id}: center {annotation.center} outside dims {dims}"
        )
    lo, hi = annotation.slice_range
    if lo > hi:
        raise ValidationError(f"{annotation.nodule_id}: empty slice_range {annotation.slice_range}")
    if not (0 <= lo and hi < z):
        raise ValidationError(
            f"{annotation.nodule_id}: slice_range {annotation.slice_range} outside {z} slices"
        )
    if not lo <= cz <= hi:
        raise ValidationError(
            f"{annotation.nodule_id}: slice_range {annotation.slice_range} excludes center z={cz}"
        )
    if annotation.label not in (0, 1):
        raise ValidationError(f"{annotation.nodule_id}: label must be 0 or 1")


def clip_normalize(voxels, dataset_mean):
    """(clamp(HU, -1400, 400) + 1400) / 1800 - dataset_mean, as float32."""
    if not 0.0 <= dataset_mean <= 1.0:
        raise ValidationError(f"dataset_mean must lie in [0, 1], got {dataset_mean}")
    arr = np.asarray(voxels, dtype=np.float32)
    out = (np.clip(arr, HU_MIN, HU_MAX) - HU_MIN) / np.float32(HU_SPAN)
    return out - np.float32(dataset_mean)


def training_mean(volume_iter):
    """Mean of the [0, 1] normalized voxels over an iterable of HU arrays."""
    total = 0.0
    count = 0
    for voxels in volume_iter:
        norm = clip_normalize(voxels, 0.0)
        total += float(norm.sum(dtype=np.float64))
        count += norm.size
    if count == 0:
        raise ValidationError("training_mean needs at least one voxel")
    return total / count


def select_slices(slice_range, strategy):
    """fixed5: middle slice plus two on either side, boundary-repeated.

    all: every index of the inclusive range, ascending.
    """
    lo, hi = int(slice_range[0]), int(slice_range[1])
    if lo > hi:
        raise ValidationError(f"empty slice_range {slice_range}")
    if strategy == "fixed5":
        mid = (lo + hi) // 2
        return [min(max(z, lo), hi) for z in range(mid - 2, mid + 3)]
    if strategy == "all":
        return list(range(lo, hi + 1))
    raise ConfigError(f"unknown slice strategy {strategy!r}, expected one of {SLICE_STRATEGIES}")


def crop_patch(volume, z, center_xy, size=PATCH_SIZE):
    """size x size window of slice z with the center pixel at (size//2, size//2).

    Regions falling outside the slice are zero-filled.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValidationError(f"expected a 3-D volume, got shape {volume.shape}")
    if not 0 <= z < volume.shape[0]:
        raise ValidationError(f"slice index {z} outside volume of {volume.shape[0]} slices")
    plane = volume[z]
    h, w = plane.shape
    cx, cy = int(center_xy[0]), int(center_xy[1])
    half = size // 2
    out = np.zeros((size, size), dtype=np.float32)
    y0, x0 = cy - half, cx - half
    sy0, sy1 = max(0, y0), min(h, y0 + size)
    sx0, sx1 = max(0, x0), min(w, x0 + size)
    if sy0 < sy1 and sx0 < sx1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = plane[sy0:sy1, sx0:sx1]
    return out


def augment(pixels, op):
    """Applies one axis-aligned transform over the last two axes.

    rot90/rot180/rot270 rotate counterclockwise; swap transposes the two
    spatial axes, which equals flip_h followed by rot90.
    """
    arr = np.asarray(pixels)
    if arr.ndim < 2:
        raise ValidationError(f"augment needs at least 2 spatial axes, got shape {arr.shape}")
    if op == "flip_h":
        out = arr[..., :, ::-1]
    elif op == "flip_v":
        out = arr[..., ::-1, :]
    elif op == "rot90":
        out = np.rot90(arr, 1, axes=(-2, -1))
    elif op == "rot180":
        out = np.rot90(arr, 2, axes=(-2, -1))
    elif op == "rot270":
        out = np.rot90(arr, 3, axes=(-2, -1))
    elif op == "swap":
        out = np.swapaxes(arr, -2, -1)
    else:
        raise ValidationError(f"unknown augmentation {op!r}, expected one of {AUGMENT_OPS}")
    return np.ascontiguousarray(out)


def to_three_channel(x):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValidationError(f"expected a 2-D patch, got shape {x.shape}")
    return np.repeat(x[None, :, :], 3, axis=0)


def extract_patches(voxels, annotation, dataset_mean, strategy="fixed5"):
    """All slice patches for one nodule, in slice-selection order."""
    validate_annotation(annotation, np.asarray(voxels).shape)
    norm = clip_normalize(voxels, dataset_mean)
    center_xy = (annotation.center[0], annotation.center[1])
    patches = []
    for z in select_slices(annotation.slice_range, strategy):
        window = crop_patch(norm, z, center_xy)
        patches.append(
            Patch(
                pixels=to_three_channel(window),
                nodule_id=annotation.nodule_id,
                slice_index=z,
                label=annotation.label,
            )
        )
    return patches
