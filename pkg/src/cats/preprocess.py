"""Intensity preprocessing, resampling, augmentation and patch sampling.

Everything stochastic takes an explicit ``numpy.random.Generator``; nothing
here touches global random state.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import LabelVolume, Volume

CT_CLIP = (-175.0, 250.0)
MR_PERCENTILES = (0.5, 99.5)


@dataclass
class PreprocessConfig:
    clip_lo: float = CT_CLIP[0]
    clip_hi: float = CT_CLIP[1]
    # "ct": fixed HU window; "percentile": per-volume (0.5, 99.5) window for MR;
    # "none": input is already in [0, 1]
    intensity_mode: str = "ct"
    target_spacing: tuple[float, float, float] | None = None
    patch_size: tuple[int, int, int] = (96, 96, 96)
    patch_multiple: int = 16

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ValueError(f"clip_lo ({self.clip_lo}) must be below clip_hi ({self.clip_hi})")
        if self.intensity_mode not in ("ct", "percentile", "none"):
            raise ValueError(f"unknown intensity_mode {self.intensity_mode!r}")
        self.patch_size = tuple(int(p) for p in self.patch_size)
        for p in self.patch_size:
            if p % 16 or p % self.patch_multiple:
                raise ValueError(f"patch extent {p} must be divisible by 16 and by the "
                                 f"transformer patch size {self.patch_multiple}")
        if self.target_spacing is not None:
            self.target_spacing = tuple(float(s) for s in self.target_spacing)


@dataclass
class AugmentConfig:
    flip_prob: tuple[float, float, float] = (0.5, 0.5, 0.5)
    # allowed in-plane rotations in degrees, about the through-plane (last) axis
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    intensity_shift: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if np.isscalar(self.flip_prob):
            self.flip_prob = (float(self.flip_prob),) * 3
        self.flip_prob = tuple(float(p) for p in self.flip_prob)
        if len(self.flip_prob) != 3 or any(not 0.0 <= p <= 1.0 for p in self.flip_prob):
            raise ValueError(f"flip probabilities must be three values in [0, 1], "
                             f"got {self.flip_prob}")
        self.rotations = tuple(int(r) for r in self.rotations)
        if not self.rotations or any(r % 90 for r in self.rotations):
            raise ValueError("rotations must be a non-empty set of multiples of 90 degrees")
        if self.intensity_shift < 0:
            raise ValueError("intensity_shift must be >= 0")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(flip_prob=(0.0, 0.0, 0.0), rotations=(0,), intensity_shift=0.0)


def clip_and_normalize(volume: Volume, cfg: PreprocessConfig | None = None) -> Volume:
    """Clamp to the intensity window and map it affinely onto [0, 1]."""
    cfg = cfg or PreprocessConfig()
    data = np.asarray(volume.data, dtype=np.float64)
    if cfg.intensity_mode == "percentile":
        lo, hi = np.percentile(data, MR_PERCENTILES)
    elif cfg.intensity_mode == "ct":
        lo, hi = cfg.clip_lo, cfg.clip_hi
    else:
        lo, hi = 0.0, 1.0
    if hi > lo:
        out = (np.clip(data, lo, hi) - lo) / (hi - lo)
    else:
        out = np.zeros_like(data)
    return Volume(out.astype(np.float32), volume.spacing, volume.affine, "normalized")


def resample(volume: Volume | LabelVolume, target_spacing) -> Volume | LabelVolume:
    """Resample onto a new voxel spacing; trilinear for images, nearest for labels.

    Voxel centres are aligned so that the grid covers the same physical extent;
    samples beyond the outermost source centres take the edge value.
    """
    target = np.asarray(target_spacing, dtype=np.float64)
    if target.shape != (3,) or np.any(target <= 0):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    old = np.asarray(volume.spacing, dtype=np.float64)
    extents = np.rint(np.asarray(volume.shape) * old / target).astype(int)
    if np.any(extents < 1):
        raise ValueError(f"resampling {volume.shape} to spacing {tuple(target)} gives "
                         f"extent {tuple(extents)} < 1")
    ratio = target / old
    offset = 0.5 * ratio - 0.5
    is_label = isinstance(volume, LabelVolume)
    if np.allclose(ratio, 1.0) and tuple(extents) == volume.shape:
        data = volume.data.copy()
    else:
        src = volume.data if is_label else np.asarray(volume.data, dtype=np.float64)
        data = ndimage.affine_transform(src, np.diag(ratio), offset=offset,
                                        output_shape=tuple(extents),
                                        order=0 if is_label else 1, mode="nearest")
    step = np.eye(4)
    step[:3, :3] = np.diag(ratio)
    step[:3, 3] = offset
    affine = volume.affine @ step
    spacing = tuple(float(s) for s in target)
    if is_label:
        return LabelVolume(data, volume.num_classes, spacing, affine)
    return Volume(data.astype(volume.data.dtype), spacing, affine, volume.intensity_units)


def augment(image: np.ndarray, label: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random flips, a 90-degree in-plane rotation and an intensity shift.

    The geometric part is applied identically to image and label, so label
    values are only permuted, never interpolated.  The shift touches the
    image alone and is followed by clamping to [0, 1].
    """
    if image.shape != label.shape:
        raise ValueError(f"image extents {image.shape} != label extents {label.shape}")
    # draw every variate unconditionally so the stream does not depend on cfg
    flips = rng.random(3) < np.asarray(cfg.flip_prob)
    quarter = (cfg.rotations[int(rng.integers(len(cfg.rotations)))] // 90) % 4
    shift = rng.uniform(-1.0, 1.0) * cfg.intensity_shift

    axes = tuple(int(a) for a in np.flatnonzero(flips))
    if axes:
        image = np.flip(image, axis=axes)
        label = np.flip(label, axis=axes)
    if quarter:
        image = np.rot90(image, k=quarter, axes=(0, 1))
        label = np.rot90(label, k=quarter, axes=(0, 1))
    image = np.ascontiguousarray(image)
    if shift:
        image = np.clip(image + shift, 0.0, 1.0).astype(image.dtype)
    return image, np.ascontiguousarray(label)


def _pad_to(arr: np.ndarray, size) -> np.ndarray:
    pads = []
    for n, p in zip(arr.shape, size):
        extra = max(0, p - n)
        pads.append((extra // 2, extra - extra // 2))
    if not any(a or b for a, b in pads):
        return arr
    return np.pad(arr, pads)


def crop_or_pad(image: np.ndarray, label: np.ndarray, patch_size, rng=None,
                mode: str = "random", foreground_prob: float = 0.5):
    """Cut a fixed-size patch, zero-padding undersized axes symmetrically.

    In random mode, with probability ``foreground_prob`` (when the label has
    any foreground) the window is drawn among positions that contain a
    randomly chosen foreground voxel; otherwise uniformly over all positions.
    """
    if image.shape != label.shape:
        raise ValueError(f"image extents {image.shape} != label extents {label.shape}")
    size = tuple(int(p) for p in patch_size)
    image, label = _pad_to(image, size), _pad_to(label, size)
    shape = image.shape
    if mode == "center":
        starts = [(n - p) // 2 for n, p in zip(shape, size)]
    elif mode == "random":
        if rng is None:
            raise ValueError("random crop needs a generator")
        use_fg = rng.random() < foreground_prob
        fg = np.flatnonzero(label) if use_fg else np.empty(0, dtype=int)
        if fg.size:
            centre = np.unravel_index(fg[int(rng.integers(fg.size))], shape)
            starts = [int(rng.integers(max(0, c - p + 1), min(c, n - p) + 1))
                      for c, n, p in zip(centre, shape, size)]
        else:
            starts = [int(rng.integers(0, n - p + 1)) for n, p in zip(shape, size)]
    else:
        raise ValueError(f"mode must be random or center, got {mode!r}")
    window = tuple(slice(s, s + p) for s, p in zip(starts, size))
    return np.ascontiguousarray(image[window]), np.ascontiguousarray(label[window])
