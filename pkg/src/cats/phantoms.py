"""Synthetic labelled volumes with analytically known geometry."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume_io import LabelVolume, Volume


@dataclass
class SyntheticPhantomSpec:
    extents: tuple[int, int, int] = (32, 32, 32)
    count: int = 2
    objects_per_volume: int = 2
    kinds: tuple[str, ...] = ("sphere", "box")
    # sphere radius or box half-width, in voxels
    size_range: tuple[float, float] = (5.0, 9.0)
    num_classes: int = 2
    background: float = 0.2
    contrast: float = 0.6
    noise_sigma: float = 0.05
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.kinds = tuple(self.kinds)
        self.size_range = tuple(float(s) for s in self.size_range)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ValueError(f"extents must be three positive integers, got {self.extents}")
        if self.count < 1 or self.objects_per_volume < 0:
            raise ValueError("need count >= 1 and objects_per_volume >= 0")
        unknown = set(self.kinds) - {"sphere", "box"}
        if not self.kinds or unknown:
            raise ValueError(f"object kinds must be sphere or box, got {self.kinds}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad size_range {self.size_range}")
        if 2 * hi + 1 > min(self.extents):
            raise ValueError(f"objects of size {hi} do not fit in extents {self.extents}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def sphere_mask(extents, centre, radius) -> np.ndarray:
    grid = np.indices(extents, dtype=np.float64)
    c = np.asarray(centre, dtype=np.float64).reshape(3, 1, 1, 1)
    return ((grid - c) ** 2).sum(0) <= radius ** 2


def box_mask(extents, centre, half) -> np.ndarray:
    grid = np.indices(extents, dtype=np.float64)
    c = np.asarray(centre, dtype=np.float64).reshape(3, 1, 1, 1)
    return (np.abs(grid - c) <= half).all(0)


def generate_phantoms(spec: SyntheticPhantomSpec) -> list[tuple[Volume, LabelVolume]]:
    """Objects are painted in order (later ones overwrite); object j gets class 1 + j mod (K-1).

    Class c has mean intensity background + contrast * c / (K-1); Gaussian
    noise is added and the image rescaled onto [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    affine = np.diag(list(spec.spacing) + [1.0])
    out = []
    k = spec.num_classes
    for _ in range(spec.count):
        label = np.zeros(spec.extents, dtype=np.int16)
        for j in range(spec.objects_per_volume):
            kind = spec.kinds[int(rng.integers(len(spec.kinds)))]
            size = rng.uniform(*spec.size_range)
            centre = [rng.uniform(size, n - 1 - size) for n in spec.extents]
            mask = (sphere_mask if kind == "sphere" else box_mask)(spec.extents, centre, size)
            label[mask] = 1 + j % (k - 1)
        image = spec.background + spec.contrast * label.astype(np.float64) / (k - 1)
        image = image + rng.normal(0.0, spec.noise_sigma, spec.extents)
        lo, hi = image.min(), image.max()
        image = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
        out.append((Volume(image.astype(np.float32), spec.spacing, affine, "normalized"),
                    LabelVolume(label, k, spec.spacing, affine)))
    return out
