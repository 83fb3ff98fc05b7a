"""Whole-volume prediction by overlapping tiles with uniform averaging."""
from __future__ import annotations

import itertools

import numpy as np

from . import autodiff as ad
from .model import CatsConfig, forward
from .params import ParameterSet


def tile_starts(n: int, window: int, overlap: float) -> list[int]:
    """Window origins along one axis; the last tile is pinned to the far end."""
    if window > n:
        raise ValueError(f"window {window} larger than padded extent {n}")
    stride = max(1, int(round(window * (1.0 - overlap))))
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] + window < n:
        starts.append(n - window)
    return starts


def check_window(window, cfg: CatsConfig) -> tuple[int, int, int]:
    window = tuple(int(w) for w in window)
    if len(window) != 3:
        raise ValueError(f"window needs three extents, got {window}")
    m = cfg.transformer.patch_size
    for name, w in zip("XYZ", window):
        if w <= 0 or w % m:
            raise ValueError(f"window extent {name}={w} must be a positive multiple of {m}")
    return window


def sliding_window_proba(image: np.ndarray, ps: ParameterSet, cfg: CatsConfig,
                         window=None, overlap: float = 0.5) -> np.ndarray:
    """Class probabilities [K, X, Y, Z] for an image [X, Y, Z] or [C, X, Y, Z].

    Undersized axes are zero-padded at the far end and the result cropped back.
    Tiles are visited in lexicographic order, so accumulation is deterministic.
    """
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4 or image.shape[0] != cfg.unet.in_channels:
        raise ValueError(f"expected {cfg.unet.in_channels}-channel volume, got shape {image.shape}")
    window = check_window(window or cfg.input_size, cfg)
    extent = image.shape[1:]
    padded = tuple(max(n, w) for n, w in zip(extent, window))
    if padded != extent:
        image = np.pad(image, [(0, 0)] + [(0, p - n) for p, n in zip(padded, extent)])

    k = cfg.num_classes
    acc = np.zeros((k,) + padded, dtype=np.float64)
    count = np.zeros(padded, dtype=np.float64)
    axes = [tile_starts(n, w, overlap) for n, w in zip(padded, window)]
    with ad.no_grad():
        for origin in itertools.product(*axes):
            sl = tuple(slice(o, o + w) for o, w in zip(origin, window))
            logits = forward(image[(slice(None),) + sl][None], ps, cfg, training=False)
            acc[(slice(None),) + sl] += ad.softmax(logits, axis=1).data[0]
            count[sl] += 1.0
    proba = acc / count
    return proba[(slice(None),) + tuple(slice(0, n) for n in extent)]


def predict_labels(image: np.ndarray, ps: ParameterSet, cfg: CatsConfig, window=None,
                   overlap: float = 0.5) -> np.ndarray:
    """Argmax labels (ties go to the lower class index), int16."""
    proba = sliding_window_proba(image, ps, cfg, window, overlap)
    return np.argmax(proba, axis=0).astype(np.int16)
