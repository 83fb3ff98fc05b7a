"""Central-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def sample_coordinates(inputs: Sequence[Tensor], samples: int | None,
                       rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
    """Pick (input index, flat index) pairs; every input gets at least one when possible."""
    sizes = [t.size for t in inputs]
    if samples is None:
        return [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    rng = rng if rng is not None else np.random.default_rng(0)
    coords: list[tuple[int, int]] = []
    if samples >= len(inputs):
        coords += [(i, int(rng.integers(n))) for i, n in enumerate(sizes)]
    offsets = np.cumsum([0] + sizes)
    for flat in rng.integers(offsets[-1], size=samples - len(coords)):
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        coords.append((i, int(flat - offsets[i])))
    return coords


def grad_check_details(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
                       samples: int | None = None, rng: np.random.Generator | None = None):
    """Return ``(coords, analytic, numeric, rel_err)`` arrays for the sampled coordinates.

    ``f`` is a zero-argument closure over ``inputs`` returning a scalar tensor.
    The inputs are perturbed in place and restored afterwards.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    f().backward()
    analytic_all = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    coords = sample_coordinates(inputs, samples, rng)
    analytic = np.empty(len(coords))
    numeric = np.empty(len(coords))
    with no_grad():
        for n, (i, j) in enumerate(coords):
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = f().item()
            flat[j] = orig - h
            fm = f().item()
            flat[j] = orig
            numeric[n] = (fp - fm) / (2.0 * h)
            analytic[n] = analytic_all[i].reshape(-1)[j]
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return coords, analytic, numeric, rel


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               samples: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over sampled coordinates of |analytic - central difference| / max(1, |analytic|)."""
    *_, rel = grad_check_details(f, inputs, h=h, samples=samples, rng=rng)
    return float(rel.max()) if rel.size else 0.0
