"""Named parameter storage shared by the CNN and transformer paths."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import BatchNormState, Tensor


class ParameterSet:
    """Ordered map from dotted parameter path to trainable :class:`Tensor`.

    Batch-norm running statistics live alongside as plain arrays in
    ``buffers``; they are checkpointed but never receive gradients.
    Insertion order is the construction order, which is deterministic, so
    iteration order doubles as checkpoint identity.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_batch_norm(self, prefix: str, channels: int, dtype=np.float32) -> None:
        self.add(f"{prefix}.gain", np.ones(channels, dtype=dtype))
        self.add(f"{prefix}.shift", np.zeros(channels, dtype=dtype))
        self.buffers[f"{prefix}.running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers[f"{prefix}.running_var"] = np.ones(channels, dtype=dtype)

    def bn_state(self, prefix: str) -> BatchNormState:
        return BatchNormState(self.buffers[f"{prefix}.running_mean"],
                              self.buffers[f"{prefix}.running_var"])

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def get(self, name: str) -> Tensor | None:
        return self._params.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def num_scalars(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self._params.items() if n.startswith(prefix))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self, dtype=None) -> "ParameterSet":
        """Deep copy, optionally casting every buffer (e.g. to float64 for grad checks)."""
        out = ParameterSet()
        for name, t in self._params.items():
            out.add(name, t.data.astype(dtype or t.dtype, copy=True))
        for name, b in self.buffers.items():
            out.buffers[name] = b.astype(dtype or b.dtype, copy=True)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in stable order."""
        state = {name: t.data for name, t in self._params.items()}
        state.update(self.buffers)
        return state


def he_uniform(rng: np.random.Generator, shape, fan_in: float, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(size=shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(size=int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
