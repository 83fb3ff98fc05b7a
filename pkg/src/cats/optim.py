"""Adam with bias correction and a constant learning rate."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterSet


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.t < 0:
            raise ValueError("step counter must be >= 0")

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t}


def adam_step(params: ParameterSet, state: AdamState, names=None) -> None:
    """One in-place update of ``names`` (default: every parameter).

    Gradients are read, not cleared.  A trainable parameter without a
    gradient is an error rather than a silent skip.
    """
    names = list(params.names() if names is None else names)
    missing = [n for n in names if params[n].grad is None]
    if missing:
        raise ValueError(f"missing gradient for {len(missing)} parameter(s), "
                         f"first: {missing[0]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in names:
        p = params[name]
        g = p.grad.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
