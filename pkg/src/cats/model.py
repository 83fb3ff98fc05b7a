"""CATS assembly: a U-Net whose encoder skips are summed with projected
transformer taps before reaching the decoder.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterSet
from .transformer import (
    TransformerConfig,
    forward_with_taps,
    init_projection,
    init_transformer,
    project_tap,
)
from .unet import UNetConfig, decoder_forward, encoder_forward, init_unet, unet_forward

TRANSFORMER_PREFIXES = ("transformer.", "proj.")


def default_taps(num_layers: int, depth: int) -> tuple[int, ...]:
    """Evenly spaced taps ending at the last layer: ceil(L * i / depth), i = 1..depth."""
    return tuple(math.ceil(num_layers * i / depth) for i in range(1, depth + 1))


@dataclass(frozen=True)
class CatsConfig:
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        t, u = self.transformer, self.unet
        if t.patch_size != 2 ** u.depth:
            raise ValueError(f"patch grid resolution 1/{t.patch_size} must equal the U-Net "
                             f"bottleneck resolution 1/{2 ** u.depth}")
        if len(t.tap_layers) != u.depth:
            raise ValueError(f"need one tap per fused level: {u.depth} levels, "
                             f"{len(t.tap_layers)} taps")
        if t.in_channels != u.in_channels:
            raise ValueError("transformer and U-Net must see the same input channels")
        u.check_extents(t.input_size)

    @property
    def input_size(self) -> tuple[int, int, int]:
        return self.transformer.input_size

    @property
    def num_classes(self) -> int:
        return self.unet.num_classes

    @property
    def depth(self) -> int:
        return self.unet.depth

    def to_dict(self) -> dict:
        return {"transformer": asdict(self.transformer), "unet": asdict(self.unet)}

    @classmethod
    def from_dict(cls, d: dict) -> "CatsConfig":
        t = dict(d["transformer"])
        t["tap_layers"] = tuple(t["tap_layers"])
        t["input_size"] = tuple(t["input_size"])
        return cls(TransformerConfig(**t), UNetConfig(**d["unet"]))

    @classmethod
    def desk(cls, num_classes: int = 2, in_channels: int = 1, **overrides) -> "CatsConfig":
        """Small preset for CPU verification: depth 3, P=8, L=4, M=64, n=4, F=8, 32^3."""
        t = dict(patch_size=8, embed_dim=64, num_layers=4, num_heads=4,
                 in_channels=in_channels, input_size=(32, 32, 32))
        t.update({k: v for k, v in overrides.items()
                  if k in TransformerConfig.__dataclass_fields__})
        u = dict(base_channels=8, depth=3, num_classes=num_classes, in_channels=in_channels)
        u.update({k: v for k, v in overrides.items() if k in UNetConfig.__dataclass_fields__})
        unet = UNetConfig(**u)
        t.setdefault("tap_layers", default_taps(t["num_layers"], unet.depth))
        return cls(TransformerConfig(**t), unet)

    @classmethod
    def full(cls, num_classes: int = 14, in_channels: int = 1, **overrides) -> "CatsConfig":
        """Full-scale preset: depth 4, P=16, L=12 with taps {3,6,9,12}, M=768, n=8, F=32, 96^3."""
        t = dict(patch_size=16, embed_dim=768, num_layers=12, num_heads=8,
                 in_channels=in_channels, input_size=(96, 96, 96), tap_layers=(3, 6, 9, 12))
        t.update({k: v for k, v in overrides.items()
                  if k in TransformerConfig.__dataclass_fields__})
        u = dict(base_channels=32, depth=4, num_classes=num_classes, in_channels=in_channels)
        u.update({k: v for k, v in overrides.items() if k in UNetConfig.__dataclass_fields__})
        unet = UNetConfig(**u)
        return cls(TransformerConfig(**t), unet)


def init_params(cfg: CatsConfig, seed: int = 0) -> ParameterSet:
    """Deterministic initialisation: U-Net, then transformer, then projection heads."""
    rng = np.random.default_rng(seed)
    ps = ParameterSet()
    init_unet(cfg.unet, rng, ps)
    init_transformer(cfg.transformer, rng, ps)
    widths = cfg.unet.widths
    for level in range(1, cfg.depth + 1):
        init_projection(ps, f"proj.{level}", cfg.transformer.embed_dim, widths[level],
                        cfg.depth - level, rng)
    return ps


def _as_input(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 4:
        x = ad.reshape(x, (1,) + x.shape)
    return x


def project_taps(x: Tensor, ps: ParameterSet, cfg: CatsConfig, training: bool) -> list[Tensor]:
    """Projected transformer taps for levels 1..depth (index 0 is level 1)."""
    taps = forward_with_taps(x, cfg.transformer, ps)
    grid = tuple(n // cfg.transformer.patch_size for n in x.shape[2:])
    return [project_tap(tap, grid, ps, f"proj.{level}", cfg.depth - level, training)
            for level, tap in zip(range(1, cfg.depth + 1), taps)]


def forward(x, ps: ParameterSet, cfg: CatsConfig, training: bool = False) -> Tensor:
    """Logits [B, K, W, H, D].

    The raw input feeds both encoders.  Level 0 goes to the decoder as is;
    every lower level, bottleneck included, is the elementwise sum of the CNN
    feature and the projected transformer tap.
    """
    x = _as_input(x)
    feats = encoder_forward(x, ps, cfg.unet, training)
    projected = project_taps(x, ps, cfg, training)
    fused = [feats[0]]
    for level, (f, p) in enumerate(zip(feats[1:], projected), start=1):
        if f.shape != p.shape:
            raise ad.ShapeError(f"level {level}: projected tap {p.shape} does not match "
                                f"CNN feature {f.shape}")
        fused.append(f + p)
    return decoder_forward(fused, ps, cfg.unet, training)


def unet_only_forward(x, ps: ParameterSet, cfg: CatsConfig, training: bool = False) -> Tensor:
    """The CNN backbone alone on the same parameters (transformer path skipped)."""
    return unet_forward(_as_input(x), ps, cfg.unet, training)


def feature_shapes(cfg: CatsConfig, batch: int = 1) -> dict[str, list[tuple[int, ...]]]:
    """Shapes implied by the configuration, derived from the parameter tensors.

    Walks the same layer structure as :func:`forward` using only parameter
    shapes, so the full preset can be checked without running it.
    """
    ps = init_params(cfg)
    u, t = cfg.unet, cfg.transformer
    spatial = list(cfg.input_size)
    cnn = []
    for i in range(u.depth + 1):
        w = ps[f"unet.enc{i}.conv2.weight"].shape[0]
        cnn.append((batch, w) + tuple(s // 2 ** i for s in spatial))
    proj = []
    for level in range(1, u.depth + 1):
        steps = u.depth - level
        grid = [s // t.patch_size for s in spatial]
        if steps == 0:
            width = ps[f"proj.{level}.res.conv.weight"].shape[0]
        else:
            for s in range(1, steps + 1):
                w = ps[f"proj.{level}.up{s}.weight"]
                grid = [(g - 1) * 2 + w.shape[2] for g in grid]
                width = w.shape[1]
        proj.append((batch, width) + tuple(grid))
    taps = [(batch, t.num_patches, t.embed_dim) for _ in t.tap_layers]
    return {"cnn": cnn, "projected": proj, "taps": taps}


def parameter_count(cfg: CatsConfig) -> dict[str, int]:
    """Trainable scalar counts; the position table is reported apart from the rest."""
    if cfg.depth < 1:
        raise ValueError("depth must be >= 1")
    ps = init_params(cfg)
    pos = ps["transformer.pos"].size
    counts = {
        "unet": ps.num_scalars("unet."),
        "transformer": ps.num_scalars("transformer.") - pos,
        "projection": ps.num_scalars("proj."),
        "position_embedding": pos,
    }
    counts["total"] = counts["unet"] + counts["transformer"] + counts["projection"]
    return counts


def is_transformer_param(name: str) -> bool:
    return name.startswith(TRANSFORMER_PREFIXES)


def ablate_transformer(ps: ParameterSet) -> ParameterSet:
    """Copy with every transformer and projection-head tensor zeroed (running stats too).

    With zero batch-norm gains and shifts each head emits exactly zero, so the
    fused skips equal the CNN features.
    """
    out = ps.copy()
    for name, t in out.items():
        if is_transformer_param(name):
            t.data[...] = 0
    for name, b in out.buffers.items():
        if is_transformer_param(name):
            b[...] = 0
    return out


def predict_proba(x, ps: ParameterSet, cfg: CatsConfig) -> np.ndarray:
    """Softmax class probabilities in eval mode, without building a graph."""
    with ad.no_grad():
        return ad.softmax(forward(x, ps, cfg, training=False), axis=1).data
