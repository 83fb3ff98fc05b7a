"""3D U-Net path: encoder with max-pool down-sampling, deconv decoder with
concatenated skips, and the residual conv block reused by the projection heads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterSet, he_uniform


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 16
    depth: int = 4
    num_classes: int = 2
    in_channels: int = 1
    norm: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("U-Net depth must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def widths(self) -> list[int]:
        """Channel ladder F, 2F, ... 2^depth F."""
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]

    def check_extents(self, extents) -> None:
        m = 2 ** self.depth
        for name, n in zip("WHD", extents):
            if n % m:
                raise ValueError(f"input extent {name}={n} is not divisible by 2^depth={m}")


# -- building blocks -------------------------------------------------------------

def _conv_weight(rng, cout, cin, k):
    return he_uniform(rng, (cout, cin, k, k, k), fan_in=cin * k ** 3)


def init_conv_block(ps: ParameterSet, prefix: str, cin: int, cout: int, rng,
                    norm: bool = True) -> None:
    for i, c in ((1, cin), (2, cout)):
        ps.add(f"{prefix}.conv{i}.weight", _conv_weight(rng, cout, c, 3))
        if norm:
            ps.add_batch_norm(f"{prefix}.bn{i}", cout)
        else:
            ps.add(f"{prefix}.conv{i}.bias", np.zeros(cout, np.float32))


def conv_block(x: Tensor, ps: ParameterSet, prefix: str, training: bool) -> Tensor:
    """Two {3^3 conv, batch norm, relu} stages; spatial extents preserved."""
    for i in (1, 2):
        x = ad.conv3d(x, ps[f"{prefix}.conv{i}.weight"], ps.get(f"{prefix}.conv{i}.bias"),
                      padding=1)
        if f"{prefix}.bn{i}.gain" in ps:
            x = _bn(x, ps, f"{prefix}.bn{i}", training)
        x = ad.relu(x)
    return x


def _bn(x: Tensor, ps: ParameterSet, prefix: str, training: bool) -> Tensor:
    return ad.batch_norm3d(x, ps[f"{prefix}.gain"], ps[f"{prefix}.shift"],
                           ps.bn_state(prefix), training)


def init_residual_block(ps: ParameterSet, prefix: str, cin: int, cout: int, rng) -> None:
    ps.add(f"{prefix}.conv.weight", _conv_weight(rng, cout, cin, 3))
    ps.add_batch_norm(f"{prefix}.bn", cout)
    if cin != cout:
        ps.add(f"{prefix}.shortcut.weight", _conv_weight(rng, cout, cin, 1))
        ps.add(f"{prefix}.shortcut.bias", np.zeros(cout, np.float32))


def residual_block(x: Tensor, ps: ParameterSet, prefix: str, training: bool) -> Tensor:
    """relu(bn(conv(x)) + shortcut(x)); the shortcut is a 1^3 conv when widths differ."""
    y = ad.conv3d(x, ps[f"{prefix}.conv.weight"], padding=1)
    y = _bn(y, ps, f"{prefix}.bn", training)
    if f"{prefix}.shortcut.weight" in ps:
        shortcut = ad.conv3d(x, ps[f"{prefix}.shortcut.weight"], ps[f"{prefix}.shortcut.bias"])
    else:
        shortcut = x
    return ad.relu(y + shortcut)


# -- U-Net -------------------------------------------------------------------------

def init_unet(cfg: UNetConfig, rng: np.random.Generator, ps: ParameterSet,
              prefix: str = "unet") -> None:
    w = cfg.widths
    init_conv_block(ps, f"{prefix}.enc0", cfg.in_channels, w[0], rng, cfg.norm)
    for i in range(1, cfg.depth + 1):
        init_conv_block(ps, f"{prefix}.enc{i}", w[i - 1], w[i], rng, cfg.norm)
    for i in range(cfg.depth, 0, -1):
        # deconv k=2 s=2: each output voxel sees exactly w[i] inputs
        ps.add(f"{prefix}.dec{i}.up.weight",
               he_uniform(rng, (w[i], w[i - 1], 2, 2, 2), fan_in=w[i]))
        ps.add(f"{prefix}.dec{i}.up.bias", np.zeros(w[i - 1], np.float32))
        init_conv_block(ps, f"{prefix}.dec{i}", 2 * w[i - 1], w[i - 1], rng, cfg.norm)
    ps.add(f"{prefix}.head.weight", _conv_weight(rng, cfg.num_classes, w[0], 1))
    ps.add(f"{prefix}.head.bias", np.zeros(cfg.num_classes, np.float32))


def encoder_forward(x: Tensor, ps: ParameterSet, cfg: UNetConfig, training: bool,
                    prefix: str = "unet") -> list[Tensor]:
    """Return depth+1 feature maps, level i at 1/2^i resolution with 2^i F channels."""
    if x.ndim != 5:
        raise ValueError(f"expected [B, C, W, H, D] input, got shape {x.shape}")
    cfg.check_extents(x.shape[2:])
    feats = [conv_block(x, ps, f"{prefix}.enc0", training)]
    for i in range(1, cfg.depth + 1):
        feats.append(conv_block(ad.maxpool3d(feats[-1]), ps, f"{prefix}.enc{i}", training))
    return feats


def decoder_forward(feats: list[Tensor], ps: ParameterSet, cfg: UNetConfig, training: bool,
                    prefix: str = "unet") -> Tensor:
    """Upsample from the bottleneck, concatenating the skip at each level; return logits."""
    if len(feats) != cfg.depth + 1:
        raise ValueError(f"decoder expects {cfg.depth + 1} feature maps, got {len(feats)}")
    for i, (f, w) in enumerate(zip(feats, cfg.widths)):
        if f.shape[1] != w:
            raise ValueError(f"feature level {i} has {f.shape[1]} channels, ladder expects {w}")
    x = feats[-1]
    for i in range(cfg.depth, 0, -1):
        up = ad.conv_transpose3d(x, ps[f"{prefix}.dec{i}.up.weight"],
                                 ps[f"{prefix}.dec{i}.up.bias"], stride=2)
        if up.shape != feats[i - 1].shape:
            raise ValueError(f"level {i - 1}: upsampled {up.shape} vs skip {feats[i - 1].shape}")
        x = conv_block(ad.concat([up, feats[i - 1]], axis=1), ps, f"{prefix}.dec{i}", training)
    return ad.conv3d(x, ps[f"{prefix}.head.weight"], ps[f"{prefix}.head.bias"])


def unet_forward(x: Tensor, ps: ParameterSet, cfg: UNetConfig, training: bool,
                 prefix: str = "unet") -> Tensor:
    """Plain U-Net: encoder features go to the decoder unmodified."""
    return decoder_forward(encoder_forward(x, ps, cfg, training, prefix), ps, cfg, training,
                           prefix)
