"""Transformer path: patch embedding, pre-norm attention/MLP layers, multi-scale
taps, and the heads that turn each tap into a CNN-shaped feature map.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParameterSet, he_uniform, trunc_normal
from .unet import init_residual_block, residual_block


@dataclass(frozen=True)
class TransformerConfig:
    patch_size: int = 16          # P
    embed_dim: int = 768          # M
    num_layers: int = 12          # L
    num_heads: int = 8            # n
    in_channels: int = 1          # C
    tap_layers: tuple[int, ...] = (3, 6, 9, 12)
    mlp_hidden: int | None = None
    input_size: tuple[int, int, int] = (96, 96, 96)

    def __post_init__(self):
        object.__setattr__(self, "tap_layers", tuple(int(t) for t in self.tap_layers))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 4 * self.embed_dim)
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by "
                             f"num_heads {self.num_heads}")
        taps = self.tap_layers
        if not taps or any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1:
            raise ValueError(f"tap_layers must be strictly increasing and >= 1, got {taps}")
        if taps[-1] != self.num_layers:
            raise ValueError(f"last tap must be the final layer {self.num_layers}, got {taps[-1]}")
        for name, n in zip("WHD", self.input_size):
            if n % self.patch_size:
                raise ValueError(f"patch size {self.patch_size} does not divide input "
                                 f"extent {name}={n}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return tuple(n // self.patch_size for n in self.input_size)

    @property
    def num_patches(self) -> int:
        return int(np.prod(self.grid))

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 3 * self.in_channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


# -- tokens ------------------------------------------------------------------------

def patchify(x: Tensor, p: int) -> Tensor:
    """[B, C, W, H, D] -> [B, N, P^3 C]; rows follow the patch grid lexicographically.

    Within a row the voxel offsets vary slowest and channels fastest.
    """
    b, c, w, h, d = x.shape
    if w % p or h % p or d % p:
        raise ValueError(f"patch size {p} does not divide extents {(w, h, d)}")
    t = ad.reshape(x, (b, c, w // p, p, h // p, p, d // p, p))
    t = ad.permute(t, (0, 2, 4, 6, 3, 5, 7, 1))
    return ad.reshape(t, (b, (w // p) * (h // p) * (d // p), p ** 3 * c))


def unpatchify(tokens: Tensor, p: int, channels: int, grid) -> Tensor:
    """Exact inverse of :func:`patchify`."""
    b = tokens.shape[0]
    gw, gh, gd = grid
    t = ad.reshape(tokens, (b, gw, gh, gd, p, p, p, channels))
    t = ad.permute(t, (0, 7, 1, 4, 2, 5, 3, 6))
    return ad.reshape(t, (b, channels, gw * p, gh * p, gd * p))


def position_table(ps: ParameterSet, cfg: TransformerConfig, grid, prefix="transformer"):
    table = ps[f"{prefix}.pos"]
    if tuple(grid) == cfg.grid:
        return table
    if ad.is_grad_enabled():
        raise ValueError(f"position embedding is trained for grid {cfg.grid}; "
                         f"got {tuple(grid)} (interpolation is inference-only)")
    # inference on another input size: trilinear resize of the table over the grid
    src = table.data.reshape(cfg.grid + (cfg.embed_dim,))
    zoom = [g / s for g, s in zip(grid, cfg.grid)] + [1.0]
    out = ndimage.zoom(src, zoom, order=1, mode="nearest", grid_mode=True)
    return Tensor(out.reshape(-1, cfg.embed_dim))


def embed(patches: Tensor, weight: Tensor, pos: Tensor) -> Tensor:
    """z0 = patches @ E + E_p."""
    if patches.shape[-1] != weight.shape[0]:
        raise ad.ShapeError(f"patch width {patches.shape[-1]} != projection rows "
                            f"{weight.shape[0]}")
    return ad.linear(patches, weight) + pos


# -- attention ---------------------------------------------------------------------

def self_attention(z: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, scale: float):
    """Single head: softmax(q k^T / scale) v with q = z W_q etc.

    Returns ``(output, weights)``.
    """
    q, k, v = ad.linear(z, w_q), ad.linear(z, w_k), ad.linear(z, w_v)
    kt = ad.permute(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    weights = ad.softmax(ad.matmul(q, kt) * (1.0 / scale), axis=-1)
    return ad.matmul(weights, v), weights


def msa(z: Tensor, ps: ParameterSet, prefix: str, num_heads: int,
        return_weights: bool = False):
    """Multi-head attention: heads run on column blocks of the fused W_q/W_k/W_v,
    are concatenated along features and mixed by W_msa.

    The logits are divided by sqrt(M / n).
    """
    b, n, m = z.shape
    dh = m // num_heads

    def heads(t):  # [B, N, M] -> [B, n, N, dh]
        return ad.permute(ad.reshape(t, (b, n, num_heads, dh)), (0, 2, 1, 3))

    q = heads(ad.linear(z, ps[f"{prefix}.q.weight"]))
    k = heads(ad.linear(z, ps[f"{prefix}.k.weight"]))
    v = heads(ad.linear(z, ps[f"{prefix}.v.weight"]))
    logits = ad.matmul(q, ad.permute(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = ad.softmax(logits, axis=-1)
    out = ad.permute(ad.matmul(weights, v), (0, 2, 1, 3))
    out = ad.linear(ad.reshape(out, (b, n, m)), ps[f"{prefix}.out.weight"])
    return (out, weights) if return_weights else out


def encoder_layer(z: Tensor, ps: ParameterSet, prefix: str, num_heads: int,
                  return_weights: bool = False):
    """Pre-norm residual pair: z' = MSA(LN z) + z; z_out = MLP(LN z') + z'."""
    h = ad.layer_norm(z, ps[f"{prefix}.norm1.gain"], ps[f"{prefix}.norm1.shift"])
    attn, weights = msa(h, ps, f"{prefix}.attn", num_heads, return_weights=True)
    z = attn + z
    h = ad.layer_norm(z, ps[f"{prefix}.norm2.gain"], ps[f"{prefix}.norm2.shift"])
    h = ad.gelu(ad.linear(h, ps[f"{prefix}.mlp.fc1.weight"], ps[f"{prefix}.mlp.fc1.bias"]))
    h = ad.linear(h, ps[f"{prefix}.mlp.fc2.weight"], ps[f"{prefix}.mlp.fc2.bias"])
    z = h + z
    return (z, weights) if return_weights else z


def init_transformer(cfg: TransformerConfig, rng: np.random.Generator, ps: ParameterSet,
                     prefix: str = "transformer") -> None:
    m, hid = cfg.embed_dim, cfg.mlp_hidden
    ps.add(f"{prefix}.embed.weight", trunc_normal(rng, (cfg.patch_dim, m)))
    ps.add(f"{prefix}.pos", trunc_normal(rng, (cfg.num_patches, m)))
    for layer in range(1, cfg.num_layers + 1):
        p = f"{prefix}.layers.{layer}"
        ps.add(f"{p}.norm1.gain", np.ones(m, np.float32))
        ps.add(f"{p}.norm1.shift", np.zeros(m, np.float32))
        for name in ("q", "k", "v", "out"):
            ps.add(f"{p}.attn.{name}.weight", trunc_normal(rng, (m, m)))
        ps.add(f"{p}.norm2.gain", np.ones(m, np.float32))
        ps.add(f"{p}.norm2.shift", np.zeros(m, np.float32))
        ps.add(f"{p}.mlp.fc1.weight", trunc_normal(rng, (m, hid)))
        ps.add(f"{p}.mlp.fc1.bias", np.zeros(hid, np.float32))
        ps.add(f"{p}.mlp.fc2.weight", trunc_normal(rng, (hid, m)))
        ps.add(f"{p}.mlp.fc2.bias", np.zeros(m, np.float32))


@dataclass
class TapOutput:
    taps: list[Tensor]
    attention: list[Tensor] = field(default_factory=list)
    layers: list[Tensor] = field(default_factory=list)


def forward_with_taps(x: Tensor, cfg: TransformerConfig, ps: ParameterSet,
                      prefix: str = "transformer", record: bool = False):
    """Run patchify -> embed -> L layers and return the tokens at each tap layer.

    With ``record=True`` a :class:`TapOutput` is returned that also holds
    every layer's output and attention weights.
    """
    p = cfg.patch_size
    grid = tuple(n // p for n in x.shape[2:])
    z = embed(patchify(x, p), ps[f"{prefix}.embed.weight"], position_table(ps, cfg, grid, prefix))
    out = TapOutput(taps=[])
    if record:
        out.layers.append(z)
    wanted = set(cfg.tap_layers)
    for layer in range(1, cfg.num_layers + 1):
        z, weights = encoder_layer(z, ps, f"{prefix}.layers.{layer}", cfg.num_heads,
                                   return_weights=True)
        if record:
            out.layers.append(z)
            out.attention.append(weights)
        if layer in wanted:
            out.taps.append(z)
    return out if record else out.taps


# -- projection heads ------------------------------------------------------------

def projection_widths(embed_dim: int, target: int, steps: int) -> list[int]:
    """Channel widths after each deconv step: halve from M, land on ``target``."""
    widths = [max(target, embed_dim >> s) for s in range(1, steps)]
    return widths + [target] if steps else []


def init_projection(ps: ParameterSet, prefix: str, embed_dim: int, target: int, steps: int,
                    rng) -> None:
    """``steps`` deconv blocks, or (steps == 0) a residual block, to reach ``target`` channels."""
    if steps == 0:
        init_residual_block(ps, f"{prefix}.res", embed_dim, target, rng)
        ps.add_batch_norm(f"{prefix}.bn", target)
        return
    cin = embed_dim
    for s, cout in enumerate(projection_widths(embed_dim, target, steps), start=1):
        ps.add(f"{prefix}.up{s}.weight", he_uniform(rng, (cin, cout, 2, 2, 2), fan_in=cin))
        ps.add_batch_norm(f"{prefix}.up{s}.bn", cout)
        cin = cout


def tokens_to_grid(tap: Tensor, grid) -> Tensor:
    """[B, N, M] -> [B, M, W/P, H/P, D/P]."""
    b, n, m = tap.shape
    if n != int(np.prod(grid)):
        raise ValueError(f"{n} tokens do not fill a patch grid of {tuple(grid)}")
    return ad.permute(ad.reshape(tap, (b,) + tuple(grid) + (m,)), (0, 4, 1, 2, 3))


def project_tap(tap: Tensor, grid, ps: ParameterSet, prefix: str, steps: int,
                training: bool) -> Tensor:
    """Reshape a tap onto its patch grid and upsample it ``steps`` times (x2 each)."""
    x = tokens_to_grid(tap, grid)
    if steps == 0:
        x = residual_block(x, ps, f"{prefix}.res", training)
        x = ad.batch_norm3d(x, ps[f"{prefix}.bn.gain"], ps[f"{prefix}.bn.shift"],
                            ps.bn_state(f"{prefix}.bn"), training)
        return ad.relu(x)
    for s in range(1, steps + 1):
        x = ad.conv_transpose3d(x, ps[f"{prefix}.up{s}.weight"], stride=2)
        x = ad.batch_norm3d(x, ps[f"{prefix}.up{s}.bn.gain"], ps[f"{prefix}.up{s}.bn.shift"],
                            ps.bn_state(f"{prefix}.up{s}.bn"), training)
        x = ad.relu(x)
    return x
