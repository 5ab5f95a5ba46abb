"""Siamese hierarchical encoder and the binary / semantic change networks.

The encoder is applied with one weight set to both temporal images and
yields a four-level pyramid at 1/4, 1/8, 1/16, 1/32 of the input extent.
The binary-change decoder consumes the two pyramids stage by stage: each
stage rearranges the temporal pair three ways (channel concatenation,
width-wise concatenation, width-wise interleave), scans each rearrangement
with its own residual scan block, folds the doubled-width maps back by
summing their temporal halves, fuses the three results, and adds the
upsampled deeper-stage output.  The semantic decoder is a U-style branch
(shared by both temporal pyramids) that refines from the deepest stage up.

Stage feature maps inside the decoders run at a fixed decoder width; each
encoder stage is first projected down by a 1x1 lateral. This keeps the
top-down additions shape-consistent and the desk-scale parameter count
small.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import DEFAULT_RATES, make_scan_block
from .nn import Conv3x3, LayerNorm, Linear, Module
from .tensor import ShapeError, Tensor

DEFAULT_WIDTHS = (12, 24, 48, 96)
DEFAULT_DEPTHS = (1, 1, 2, 1)
STEM_PATCH = 4


def _space_to_channels(x: Tensor, factor: int) -> Tensor:
    """(B, H, W, C) -> (B, H/f, W/f, f*f*C), row-major within each patch."""
    B, H, W, C = x.shape
    if H % factor or W % factor:
        raise ShapeError(f"extent ({H}, {W}) not divisible by {factor}")
    x = T.reshape(x, (B, H // factor, factor, W // factor, factor, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, H // factor, W // factor, factor * factor * C))


class PatchEmbed(Module):
    """Stem: fold 4x4 patches into tokens and project to the first width."""

    def __init__(self, in_channels: int, out_channels: int):
        self.proj = Linear(in_channels * STEM_PATCH * STEM_PATCH, out_channels)
        self.norm = LayerNorm(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return self.norm(self.proj(_space_to_channels(x, STEM_PATCH)))


class PatchMerging(Module):
    """Between stages: halve the extent, double (per config) the width."""

    def __init__(self, in_channels: int, out_channels: int):
        self.norm = LayerNorm(4 * in_channels)
        self.proj = Linear(4 * in_channels, out_channels, bias=False)

    def __call__(self, x: Tensor) -> Tensor:
        return self.proj(self.norm(_space_to_channels(x, 2)))


class Encoder(Module):
    """Four stages of cross-scan residual blocks with patch merging between."""

    def __init__(self, widths=DEFAULT_WIDTHS, depths=DEFAULT_DEPTHS, state_dim: int = 8,
                 zoh_mode: str = "printed", in_channels: int = 3):
        if len(widths) != 4 or len(depths) != 4:
            raise ValueError("encoder needs exactly four stage widths and depths")
        self.widths = tuple(widths)
        self.depths = tuple(depths)
        self.stem = PatchEmbed(in_channels, widths[0])
        self.stages = [
            [make_scan_block("csm", widths[i], state_dim=state_dim, zoh_mode=zoh_mode)
             for _ in range(depths[i])]
            for i in range(4)
        ]
        self.merges = [PatchMerging(widths[i], widths[i + 1]) for i in range(3)]

    def __call__(self, x: Tensor) -> list:
        H, W = x.shape[-3], x.shape[-2]
        if H % 32 or W % 32:
            raise ShapeError(
                f"encoder input extent ({H}, {W}) must be divisible by 32; "
                f"pad to ({-(-H // 32) * 32}, {-(-W // 32) * 32})"
            )
        x = self.stem(x)
        pyramid = []
        for i in range(4):
            for block in self.stages[i]:
                x = block(x)
            pyramid.append(x)
            if i < 3:
                x = self.merges[i](x)
        return pyramid


# ---- temporal rearrangement ---------------------------------------------------------


def rearrange_z(z_t1: Tensor, z_t2: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """The three temporal rearrangements of a feature-map pair.

    Z1: channel concatenation (H, W, 2C).
    Z2: width-wise concatenation, T1 columns then T2 columns (H, 2W, C).
    Z3: width-wise interleave, even columns from T1, odd from T2 (H, 2W, C).
    """
    if z_t1.shape != z_t2.shape:
        raise ShapeError(f"rearrange_z: extents differ, {z_t1.shape} vs {z_t2.shape}")
    B, H, W, C = z_t1.shape
    z1 = T.concat([z_t1, z_t2], axis=-1)
    z2 = T.concat([z_t1, z_t2], axis=-2)
    a = T.reshape(z_t1, (B, H, W, 1, C))
    b = T.reshape(z_t2, (B, H, W, 1, C))
    z3 = T.reshape(T.concat([a, b], axis=-2), (B, H, 2 * W, C))
    return z1, z2, z3


def fold_width_concat(z: Tensor) -> Tensor:
    """Sum the two temporal halves of a width-concatenated (H, 2W, C) map."""
    W2 = z.shape[-2]
    left = T.slice_axis(z, -2, 0, W2 // 2)
    right = T.slice_axis(z, -2, W2 // 2, W2)
    return T.add(left, right)


def fold_width_interleave(z: Tensor) -> Tensor:
    """Sum the even and odd columns of an interleaved (H, 2W, C) map."""
    B, H, W2, C = z.shape
    zz = T.reshape(z, (B, H, W2 // 2, 2, C))
    even = T.reshape(T.slice_axis(zz, -2, 0, 1), (B, H, W2 // 2, C))
    odd = T.reshape(T.slice_axis(zz, -2, 1, 2), (B, H, W2 // 2, C))
    return T.add(even, odd)


def unfold_width_concat(z: Tensor) -> tuple[Tensor, Tensor]:
    W2 = z.shape[-2]
    return T.slice_axis(z, -2, 0, W2 // 2), T.slice_axis(z, -2, W2 // 2, W2)


def unfold_width_interleave(z: Tensor) -> tuple[Tensor, Tensor]:
    B, H, W2, C = z.shape
    zz = T.reshape(z, (B, H, W2 // 2, 2, C))
    even = T.reshape(T.slice_axis(zz, -2, 0, 1), (B, H, W2 // 2, C))
    odd = T.reshape(T.slice_axis(zz, -2, 1, 2), (B, H, W2 // 2, C))
    return even, odd


# ---- binary change decoder ----------------------------------------------------------


class _StageFuse(Module):
    """One decoder stage: lateral projection, triple rearranged scans, fusion."""

    def __init__(self, in_channels: int, width: int, strategy: str, rates, window_mode: str,
                 state_dim: int, merge_mode: str, zoh_mode: str):
        kw = dict(rates=rates, window_mode=window_mode, state_dim=state_dim,
                  merge_mode=merge_mode, zoh_mode=zoh_mode)
        self.lateral = Linear(in_channels, width)
        self.z1_proj = Linear(2 * width, width)
        self.block_z1 = make_scan_block(strategy, width, **kw)
        self.block_z2 = make_scan_block(strategy, width, **kw)
        self.block_z3 = make_scan_block(strategy, width, **kw)
        self.fuse = Linear(3 * width, width)

    def __call__(self, f_t1: Tensor, f_t2: Tensor) -> Tensor:
        z_t1 = self.lateral(f_t1)
        z_t2 = self.lateral(f_t2)
        z1, z2, z3 = rearrange_z(z_t1, z_t2)
        y1 = self.block_z1(self.z1_proj(z1))
        y2 = fold_width_concat(self.block_z2(z2))
        y3 = fold_width_interleave(self.block_z3(z3))
        return self.fuse(T.concat([y1, y2, y3], axis=-1))


class BCDDecoder(Module):
    """Deepest-first fusion of the two pyramids into full-resolution logits."""

    def __init__(self, widths, decoder_width: int, strategy: str = "atrous",
                 rates=DEFAULT_RATES, window_mode: str = "contiguous", state_dim: int = 8,
                 merge_mode: str = "concat", zoh_mode: str = "printed", out_channels: int = 1):
        self.stages = [
            _StageFuse(widths[i], decoder_width, strategy, rates, window_mode,
                       state_dim, merge_mode, zoh_mode)
            for i in range(4)
        ]
        self.head = Linear(decoder_width, out_channels)

    def __call__(self, pyr_t1, pyr_t2, capture: dict | None = None) -> Tensor:
        prev = None
        for i in range(3, -1, -1):
            cur = self.stages[i](pyr_t1[i], pyr_t2[i])
            if prev is not None:
                cur = T.add(cur, T.upsample2x_bilinear(prev))
            if capture is not None:
                capture[f"stage{i + 1}"] = cur
            prev = cur
        logits = self.head(prev)
        return T.upsample2x_bilinear(T.upsample2x_bilinear(logits))


class BCDNet(Module):
    """Weight-sharing siamese encoder plus the binary change decoder."""

    def __init__(self, widths=DEFAULT_WIDTHS, depths=DEFAULT_DEPTHS, decoder_width: int = 16,
                 strategy: str = "atrous", rates=DEFAULT_RATES, window_mode: str = "contiguous",
                 state_dim: int = 8, merge_mode: str = "concat", zoh_mode: str = "printed"):
        self.encoder = Encoder(widths, depths, state_dim=state_dim, zoh_mode=zoh_mode)
        self.decoder = BCDDecoder(widths, decoder_width, strategy, rates, window_mode,
                                  state_dim, merge_mode, zoh_mode)

    def encode_siamese(self, img_t1: Tensor, img_t2: Tensor) -> tuple[list, list]:
        return self.encoder(img_t1), self.encoder(img_t2)

    def __call__(self, img_t1: Tensor, img_t2: Tensor, capture: dict | None = None) -> Tensor:
        pyr1, pyr2 = self.encode_siamese(img_t1, img_t2)
        return self.decoder(pyr1, pyr2, capture)


# ---- semantic change decoder --------------------------------------------------------


class ConvBlock(Module):
    """3x3 convolution, channel norm, relu."""

    def __init__(self, in_channels: int, out_channels: int):
        self.conv = Conv3x3(in_channels, out_channels)
        self.norm = LayerNorm(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x)))


class ResBlock(Module):
    """Two conv blocks with a residual add."""

    def __init__(self, channels: int):
        self.b1 = ConvBlock(channels, channels)
        self.b2 = ConvBlock(channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.b2(self.b1(x)))


class SemanticBranch(Module):
    """U-style refinement over one temporal pyramid, ending in K-class logits.

    One weight set serves both temporal images, so identical inputs give
    identical semantic maps.
    """

    def __init__(self, widths, width: int, num_classes: int, rates=DEFAULT_RATES,
                 window_mode: str = "contiguous", state_dim: int = 8,
                 merge_mode: str = "concat", zoh_mode: str = "printed"):
        kw = dict(rates=rates, window_mode=window_mode, state_dim=state_dim,
                  merge_mode=merge_mode, zoh_mode=zoh_mode)
        self.conv_blocks = [ConvBlock(widths[i], width) for i in range(4)]
        self.scan_blocks = [make_scan_block("atrous", width, **kw) for _ in range(4)]
        self.up_projs = [Linear(2 * width, width) for _ in range(3)]
        self.res_blocks = [ResBlock(width) for _ in range(3)]
        self.head = Linear(width, num_classes)

    def __call__(self, pyramid) -> Tensor:
        f = self.scan_blocks[3](self.conv_blocks[3](pyramid[3]))
        for i in range(2, -1, -1):
            lateral = self.conv_blocks[i](pyramid[i])
            up = T.concat([lateral, T.upsample2x_bilinear(f)], axis=-1)
            f = self.res_blocks[i](self.scan_blocks[i](self.up_projs[i](up)))
        logits = self.head(f)
        return T.upsample2x_bilinear(T.upsample2x_bilinear(logits))


class SCDNet(Module):
    """Triple-branch semantic change network: one CD head, two SS heads.

    The CD branch reuses the binary decoder; the two semantic branches
    share one weight set (applied per temporal pyramid) that is disjoint
    from the CD branch.
    """

    def __init__(self, widths=DEFAULT_WIDTHS, depths=DEFAULT_DEPTHS, decoder_width: int = 12,
                 num_classes: int = 4, strategy: str = "atrous", rates=DEFAULT_RATES,
                 window_mode: str = "contiguous", state_dim: int = 8,
                 merge_mode: str = "concat", zoh_mode: str = "printed"):
        self.encoder = Encoder(widths, depths, state_dim=state_dim, zoh_mode=zoh_mode)
        self.cd_decoder = BCDDecoder(widths, decoder_width, strategy, rates, window_mode,
                                     state_dim, merge_mode, zoh_mode)
        self.semantic = SemanticBranch(widths, decoder_width, num_classes, rates,
                                       window_mode, state_dim, merge_mode, zoh_mode)
        self.num_classes = num_classes

    def encode_siamese(self, img_t1: Tensor, img_t2: Tensor) -> tuple[list, list]:
        return self.encoder(img_t1), self.encoder(img_t2)

    def __call__(self, img_t1: Tensor, img_t2: Tensor, capture: dict | None = None):
        pyr1, pyr2 = self.encode_siamese(img_t1, img_t2)
        cd = self.cd_decoder(pyr1, pyr2, capture)
        sem1 = self.semantic(pyr1)
        sem2 = self.semantic(pyr2)
        return cd, sem1, sem2


# ---- model summary ------------------------------------------------------------------


def _group_counts(model: Module) -> list[tuple[str, int]]:
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        groups[top] = groups.get(top, 0) + p.size
    return sorted(groups.items())


def summarize(model: Module, height: int, width: int) -> str:
    """Human-readable per-module parameter counts and stage extents."""
    lines = [f"model: {type(model).__name__}"]
    for name, count in _group_counts(model):
        lines.append(f"  {name}: {count} parameters")
    lines.append(f"  total: {model.param_count()} parameters")
    lines.append(f"input: {height}x{width}")
    widths = model.encoder.widths
    for i in range(4):
        f = 4 * (2**i)
        lines.append(f"  stage {i + 1}: {height // f}x{width // f}x{widths[i]}")
    return "\n".join(lines)
