"""Residual scan blocks.

`AWSS2D` runs the three-step pipeline over a feature map: serialize the
map once per rate through an atrous-window path (awscan), push every rate
group through its own selective scan in parallel (the groups share no
state or parameters), then scatter the groups back to maps and fuse them
with a squeeze-excitation style channel gate plus a pointwise projection
(awsmerge).  `CSMSS2D` is the cross-scan baseline: four directional
serializations, four independent scans, summed and projected, no gate.

Both live inside the same residual wrapper:

    out = x + out_proj( inner(dwconv(in_proj(norm(x)))) * silu(gate_proj(norm(x))) )

where `inner` is AWSS2D (AWVSSBlock) or CSMSS2D (VSSBlock).  With every
learned weight at zero the wrapper is exactly the identity.
"""

from __future__ import annotations

import numpy as np

from . import scan as S
from . import tensor as T
from .nn import DepthwiseConv3x3, LayerNorm, Linear, Module
from .ssm import SelectiveSSM
from .tensor import ShapeError, Tensor

MERGE_MODES = ("concat", "sum")

SCAN_STRATEGIES = ("atrous", "csm")

DEFAULT_RATES = (2, 5, 7, 9)


class ChannelGate(Module):
    """Two stacked fully connected layers producing per-channel weights in (0,1)."""

    def __init__(self, channels: int, reduction: int = 4):
        hidden = max(1, channels // reduction)
        self.f1 = Linear(channels, hidden)
        self.f2 = Linear(hidden, channels)

    def __call__(self, pooled: Tensor) -> Tensor:
        return T.sigmoid(self.f2(T.relu(self.f1(pooled))))


def _grouped_sequences(x: Tensor, paths) -> tuple[Tensor, list[int]]:
    """Serialize (B, H, W, C) through every path and stack along a group axis.

    Shorter groups are zero-padded at the tail to the longest length; the
    scan is causal, so trailing pad tokens cannot affect real positions.
    Returns ((B, G, Lmax, C), real lengths per group).
    """
    lengths = [p.length for p in paths]
    lmax = max(lengths)
    stacked = []
    for p in paths:
        seq = S.apply_path_t(p, x)
        if p.length < lmax:
            seq = T.pad_axis(seq, -2, 0, lmax - p.length)
        stacked.append(T.reshape(seq, seq.shape[:-2] + (1,) + seq.shape[-2:]))
    return T.concat(stacked, axis=-3), lengths


class AWSS2D(Module):
    """Atrous-window scan, parallel selective scans, channel-gated merge."""

    def __init__(self, channels: int, rates=DEFAULT_RATES, window_mode: str = "contiguous",
                 state_dim: int = 8, dt_rank: int | None = None, merge_mode: str = "concat",
                 gate_reduction: int = 4, zoh_mode: str = "printed"):
        rates = tuple(int(r) for r in rates)
        if not rates or any(r < 1 for r in rates):
            raise ValueError(f"rates must be positive, got {rates}")
        if list(rates) != sorted(set(rates)):
            raise ValueError(f"rates must be strictly increasing, got {rates}")
        if window_mode not in S.WINDOW_MODES:
            raise ValueError(f"unknown window mode {window_mode!r}")
        if merge_mode not in MERGE_MODES:
            raise ValueError(f"unknown merge mode {merge_mode!r}")
        self.channels = channels
        self.rates = rates
        self.window_mode = window_mode
        self.merge_mode = merge_mode
        self.ssm = SelectiveSSM(channels, state_dim=state_dim, dt_rank=dt_rank,
                                groups=len(rates), zoh_mode=zoh_mode)
        gate_width = channels * len(rates) if merge_mode == "concat" else channels
        self.gate = ChannelGate(gate_width, gate_reduction)
        self.merge_proj = Linear(gate_width, channels)

    def paths(self, height: int, width: int) -> list:
        return [S.atrous_window_path(height, width, r, self.window_mode) for r in self.rates]

    def awscan(self, x: Tensor) -> tuple[Tensor, list]:
        """Step 1: one serialized sequence per rate, stacked (B, G, Lmax, C)."""
        paths = self.paths(x.shape[-3], x.shape[-2])
        seqs, _ = _grouped_sequences(x, paths)
        return seqs, paths

    def parallel_s6(self, seqs: Tensor) -> Tensor:
        """Step 2: every rate group through its own selective scan."""
        return self.ssm.scan(seqs)

    def awsmerge(self, ys: Tensor, paths, height: int, width: int) -> Tensor:
        """Step 3: scatter groups to maps, recalibrate channels, project."""
        if ys.shape[-3] != len(self.rates):
            raise ShapeError(f"awsmerge: got {ys.shape[-3]} groups for {len(self.rates)} rates")
        maps = []
        for gi, p in enumerate(paths):
            seq = T.reshape(T.slice_axis(ys, -3, gi, gi + 1), ys.shape[:-3] + ys.shape[-2:])
            seq = T.slice_axis(seq, -2, 0, p.length)
            maps.append(S.inverse_scatter_t(p, seq))
        if self.merge_mode == "concat":
            fused = T.concat(maps, axis=-1)
        else:
            fused = maps[0]
            for m in maps[1:]:
                fused = T.add(fused, m)
        pooled = T.global_avg_pool(fused)
        gate = self.gate(pooled)
        gated = T.mul(fused, gate)
        return self.merge_proj(gated)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"AWSS2D: expected {self.channels} channels, got {x.shape}")
        h, w = x.shape[-3], x.shape[-2]
        seqs, paths = self.awscan(x)
        ys = self.parallel_s6(seqs)
        return self.awsmerge(ys, paths, h, w)


class CSMSS2D(Module):
    """Cross-scan baseline: four directional scans, summed, projected."""

    def __init__(self, channels: int, state_dim: int = 8, dt_rank: int | None = None,
                 zoh_mode: str = "printed"):
        self.channels = channels
        self.ssm = SelectiveSSM(channels, state_dim=state_dim, dt_rank=dt_rank,
                                groups=4, zoh_mode=zoh_mode)
        self.merge_proj = Linear(channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"CSMSS2D: expected {self.channels} channels, got {x.shape}")
        paths = S.cross_scan_paths(x.shape[-3], x.shape[-2])
        seqs, _ = _grouped_sequences(x, paths)
        ys = self.ssm.scan(seqs)
        fused = None
        for gi, p in enumerate(paths):
            seq = T.reshape(T.slice_axis(ys, -3, gi, gi + 1), ys.shape[:-3] + ys.shape[-2:])
            m = S.inverse_scatter_t(p, seq)
            fused = m if fused is None else T.add(fused, m)
        return self.merge_proj(fused)


class _ResidualScanBlock(Module):
    """Shared wrapper: norm, expand, depthwise conv, inner scan, gate, project."""

    def __init__(self, channels: int, inner: Module, expand: int = 2):
        hidden = channels * expand
        self.norm = LayerNorm(channels)
        self.in_proj = Linear(channels, hidden)
        self.conv = DepthwiseConv3x3(hidden)
        self.inner = inner
        self.gate_proj = Linear(channels, hidden)
        self.out_proj = Linear(hidden, channels)
        self.channels = channels
        self.hidden = hidden

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"block: expected {self.channels} channels, got {x.shape}")
        xn = self.norm(x)
        feat = self.inner(self.conv(self.in_proj(xn)))
        gate = T.silu(self.gate_proj(xn))
        return T.add(x, self.out_proj(T.mul(feat, gate)))


class AWVSSBlock(_ResidualScanBlock):
    """Residual block around AWSS2D."""

    def __init__(self, channels: int, rates=DEFAULT_RATES, window_mode: str = "contiguous",
                 state_dim: int = 8, dt_rank: int | None = None, expand: int = 2,
                 merge_mode: str = "concat", gate_reduction: int = 4, zoh_mode: str = "printed"):
        inner = AWSS2D(channels * expand, rates=rates, window_mode=window_mode,
                       state_dim=state_dim, dt_rank=dt_rank, merge_mode=merge_mode,
                       gate_reduction=gate_reduction, zoh_mode=zoh_mode)
        super().__init__(channels, inner, expand)


class VSSBlock(_ResidualScanBlock):
    """Residual block around the cross-scan baseline."""

    def __init__(self, channels: int, state_dim: int = 8, dt_rank: int | None = None,
                 expand: int = 2, zoh_mode: str = "printed"):
        inner = CSMSS2D(channels * expand, state_dim=state_dim, dt_rank=dt_rank, zoh_mode=zoh_mode)
        super().__init__(channels, inner, expand)


def make_scan_block(strategy: str, channels: int, *, rates=DEFAULT_RATES,
                    window_mode: str = "contiguous", state_dim: int = 8,
                    dt_rank: int | None = None, expand: int = 2,
                    merge_mode: str = "concat", zoh_mode: str = "printed") -> Module:
    if strategy == "atrous":
        return AWVSSBlock(channels, rates=rates, window_mode=window_mode, state_dim=state_dim,
                          dt_rank=dt_rank, expand=expand, merge_mode=merge_mode, zoh_mode=zoh_mode)
    if strategy == "csm":
        return VSSBlock(channels, state_dim=state_dim, dt_rank=dt_rank, expand=expand,
                        zoh_mode=zoh_mode)
    raise ValueError(f"unknown scan strategy {strategy!r}")
