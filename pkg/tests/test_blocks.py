import numpy as np
import pytest

import awmamba.tensor as T
from awmamba import nn, scan as S, ssm
from awmamba.blocks import AWSS2D, AWVSSBlock, CSMSS2D, ChannelGate, VSSBlock, make_scan_block
from awmamba.tensor import Tensor

from conftest import rel_err

TINY = dict(rates=(1, 2), state_dim=2, dt_rank=1)


def _zero_all(module):
    for _, p in module.named_parameters():
        p.data = np.zeros_like(p.data)


def test_awscan_rate1_is_raster(f64):
    inner = AWSS2D(3, rates=(1,), state_dim=2)
    nn.init_model(inner, 0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 4, 3)))
    seqs, paths = inner.awscan(x)
    assert len(paths) == 1 and paths[0].rate == 1
    raster = x.data.reshape(2, 12, 3)
    assert np.array_equal(seqs.data[:, 0], raster)


def test_awscan_constant_input(f64):
    inner = AWSS2D(2, rates=(2, 3), state_dim=2)
    nn.init_model(inner, 0)
    x = Tensor(np.full((1, 6, 6, 2), 1.5))
    seqs, paths = inner.awscan(x)
    for gi, p in enumerate(paths):
        assert not p.padded
        assert np.all(seqs.data[:, gi, : p.length] == 1.5)


def test_awscan_group_lengths(f64):
    inner = AWSS2D(2, rates=(2, 5, 7, 9), state_dim=2)
    nn.init_model(inner, 0)
    paths = inner.paths(10, 10)
    assert [p.length for p in paths] == [100, 100, 196, 324]


def test_parallel_s6_group_independence(f64):
    inner = AWSS2D(3, rates=(1, 2, 3), state_dim=3)
    nn.init_model(inner, 3)
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(2, 6, 6, 3)))
    seqs, paths = inner.awscan(x)
    base = inner.parallel_s6(seqs).data

    zeroed = seqs.data.copy()
    zeroed[:, 1] = 0.0
    out = inner.parallel_s6(Tensor(zeroed)).data
    assert np.array_equal(out[:, 0], base[:, 0])
    assert np.array_equal(out[:, 2], base[:, 2])
    assert not np.array_equal(out[:, 1], base[:, 1])


def test_parallel_s6_matches_per_group_scan_bitwise(f64):
    """Stacked evaluation equals running each group's scan on its own."""
    inner = AWSS2D(3, rates=(2, 3), state_dim=4)
    nn.init_model(inner, 4)
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 5, 4, 3)))
    seqs, paths = inner.awscan(x)
    stacked = inner.parallel_s6(seqs).data

    for gi, p in enumerate(paths):
        single = ssm.SelectiveSSM(3, state_dim=4, dt_rank=inner.ssm.dt_rank, groups=1)
        for (_, dst), (_, src) in zip(single.named_parameters(), inner.ssm.named_parameters()):
            dst.data = src.data[gi : gi + 1].copy() if src.data.shape[0] == len(paths) else src.data.copy()
        seq_g = Tensor(seqs.data[:, gi])
        y = single(seq_g).data
        assert np.array_equal(y[:, : p.length], stacked[:, gi, : p.length]), f"group {gi}"


def test_awsmerge_constant_pool(f64):
    inner = AWSS2D(2, rates=(1, 2), state_dim=2)
    nn.init_model(inner, 5)
    consts = [3.0, -1.5]
    h = w = 4
    paths = inner.paths(h, w)
    maps = [np.full((1, h, w, 2), c) for c in consts]
    seqs = [S.apply_path(p, m) for p, m in zip(paths, maps)]
    pooled = T.global_avg_pool(T.concat([Tensor(m) for m in maps], axis=-1))
    assert np.allclose(pooled.data.reshape(-1), [3.0, 3.0, -1.5, -1.5])


def test_gate_saturation_makes_recalibration_identity(f64):
    gate = ChannelGate(8, reduction=4)
    nn.init_model(gate, 6)
    gate.f2.w.data = np.zeros_like(gate.f2.w.data)
    gate.f2.b.data = np.full_like(gate.f2.b.data, 1e3)
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 4, 4, 8)))
    v = gate(T.global_avg_pool(x))
    gated = T.mul(x, v)
    assert np.abs(gated.data - x.data).max() < 1e-6


def test_gate_range_open_interval(f64):
    gate = ChannelGate(6)
    nn.init_model(gate, 7)
    rng = np.random.default_rng(4)
    v = gate(Tensor(rng.normal(size=(3, 1, 1, 6)) * 5))
    assert np.all(v.data > 0.0) and np.all(v.data < 1.0)


def _block_gradcheck(block, shape, rng, n_param_coords=4):
    """Worst-case |backward - central difference| over the gradient vector,
    normalized by the gradient's global scale.

    The loss gradient is treated as one object spanning the input and the
    sampled parameter coordinates; per-coordinate normalization would
    amplify finite-difference roundoff on near-dead coordinates (whose
    true gradients sit below eps * |loss| / h).
    """
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    probe = Tensor(rng.normal(size=shape))

    def loss_fn(v):
        return T.sum_axes(T.mul(block(v), probe))

    x.grad = None
    block.zero_grad()
    loss_fn(x).backward()
    fd = T.finite_diff_gradient(loss_fn, x)
    diffs = [np.abs(x.grad - fd).max()]
    scales = [np.abs(x.grad).max(), np.abs(fd).max()]

    params = list(block.named_parameters())
    for name, p in [params[i] for i in rng.choice(len(params), size=min(n_param_coords, len(params)), replace=False)]:
        flat = p.data.reshape(-1)
        coord = int(rng.integers(0, flat.size))
        h = 1e-6

        def eval_at(v):
            saved = flat[coord]
            flat[coord] = v
            try:
                return float(loss_fn(x).data)
            finally:
                flat[coord] = saved

        fd_c = (eval_at(flat[coord] + h) - eval_at(flat[coord] - h)) / (2 * h)
        got = p.grad.reshape(-1)[coord]
        diffs.append(abs(got - fd_c))
        scales.extend([abs(got), abs(fd_c)])
    return max(diffs) / max(max(scales), 1e-8)


def test_awsmerge_full_gradient(f64):
    rng = np.random.default_rng(8)
    inner = AWSS2D(4, rates=(1, 2), state_dim=2, dt_rank=1)
    nn.init_model(inner, 8)
    assert _block_gradcheck(inner, (2, 4, 4, 4), rng, n_param_coords=8) < 1e-6


def test_awvss_zero_weights_is_identity(f64):
    block = AWVSSBlock(3, **TINY)
    _zero_all(block)
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    assert np.array_equal(block(x).data, x.data)


def test_vss_zero_weights_is_identity(f64):
    block = VSSBlock(3, state_dim=2, dt_rank=1)
    _zero_all(block)
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(2, 4, 4, 3)))
    assert np.array_equal(block(x).data, x.data)


@pytest.mark.parametrize("h,w", [(4, 4), (7, 7), (10, 4), (4, 10)])
@pytest.mark.parametrize("c", [4, 8])
def test_block_shape_preservation(h, w, c):
    rng = np.random.default_rng(h * 100 + w * 10 + c)
    for strategy in ("atrous", "csm"):
        block = make_scan_block(strategy, c, rates=(2, 5, 7, 9), state_dim=2)
        nn.init_model(block, 11)
        x = Tensor(rng.normal(size=(1, h, w, c)).astype(np.float32))
        assert block(x).shape == (1, h, w, c)


def test_awvss_gradient(f64):
    rng = np.random.default_rng(12)
    block = AWVSSBlock(2, **TINY)
    nn.init_model(block, 12)
    assert _block_gradcheck(block, (1, 4, 6, 2), rng, n_param_coords=6) < 1e-6


def test_vss_gradient(f64):
    rng = np.random.default_rng(13)
    block = VSSBlock(2, state_dim=2, dt_rank=1)
    nn.init_model(block, 13)
    assert _block_gradcheck(block, (1, 4, 4, 2), rng, n_param_coords=6) < 1e-6


def test_sum_merge_mode(f64):
    block = AWVSSBlock(3, rates=(1, 2), state_dim=2, dt_rank=1, merge_mode="sum")
    nn.init_model(block, 14)
    rng = np.random.default_rng(14)
    x = Tensor(rng.normal(size=(1, 4, 4, 3)))
    assert block(x).shape == (1, 4, 4, 3)
    assert block.inner.gate.f1.w.shape[0] == 6  # gate sized for one group's channels


def test_awss2d_config_validation():
    with pytest.raises(ValueError):
        AWSS2D(4, rates=())
    with pytest.raises(ValueError):
        AWSS2D(4, rates=(2, 2))
    with pytest.raises(ValueError):
        AWSS2D(4, rates=(5, 2))
    with pytest.raises(ValueError):
        AWSS2D(4, rates=(2,), window_mode="bogus")
    with pytest.raises(ValueError):
        AWSS2D(4, rates=(2,), merge_mode="bogus")
    with pytest.raises(ValueError):
        make_scan_block("bogus", 4)


def test_group_execution_order_invariance(f64):
    """Evaluating groups in any order gives bit-identical merged output."""
    inner = AWSS2D(2, rates=(1, 2, 3), state_dim=2, dt_rank=1)
    nn.init_model(inner, 15)
    rng = np.random.default_rng(15)
    x = Tensor(rng.normal(size=(1, 6, 6, 2)))
    seqs, paths = inner.awscan(x)
    fwd = inner.parallel_s6(seqs).data

    # reversed evaluation order, then un-reverse
    rev = Tensor(np.ascontiguousarray(seqs.data[:, ::-1]))
    inner_rev = AWSS2D(2, rates=(1, 2, 3), state_dim=2, dt_rank=1)
    nn.init_model(inner_rev, 15)
    for (_, dst), (_, src) in zip(inner_rev.ssm.named_parameters(), inner.ssm.named_parameters()):
        dst.data = np.ascontiguousarray(src.data[::-1]) if dst.data.shape[0] == 3 else src.data
    back = inner_rev.parallel_s6(rev).data[:, ::-1]
    assert np.array_equal(back, fwd)
