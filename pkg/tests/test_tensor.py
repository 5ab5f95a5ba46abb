import numpy as np
import pytest

import awmamba.tensor as T
from awmamba import nn
from awmamba.checkpoint import CheckpointError, load_into_model, read_checkpoint, save_checkpoint
from awmamba.optim import AdamW
from awmamba.tensor import NonFiniteError, ShapeError, Tensor

from conftest import rel_err


def test_sigmoid_softplus_anchors(f64):
    assert T.sigmoid(T.tensor(0.0)).item() == pytest.approx(0.5)
    assert T.softplus(T.tensor(0.0)).item() == pytest.approx(np.log(2.0), rel=1e-12)


def test_gather_raster_order(f64):
    x = T.tensor([[1.0, 2.0], [3.0, 4.0]]).data.reshape(1, 4, 1)
    seq = T.gather_tokens(Tensor(x), np.arange(4))
    assert seq.data.reshape(-1).tolist() == [1.0, 2.0, 3.0, 4.0]


def test_backward_sum_of_squares(f64):
    w = T.tensor([1.0, 2.0], requires_grad=True)
    T.sum_axes(T.mul(w, w)).backward()
    assert np.allclose(w.grad, [2.0, 4.0])


def test_backward_sigmoid_at_zero(f64):
    x = T.tensor(0.0, requires_grad=True)
    T.sigmoid(x).backward()
    assert x.grad == pytest.approx(0.25)


def test_backward_accumulates(f64):
    w = T.tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        T.sum_axes(T.mul(w, w)).backward()
    assert np.allclose(w.grad, [4.0, 8.0])
    w.zero_grad()
    assert w.grad is None


def test_backward_rejects_nonscalar(f64):
    w = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.mul(w, w).backward()


def test_finite_diff_anchors(f64):
    g = T.finite_diff_gradient(lambda t: T.sum_axes(T.mul(t, t)), T.tensor([3.0]))
    assert g == pytest.approx([6.0], rel=1e-9)
    g = T.finite_diff_gradient(lambda t: T.exp(t), T.tensor(0.0))
    assert float(g) == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(ValueError):
        T.finite_diff_gradient(lambda t: T.exp(t), T.tensor(0.0), h=-1.0)


def _gradcheck(build, x: Tensor, tol: float = 1e-6) -> float:
    """Compare backward() against the finite-difference oracle on x."""
    x.grad = None
    build(x).backward()
    fd = T.finite_diff_gradient(lambda v: build(v), x)
    return rel_err(x.grad, fd)


def _weight(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=False)


UNARY_OPS = [
    ("relu", lambda x: T.relu(x), "offset"),
    ("sigmoid", lambda x: T.sigmoid(x), None),
    ("softplus", lambda x: T.softplus(x), None),
    ("silu", lambda x: T.silu(x), None),
    ("exp", lambda x: T.exp(x), None),
    ("log", lambda x: T.log(x), "positive"),
    ("sqrt", lambda x: T.sqrt(x), "positive"),
    ("neg", lambda x: T.neg(x), None),
    ("clip", lambda x: T.clip(x, -0.8, 0.8), "offset"),
    ("softmax", lambda x: T.softmax(x), None),
    ("reshape", lambda x: T.reshape(x, (x.size,)), None),
    ("transpose", lambda x: T.transpose(x, (2, 0, 1, 3)), None),
    ("mean", lambda x: T.mean_axes(x, axes=(1, 2)), None),
    ("sum", lambda x: T.sum_axes(x, axes=(0, 3), keepdims=True), None),
    ("gap", lambda x: T.global_avg_pool(x), None),
    ("pad2d", lambda x: T.pad2d(x, 1, 2, 0, 1), None),
    ("crop2d", lambda x: T.crop2d(x, 1, 3, 0, 2), None),
    ("slice", lambda x: T.slice_axis(x, 1, 1, 3), None),
    ("pad_axis", lambda x: T.pad_axis(x, 2, 1, 1), None),
    ("upsample", lambda x: T.upsample2x_bilinear(x), None),
]


@pytest.mark.parametrize("name,op,domain", UNARY_OPS, ids=[o[0] for o in UNARY_OPS])
def test_unary_op_gradients(f64, name, op, domain):
    rng = np.random.default_rng(hash(name) % 2**32)
    worst = 0.0
    for trial in range(20):
        arr = rng.normal(size=(2, 3, 4, 3))
        if domain == "positive":
            arr = np.abs(arr) + 0.5
        elif domain == "offset":
            arr = arr + np.where(arr >= 0, 0.25, -0.25)  # keep away from kinks
        x = Tensor(arr, requires_grad=True)
        probe = _weight(rng, op(x).shape)
        worst = max(worst, _gradcheck(lambda v: T.sum_axes(T.mul(op(v), probe)), x))
    assert worst < 1e-6


def test_binary_op_gradients(f64):
    rng = np.random.default_rng(0)
    ops = [T.add, T.sub, T.mul, T.div]
    for op in ops:
        for _ in range(20):
            a = Tensor(rng.normal(size=(2, 3)) + 3.0, requires_grad=True)
            b = Tensor(rng.normal(size=(2, 3)) + 3.0, requires_grad=True)
            probe = _weight(rng, (2, 3))
            for t in (a, b):
                t.grad = None
            T.sum_axes(T.mul(op(a, b), probe)).backward()
            fd_a = T.finite_diff_gradient(lambda v: T.sum_axes(T.mul(op(v, b), probe)), a)
            fd_b = T.finite_diff_gradient(lambda v: T.sum_axes(T.mul(op(a, v), probe)), b)
            assert rel_err(a.grad, fd_a) < 1e-6
            assert rel_err(b.grad, fd_b) < 1e-6


def test_matmul_and_group_matmul_gradients(f64):
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        probe = _weight(rng, (2, 4, 5))
        x.grad = w.grad = None
        T.sum_axes(T.mul(T.matmul(x, w), probe)).backward()
        assert rel_err(x.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.matmul(v, w), probe)), x)) < 1e-6
        assert rel_err(w.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.matmul(x, v), probe)), w)) < 1e-6

    for _ in range(20):
        x = Tensor(rng.normal(size=(2, 3, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 5)), requires_grad=True)
        probe = _weight(rng, (2, 3, 4, 5))
        x.grad = w.grad = None
        T.sum_axes(T.mul(T.group_matmul(x, w), probe)).backward()
        assert rel_err(x.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.group_matmul(v, w), probe)), x)) < 1e-6
        assert rel_err(w.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.group_matmul(x, v), probe)), w)) < 1e-6


def test_structural_op_gradients(f64):
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 2, 2)), requires_grad=True)
        probe = _weight(rng, (2, 5, 2))
        a.grad = b.grad = None
        T.sum_axes(T.mul(T.concat([a, b], axis=1), probe)).backward()
        assert rel_err(a.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.concat([v, b], axis=1), probe)), a)) < 1e-6
        assert rel_err(b.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.concat([a, v], axis=1), probe)), b)) < 1e-6

    idx = np.array([3, 0, 2])
    for _ in range(10):
        x = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        probe = _weight(rng, (2, 3, 3))
        assert _gradcheck(lambda v: T.sum_axes(T.mul(T.gather_tokens(v, idx), probe)), x) < 1e-6
        seq = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        probe2 = _weight(rng, (2, 5, 3))
        assert _gradcheck(lambda v: T.sum_axes(T.mul(T.scatter_tokens(v, idx, 5), probe2)), seq) < 1e-6


def test_layer_norm_gradients(f64):
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        g = Tensor(rng.normal(size=(4,)) + 1.5, requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        probe = _weight(rng, (2, 3, 4))
        for t in (x, g, b):
            t.grad = None
        T.sum_axes(T.mul(T.layer_norm(x, g, b), probe)).backward()
        assert rel_err(x.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.layer_norm(v, g, b), probe)), x)) < 1e-6
        assert rel_err(g.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.layer_norm(x, v, b), probe)), g)) < 1e-6
        assert rel_err(b.grad, T.finite_diff_gradient(
            lambda v: T.sum_axes(T.mul(T.layer_norm(x, g, v), probe)), b)) < 1e-6


def test_depthwise_conv_gradients(f64):
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = Tensor(rng.normal(size=(2, 4, 5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        probe = _weight(rng, (2, 4, 5, 3))
        for t in (x, w, b):
            t.grad = None
        T.sum_axes(T.mul(T.depthwise_conv3x3(x, w, b), probe)).backward()
        for t, rebuild in ((x, lambda v: T.depthwise_conv3x3(v, w, b)),
                           (w, lambda v: T.depthwise_conv3x3(x, v, b)),
                           (b, lambda v: T.depthwise_conv3x3(x, w, v))):
            fd = T.finite_diff_gradient(lambda v: T.sum_axes(T.mul(rebuild(v), probe)), t)
            assert rel_err(t.grad, fd) < 1e-6


def test_linearity_of_linear_ops(f64):
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(3, 4)))
    dw = Tensor(rng.normal(size=(3, 3, 3)))
    x = Tensor(rng.normal(size=(2, 5, 5, 3)))
    y = Tensor(rng.normal(size=(2, 5, 5, 3)))
    alpha, beta = 0.7, -1.3
    mix = Tensor(alpha * x.data + beta * y.data)
    for f in (lambda v: T.matmul(v, w),
              lambda v: T.depthwise_conv3x3(v, dw),
              lambda v: T.upsample2x_bilinear(v)):
        combo = alpha * f(x).data + beta * f(y).data
        assert rel_err(f(mix).data, combo) < 1e-6
    # add is linear jointly in both operands
    got = T.add(mix, Tensor(alpha * y.data + beta * x.data)).data
    want = alpha * T.add(x, y).data + beta * T.add(y, x).data
    assert rel_err(got, want) < 1e-6


def test_gather_scatter_bijection_identity(f64):
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(2, 7, 3)))
    perm = rng.permutation(7)
    seq = T.gather_tokens(x, perm)
    back = T.scatter_tokens(seq, perm, 7)
    assert np.array_equal(back.data, x.data)


def test_determinism_bit_identical(f64):
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 4, 4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        y = T.layer_norm(T.matmul(T.silu(x), w),
                         Tensor(np.ones(3)), Tensor(np.zeros(3)))
        loss = T.mean_axes(T.mul(y, y))
        loss.backward()
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a = run()
    b = run()
    for va, vb in zip(a, b):
        assert np.array_equal(va, vb)


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3, 4), dtype=np.float32))
    b = Tensor(np.ones((1, 1, 4), dtype=np.float32))
    assert T.add(a, b).shape == (2, 3, 4)
    assert T.mul(a, Tensor(np.float32(2.0))).shape == (2, 3, 4)
    with pytest.raises(ShapeError, match="add"):
        T.add(a, Tensor(np.ones((3, 4), dtype=np.float32)))
    with pytest.raises(ShapeError, match=r"\(2, 3, 4\)"):
        T.add(a, Tensor(np.ones((2, 3, 5), dtype=np.float32)))
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(a, Tensor(np.ones((5, 2), dtype=np.float32)))


def test_nonfinite_detection():
    with pytest.raises(NonFiniteError, match="exp"):
        T.exp(Tensor(np.array([1000.0], dtype=np.float32)))
    with pytest.raises(NonFiniteError, match="log"):
        T.log(Tensor(np.array([-1.0], dtype=np.float32)))


def test_clip_gradient_mask(f64):
    x = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    T.sum_axes(T.clip(x, -1.0, 1.0)).backward()
    assert np.allclose(x.grad, [0.0, 1.0, 0.0])


def test_precision_switch():
    with T.autocast(np.float64):
        assert T.tensor([1.0]).dtype == np.float64
    assert T.tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        T.set_default_dtype(np.int32)


# ---- optimizer -----------------------------------------------------------------


class _OneParam(nn.Module):
    def __init__(self, value):
        self.p = nn.Parameter((1,), ("zeros",))
        self.p.data = np.array([value], dtype=np.float32)


def test_adamw_zero_grad_zero_decay_is_identity():
    m = _OneParam(1.0)
    opt = AdamW(list(m.named_parameters()), lr=1e-4, weight_decay=0.0)
    m.p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert m.p.data[0] == pytest.approx(1.0, abs=0.0)


def test_adamw_first_step_unit_gradient():
    m = _OneParam(1.0)
    opt = AdamW(list(m.named_parameters()), lr=1e-4, weight_decay=0.0)
    m.p.grad = np.ones(1, dtype=np.float32)
    opt.step()
    # bias-corrected m_hat / sqrt(v_hat) is exactly 1 on step one
    assert m.p.data[0] == pytest.approx(1.0 - 1e-4, rel=1e-6)
    assert opt.step_count == 1


def test_adamw_pure_decoupled_decay():
    m = _OneParam(1.0)
    opt = AdamW(list(m.named_parameters()), lr=1e-4, weight_decay=5e-3)
    m.p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert m.p.data[0] == pytest.approx(1.0 - 5e-7, rel=1e-9)


def test_adamw_requires_gradients():
    m = _OneParam(1.0)
    opt = AdamW(list(m.named_parameters()))
    with pytest.raises(ValueError, match="no gradient"):
        opt.step()


def test_adamw_step_overflow_guard():
    m = _OneParam(1.0)
    opt = AdamW(list(m.named_parameters()))
    opt.step_count = AdamW.MAX_STEPS
    m.p.grad = np.zeros(1, dtype=np.float32)
    with pytest.raises(OverflowError):
        opt.step()


# ---- checkpoint ----------------------------------------------------------------


class _TwoParams(nn.Module):
    def __init__(self):
        self.fc = nn.Linear(3, 2)
        self.scale = nn.Parameter((2,), ("identity",))


def test_checkpoint_round_trip(tmp_path):
    m = _TwoParams()
    nn.init_model(m, 42)
    path = tmp_path / "model.awmb"
    save_checkpoint(path, m.named_parameters())

    m2 = _TwoParams()
    nn.init_model(m2, 7)
    load_into_model(path, m2)
    for (n1, p1), (n2, p2) in zip(m.named_parameters(), m2.named_parameters()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)

    stored = read_checkpoint(path)
    assert set(stored) == {name for name, _ in m.named_parameters()}


def test_checkpoint_validates_names_and_shapes(tmp_path):
    m = _TwoParams()
    nn.init_model(m, 0)
    path = tmp_path / "model.awmb"
    save_checkpoint(path, m.named_parameters())

    class Different(nn.Module):
        def __init__(self):
            self.fc = nn.Linear(3, 2)

    with pytest.raises(CheckpointError, match="unexpected parameter"):
        load_into_model(path, Different())

    class WrongShape(nn.Module):
        def __init__(self):
            self.fc = nn.Linear(3, 3)
            self.scale = nn.Parameter((2,), ("identity",))

    with pytest.raises(CheckpointError, match="shape mismatch.*fc"):
        load_into_model(path, WrongShape())


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.awmb"
    path.write_bytes(b"NOPE" + b"\0" * 8)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)


def test_init_is_name_keyed_not_order_keyed():
    class A(nn.Module):
        def __init__(self):
            self.first = nn.Linear(4, 4, bias=False)
            self.second = nn.Linear(4, 4, bias=False)

    class B(nn.Module):
        def __init__(self):
            self.second = nn.Linear(4, 4, bias=False)
            self.first = nn.Linear(4, 4, bias=False)

    a, b = A(), B()
    nn.init_model(a, 123)
    nn.init_model(b, 123)
    assert np.array_equal(a.first.w.data, b.first.w.data)
    assert np.array_equal(a.second.w.data, b.second.w.data)
    assert not np.array_equal(a.first.w.data, a.second.w.data)
