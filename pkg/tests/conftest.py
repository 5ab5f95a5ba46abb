import numpy as np
import pytest

import awmamba.tensor as T
from awmamba.tensor import Tensor


@pytest.fixture
def f64():
    """Run a test under float64 (the oracle precision)."""
    with T.autocast(np.float64):
        yield


def rel_err(got: np.ndarray, want: np.ndarray, floor: float = 1e-8) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(np.abs(got).max(initial=0.0), np.abs(want).max(initial=0.0), floor)
    return float(np.abs(got - want).max(initial=0.0) / scale)


def module_gradcheck(module, shape, rng, n_param_coords=4):
    """Worst |backward - central difference| over the gradient vector of a
    callable module, normalized by the gradient's global scale.

    The input gradient is checked densely and parameter gradients on
    sampled coordinates; everything is pooled into one relative error so
    that near-dead coordinates (true gradient below the finite-difference
    noise floor eps * |loss| / h) do not inflate the result.
    """
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    out_shape = module(Tensor(np.zeros(shape))).shape
    probe = Tensor(rng.normal(size=out_shape))

    def loss_fn(v):
        return T.sum_axes(T.mul(module(v), probe))

    x.grad = None
    module.zero_grad()
    loss_fn(x).backward()
    fd = T.finite_diff_gradient(loss_fn, x)
    diffs = [np.abs(x.grad - fd).max()]
    scales = [np.abs(x.grad).max(), np.abs(fd).max()]

    params = list(module.named_parameters())
    picks = rng.choice(len(params), size=min(n_param_coords, len(params)), replace=False)
    for name, p in [params[i] for i in picks]:
        flat = p.data.reshape(-1)
        coord = int(rng.integers(0, flat.size))
        h = 1e-6
        saved = flat[coord]
        flat[coord] = saved + h
        fp = float(loss_fn(x).data)
        flat[coord] = saved - h
        fm = float(loss_fn(x).data)
        flat[coord] = saved
        fd_c = (fp - fm) / (2 * h)
        got = p.grad.reshape(-1)[coord]
        diffs.append(abs(got - fd_c))
        scales.extend([abs(got), abs(fd_c)])
    return max(diffs) / max(max(scales), 1e-8)
