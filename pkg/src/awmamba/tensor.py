"""Dense tensors with reverse-mode automatic differentiation.

Everything in this package flows through the `Tensor` class defined here:
a numpy array plus an optional record of the operation that produced it.
Calling `backward()` on a scalar loss walks that record in reverse
topological order and accumulates gradients into every leaf tensor that
requires them.

Design constraints honored throughout:
  * precision is a process-global switch (float32 for training, float64
    for gradient-check oracles), see `set_default_dtype` / `autocast`;
  * every forward op validates that its output is finite and raises
    `NonFiniteError` otherwise;
  * elementwise broadcasting requires equal ranks (axes of extent 1
    stretch, nothing else), so shape bugs fail loudly;
  * no op parallelizes internally, which keeps reruns bit-identical.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "NonFiniteError",
    "set_default_dtype",
    "default_dtype",
    "autocast",
    "tensor",
    "backward",
    "finite_diff_gradient",
]

_DEFAULT_DTYPE = np.float32


def set_default_dtype(dtype) -> None:
    """Set the global element type for newly created tensors."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def autocast(dtype):
    """Temporarily switch the global default dtype (used by oracle tests)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward operation produces NaN or Inf."""


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """A dense N-d array with an optional autodiff record.

    `data` is always a C-contiguous numpy float array.  `grad`, when
    populated by `backward()`, has the same shape as `data`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.ndarray) and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward_fn = _backward

    # ---- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # ---- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor with a declared initialization recipe.

    `init_spec` is one of
        ("uniform", lo, hi)   fan-in style uniform fill
        ("zeros",)            all zeros (biases)
        ("identity",)         all ones (norm scales)
        ("s4_log", kind)      state-space log-range init; kind is
                              "a_log" (row r gets log(r+1)) or
                              "dt_bias" (softplus-inverse of a log-uniform step)
    Actual values are filled in by `awmamba.nn.init_model`, which derives a
    per-parameter RNG from the model seed and the parameter's path name.
    """

    __slots__ = ("init_spec",)

    def __init__(self, shape: Sequence[int], init_spec: tuple):
        super().__init__(np.zeros(tuple(shape), dtype=_DEFAULT_DTYPE), requires_grad=True)
        self.init_spec = init_spec


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor in the current default dtype."""
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    _check_finite(op, data)
    if any(p.requires_grad or p._parents for p in parents):
        return Tensor(data, _parents=parents, _backward=backward_fn)
    return Tensor(data)


# ---- broadcasting ---------------------------------------------------------------


def _broadcast_shapes(op: str, sa: tuple, sb: tuple) -> tuple:
    """Equal-rank broadcasting: each axis must match or have extent 1.

    Scalars (rank 0) are also accepted on either side.
    """
    if sa == sb:
        return sa
    if sa == ():
        return sb
    if sb == ():
        return sa
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch {sa} vs {sb}")
    out = []
    for a, b in zip(sa, sb):
        if a == b or b == 1:
            out.append(a)
        elif a == 1:
            out.append(b)
        else:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not conform")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise binary ops ------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    shape = _broadcast_shapes("add", a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    del shape
    return _make("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("sub", a.shape, b.shape)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("mul", a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shapes("div", a.shape, b.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", out, (a, b), bwd)


# ---- elementwise unary ops -------------------------------------------------------


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _make("exp", out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make("log", out, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * out),)

    return _make("sqrt", out, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _make("relu", out, (a,), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows; mirror the negative half afterwards
    e = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + e)
    return np.where(x >= 0, pos, 1.0 - pos)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), bwd)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}), stable on both tails
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def bwd(g):
        return (g * _sigmoid(a.data),)

    return _make("softplus", out, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s

    def bwd(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make("silu", out, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through the interior only."""
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * inside,)

    return _make("clip", out, (a,), bwd)


# ---- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """`a (..., M, K) @ b (K, N)`; the weight operand is always 2-D."""
    if b.data.ndim != 2:
        raise ShapeError(f"matmul: weight must be 2-D, got {b.shape}")
    if a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make("matmul", out, (a, b), bwd)


def group_matmul(a: Tensor, w: Tensor) -> Tensor:
    """Per-group matmul: `a (..., G, L, D) @ w (G, D, K) -> (..., G, L, K)`.

    Groups are processed with a plain per-group `np.matmul` so results are
    bit-identical to running each group through `matmul` on its own.
    """
    if w.data.ndim != 3:
        raise ShapeError(f"group_matmul: weight must be (G, D, K), got {w.shape}")
    G, D, K = w.shape
    if a.data.ndim < 3 or a.shape[-3] != G or a.shape[-1] != D:
        raise ShapeError(f"group_matmul: operand {a.shape} does not conform to weight {w.shape}")
    out = np.empty(a.shape[:-1] + (K,), dtype=a.data.dtype)
    src = a.data
    for g_idx in range(G):
        np.matmul(src[..., g_idx, :, :], w.data[g_idx], out=out[..., g_idx, :, :])

    def bwd(g):
        ga = np.empty_like(src)
        gw = np.zeros_like(w.data)
        for i in range(G):
            ga[..., i, :, :] = g[..., i, :, :] @ w.data[i].T
            gw[i] = src[..., i, :, :].reshape(-1, D).T @ g[..., i, :, :].reshape(-1, K)
        return ga, gw

    return _make("group_matmul", out, (a, w), bwd)


# ---- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make("reshape", np.ascontiguousarray(out), (a,), bwd)


def transpose(a: Tensor, perm) -> Tensor:
    perm = tuple(perm)
    out = np.ascontiguousarray(a.data.transpose(perm))
    inv = tuple(np.argsort(perm))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make("transpose", out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), bwd)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice `a[..., start:stop, ...]` along one axis."""
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make("slice_axis", out, (a,), bwd)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list:
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to extent {a.shape[axis]}")
    pieces = []
    ofs = 0
    for s in sizes:
        pieces.append(slice_axis(a, axis, ofs, ofs + s))
        ofs += s
    return pieces


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    if before == 0 and after == 0:
        return a
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(before, before + a.shape[axis])
    idx = tuple(idx)

    def bwd(g):
        return (np.ascontiguousarray(g[idx]),)

    return _make("pad_axis", out, (a,), bwd)


def pad2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the two spatial axes of a (..., H, W, C) tensor."""
    if a.data.ndim < 3:
        raise ShapeError(f"pad2d: expected at least 3 axes, got {a.shape}")
    widths = [(0, 0)] * a.data.ndim
    widths[-3] = (top, bottom)
    widths[-2] = (left, right)
    out = np.pad(a.data, widths)
    idx = [slice(None)] * a.data.ndim
    idx[-3] = slice(top, top + a.shape[-3])
    idx[-2] = slice(left, left + a.shape[-2])
    idx = tuple(idx)

    def bwd(g):
        return (np.ascontiguousarray(g[idx]),)

    return _make("pad2d", out, (a,), bwd)


def crop2d(a: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Slice rows [top:bottom) and columns [left:right) of (..., H, W, C)."""
    if a.data.ndim < 3:
        raise ShapeError(f"crop2d: expected at least 3 axes, got {a.shape}")
    H, W = a.shape[-3], a.shape[-2]
    if not (0 <= top <= bottom <= H and 0 <= left <= right <= W):
        raise ShapeError(f"crop2d: window ({top}:{bottom}, {left}:{right}) exceeds ({H}, {W})")
    idx = [slice(None)] * a.data.ndim
    idx[-3] = slice(top, bottom)
    idx[-2] = slice(left, right)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make("crop2d", out, (a,), bwd)


# ---- gather / scatter ------------------------------------------------------------


def gather_tokens(a: Tensor, index: np.ndarray, unique: bool = True) -> Tensor:
    """Select rows along the token axis: `a (..., P, C)[..., index, :]`.

    `index` is a 1-D integer list; `unique=True` asserts it has no repeats,
    which allows the fast scatter-add path in the backward pass.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ShapeError(f"gather_tokens: index must be 1-D, got {index.shape}")
    P = a.shape[-2]
    if index.size and (index.min() < 0 or index.max() >= P):
        raise ShapeError(f"gather_tokens: index out of range for {P} tokens")
    out = np.ascontiguousarray(np.take(a.data, index, axis=-2))

    def bwd(g):
        full = np.zeros_like(a.data)
        if unique:
            full[..., index, :] = g
        else:
            np.add.at(full, (..., index, slice(None)), g)
        return (full,)

    return _make("gather_tokens", out, (a,), bwd)


def scatter_tokens(a: Tensor, index: np.ndarray, num_tokens: int) -> Tensor:
    """Place rows at positions `index` of a zero (..., num_tokens, C) tensor.

    `index` must be injective (every target written at most once); the exact
    inverse of `gather_tokens` when the index list is a permutation.
    """
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1 or index.size != a.shape[-2]:
        raise ShapeError(f"scatter_tokens: index length {index.shape} vs {a.shape[-2]} tokens")
    if index.size and (index.min() < 0 or index.max() >= num_tokens):
        raise ShapeError(f"scatter_tokens: index out of range for {num_tokens} tokens")
    if np.unique(index).size != index.size:
        raise ShapeError("scatter_tokens: index list has repeats")
    out = np.zeros(a.shape[:-2] + (num_tokens, a.shape[-1]), dtype=a.data.dtype)
    out[..., index, :] = a.data

    def bwd(g):
        return (np.ascontiguousarray(np.take(g, index, axis=-2)),)

    return _make("scatter_tokens", out, (a,), bwd)


# ---- reductions ------------------------------------------------------------------


def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(ax % ndim for ax in axes))


def sum_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype, copy=True),)

    return _make("sum", np.asarray(out), (a,), bwd)


def mean_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        return ((np.broadcast_to(gg, a.shape) / count).astype(a.data.dtype, copy=True),)

    return _make("mean", np.asarray(out), (a,), bwd)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the spatial axes of (..., H, W, C), keeping them as size 1."""
    if a.data.ndim < 3:
        raise ShapeError(f"global_avg_pool: expected at least 3 axes, got {a.shape}")
    return mean_axes(a, axes=(a.data.ndim - 3, a.data.ndim - 2), keepdims=True)


# ---- normalization / activation maps ---------------------------------------------


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing channel axis, then scale and shift."""
    C = a.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: scale/shift must be ({C},), got {gamma.shape}/{beta.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gb = g.reshape(-1, C).sum(axis=0)
        gg = (g * xhat).reshape(-1, C).sum(axis=0)
        gx_hat = g * gamma.data
        # d/dx of (x - mu) * inv with mu, inv functions of x
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        gx = (gx_hat - m1 - xhat * m2) * inv
        return gx, gg, gb

    return _make("layer_norm", out, (a, gamma, beta), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make("softmax", out, (a,), bwd)


# ---- convolution and resampling ---------------------------------------------------


def depthwise_conv3x3(a: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 depthwise convolution over (..., H, W, C), zero ('same') padding.

    `w` has shape (3, 3, C); each channel is filtered independently.
    """
    if w.shape[:2] != (3, 3) or w.shape[2] != a.shape[-1]:
        raise ShapeError(f"depthwise_conv3x3: kernel {w.shape} does not match input {a.shape}")
    widths = [(0, 0)] * a.data.ndim
    widths[-3] = (1, 1)
    widths[-2] = (1, 1)
    xp = np.pad(a.data, widths)
    H, W = a.shape[-3], a.shape[-2]
    out = np.zeros_like(a.data)
    for dy in range(3):
        for dx in range(3):
            out += xp[..., dy : dy + H, dx : dx + W, :] * w.data[dy, dx]
    if b is not None:
        if b.shape != (a.shape[-1],):
            raise ShapeError(f"depthwise_conv3x3: bias {b.shape} vs channels {a.shape[-1]}")
        out = out + b.data

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for dy in range(3):
            for dx in range(3):
                gxp[..., dy : dy + H, dx : dx + W, :] += g * w.data[dy, dx]
                gw[dy, dx] = (xp[..., dy : dy + H, dx : dx + W, :] * g).reshape(-1, a.shape[-1]).sum(axis=0)
        gx = np.ascontiguousarray(gxp[..., 1 : 1 + H, 1 : 1 + W, :])
        if b is None:
            return gx, gw
        gb = g.reshape(-1, a.shape[-1]).sum(axis=0)
        return gx, gw, gb

    parents = (a, w) if b is None else (a, w, b)
    return _make("depthwise_conv3x3", out, parents, bwd)


def _bilinear_matrix(n_in: int, dtype) -> np.ndarray:
    """Row-stochastic (2n x n) matrix realizing bilinear x2 interpolation."""
    n_out = 2 * n_in
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        s = (i + 0.5) / 2.0 - 0.5
        s = min(max(s, 0.0), float(n_in - 1))
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        frac = s - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


def upsample2x_bilinear(a: Tensor) -> Tensor:
    """Double both spatial extents of (..., H, W, C) with bilinear weights."""
    if a.data.ndim < 3:
        raise ShapeError(f"upsample2x_bilinear: expected at least 3 axes, got {a.shape}")
    H, W = a.shape[-3], a.shape[-2]
    mh = _bilinear_matrix(H, a.data.dtype)
    mw = _bilinear_matrix(W, a.data.dtype)
    tmp = np.einsum("ih,...hwc->...iwc", mh, a.data)
    out = np.ascontiguousarray(np.einsum("jw,...iwc->...ijc", mw, tmp))

    def bwd(g):
        t = np.einsum("jw,...ijc->...iwc", mw, g)
        return (np.ascontiguousarray(np.einsum("ih,...iwc->...hwc", mh, t)),)

    return _make("upsample2x_bilinear", out, (a,), bwd)


# ---- backward engine ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable grad leaf.

    `loss` must be a scalar.  Repeated calls accumulate; call `zero_grad`
    on the leaves (or the optimizer) between steps.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and (p.requires_grad or p._parents):
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is not None:
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if not (p.requires_grad or p._parents):
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + np.broadcast_to(g, node.data.shape)


def finite_diff_gradient(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float | None = None) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / 2h.

    `f` must be deterministic and pure.  Returns an array shaped like `x`.
    The default step is 1e-3 in float32 and 1e-6 in float64.
    """
    if h is None:
        h = 1e-6 if x.data.dtype == np.float64 else 1e-3
    if h <= 0:
        raise ValueError("finite_diff_gradient: h must be positive")

    def _eval(arr: np.ndarray) -> float:
        r = f(Tensor(arr))
        return float(r.data) if isinstance(r, Tensor) else float(r)

    base = x.data.astype(x.data.dtype, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _eval(base)
        flat[i] = orig - h
        fm = _eval(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
