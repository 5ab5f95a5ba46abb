"""State space kernels.

Three layers of machinery live here:

  * time-invariant reference kernels on plain numpy arrays
    (`discretize_zoh`, `recurrence_scan`, `kernel_convolution`), used as
    oracles and for the equivalence properties;
  * a fused, differentiable recurrence primitive
    (`selective_recurrence`) that runs the per-token scan for a whole
    batch and all scan groups at once;
  * the `SelectiveSSM` module mapping token sequences to input-dependent
    step sizes and state projections, built on that primitive.

The hidden update per token is h_t = Abar_t * h_{t-1} + Bbar_t * u_t with
diagonal Abar, and the readout is y_t = <C_t, h_t>.  Discretization uses
the zero-order-hold closed form Abar = exp(dt * a),
Bbar = (dt*a)^{-1} (exp(dt*a) - 1) * dt * b, with a power-series branch
for |dt*a| below 1e-6 where the closed form cancels catastrophically.
A simplified variant Bbar = dt * b is available behind `zoh_mode`.

The fused primitive evaluates transcendentals with vectorized numpy and
runs the recurrence plus gradient assembly in jitted single-thread loops
(plain numpy fallback when numba is unavailable); both paths share the
fixed per-state accumulation order, so reruns are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

from . import tensor as T
from .nn import Linear, Module, Parameter, uniform_param
from .tensor import ShapeError, Tensor

SERIES_THRESHOLD = 1e-6

ZOH_MODES = ("printed", "simplified")


# ---- zero-order hold helpers ------------------------------------------------------


def phi(x: np.ndarray, force: str | None = None) -> np.ndarray:
    """(exp(x) - 1) / x with a series branch near zero.

    `force` pins the branch ("closed" or "series") for oracle comparisons.
    """
    x = np.asarray(x)
    if force == "closed":
        return np.expm1(x) / x
    series = 1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0
    if force == "series":
        return series
    small = np.abs(x) < SERIES_THRESHOLD
    if not small.any():
        return np.expm1(x) / x
    safe = np.where(small, 1.0, x)
    return np.where(small, series, np.expm1(safe) / safe)


def phi_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of phi: (x exp(x) - expm1(x)) / x^2, series branch near zero."""
    x = np.asarray(x)
    small = np.abs(x) < SERIES_THRESHOLD
    series = 0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0
    safe = np.where(small, 1.0, x)
    closed = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, series, closed)


def _phi_from(x: np.ndarray, em1: np.ndarray) -> np.ndarray:
    """phi given precomputed expm1(x); series patch on the small entries."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = em1 / x
    mask = np.abs(x) < SERIES_THRESHOLD
    if mask.any():
        xs = x[mask]
        out[mask] = 1.0 + xs / 2.0 + xs * xs / 6.0 + xs * xs * xs / 24.0
    return out


def _phi_grad_from(x: np.ndarray, em1: np.ndarray) -> np.ndarray:
    """phi' given precomputed expm1(x)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (x * (em1 + 1.0) - em1) / (x * x)
    mask = np.abs(x) < SERIES_THRESHOLD
    if mask.any():
        xs = x[mask]
        out[mask] = 0.5 + xs / 3.0 + xs * xs / 8.0 + xs * xs * xs / 30.0
    return out


def series_exp(x: np.ndarray) -> np.ndarray:
    """Library-independent exponential: argument reduction plus Taylor series.

    Writes x = k ln2 + r with |r| <= ln2/2, evaluates e^r by a 20-term
    series, and rescales by 2^k.  Used only as an oracle.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.rint(x / np.log(2.0))
    r = x - k * np.log(2.0)
    acc = np.ones_like(r)
    term = np.ones_like(r)
    for n in range(1, 21):
        term = term * r / n
        acc = acc + term
    return np.ldexp(acc, k.astype(np.int64))


# ---- time-invariant kernels -------------------------------------------------------


@dataclass(frozen=True)
class ContinuousSSM:
    """Diagonal continuous-time system dh = a h + b u, y = <c, h>.

    Arrays are shaped (..., N); leading axes stack independent channels.
    All entries of `a` must be strictly negative for stability.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if not (a.shape == b.shape == c.shape):
            raise ShapeError(f"ContinuousSSM: a/b/c shapes differ: {a.shape}, {b.shape}, {c.shape}")
        if not (a < 0).all():
            raise ValueError("ContinuousSSM: all diagonal entries of a must be strictly negative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def state_dim(self) -> int:
        return self.a.shape[-1]


@dataclass(frozen=True)
class DiscreteSSM:
    """Discrete diagonal system h_t = abar h_{t-1} + bbar u_t, y_t = <c, h_t>."""

    abar: np.ndarray
    bbar: np.ndarray
    c: np.ndarray
    delta: float

    @property
    def state_dim(self) -> int:
        return self.abar.shape[-1]


def zoh_factors(a: np.ndarray, delta, mode: str = "printed"):
    """Return (abar, bbar_coeff) where bbar = bbar_coeff * b.

    Handles a == 0 through the series branch of `phi`; `delta` may be a
    scalar or an array broadcastable against `a`.
    """
    if mode not in ZOH_MODES:
        raise ValueError(f"unknown zoh mode {mode!r}")
    a = np.asarray(a, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if (delta <= 0).any():
        raise ValueError("zoh_factors: delta must be positive")
    x = delta * a
    abar = np.exp(x)
    if mode == "printed":
        coeff = delta * phi(x)
    else:
        coeff = np.broadcast_to(delta, x.shape).astype(np.float64, copy=True)
    return abar, coeff


def discretize_zoh(ssm: ContinuousSSM, delta: float, mode: str = "printed") -> DiscreteSSM:
    """Zero-order-hold discretization of a diagonal continuous system."""
    abar, coeff = zoh_factors(ssm.a, delta, mode)
    return DiscreteSSM(abar=abar, bbar=coeff * ssm.b, c=ssm.c.copy(), delta=float(delta))


def recurrence_scan(d: DiscreteSSM, u: np.ndarray) -> np.ndarray:
    """Run the recurrence over the trailing time axis of u (..., L).

    Leading axes of u must broadcast against the system's channel axes.
    h starts at zero; returns y with the same shape as u.
    """
    u = np.asarray(u, dtype=np.float64)
    lead = np.broadcast_shapes(u.shape[:-1], d.abar.shape[:-1])
    L = u.shape[-1]
    y = np.zeros(lead + (L,), dtype=np.float64)
    h = np.zeros(lead + (d.state_dim,), dtype=np.float64)
    for t in range(L):
        h = d.abar * h + d.bbar * u[..., t, None]
        y[..., t] = (d.c * h).sum(axis=-1)
    return y


def ssm_kernel(d: DiscreteSSM, length: int) -> np.ndarray:
    """Convolution kernel (<c, bbar>, <c, abar bbar>, ..., <c, abar^{L-1} bbar>)."""
    powers = np.ones(d.abar.shape[:-1] + (length, d.state_dim), dtype=np.float64)
    for k in range(1, length):
        powers[..., k, :] = powers[..., k - 1, :] * d.abar
    return (d.c[..., None, :] * powers * d.bbar[..., None, :]).sum(axis=-1)


def kernel_convolution(d: DiscreteSSM, u: np.ndarray) -> np.ndarray:
    """Causal convolution of u with the SSM kernel; equals recurrence_scan
    for any time-invariant system."""
    u = np.asarray(u, dtype=np.float64)
    L = u.shape[-1]
    if L == 0:
        return np.zeros_like(u)
    kern = ssm_kernel(d, L)
    lead = np.broadcast_shapes(u.shape[:-1], kern.shape[:-1])
    y = np.zeros(lead + (L,), dtype=np.float64)
    for k in range(L):
        y[..., k:] += kern[..., k, None] * u[..., : L - k]
    return y


# ---- fused selective recurrence (differentiable) ----------------------------------


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _scan_fwd_kernel(em1, p, dd, ud, btd, ctd, hs, y):  # pragma: no cover - jitted
        B, G, L, N, D = em1.shape
        for b in range(B):
            for g in range(G):
                h = np.zeros((N, D), dtype=em1.dtype)
                for t in range(L):
                    for n in range(N):
                        bt_v = btd[b, g, t, n]
                        ct_v = ctd[b, g, t, n]
                        for d in range(D):
                            dbu = p[b, g, t, n, d] * dd[b, g, t, d] * bt_v * ud[b, g, t, d]
                            hv = (em1[b, g, t, n, d] + 1.0) * h[n, d] + dbu
                            h[n, d] = hv
                            hs[b, g, t, n, d] = hv
                            y[b, g, t, d] += ct_v * hv

    @numba.njit(cache=True, fastmath=True)
    def _scan_bwd_kernel(em1, p, pg, at, hs, gy, dd, ud, btd, ctd,
                         du, ddelta, da, dbt, dct):  # pragma: no cover - jitted
        B, G, L, N, D = em1.shape
        zero_row = np.zeros(D, dtype=em1.dtype)
        for b in range(B):
            for g in range(G):
                carry = np.zeros((N, D), dtype=em1.dtype)
                for t in range(L - 1, -1, -1):
                    for n in range(N):
                        ct_v = ctd[b, g, t, n]
                        bt_v = btd[b, g, t, n]
                        hprev = hs[b, g, t - 1, n] if t > 0 else zero_row
                        s_dct = 0.0
                        s_dbt = 0.0
                        for d in range(D):
                            gy_v = gy[b, g, t, d]
                            dd_v = dd[b, g, t, d]
                            ud_v = ud[b, g, t, d]
                            ab_v = em1[b, g, t, n, d] + 1.0
                            p_v = p[b, g, t, n, d]
                            pg_v = pg[b, g, t, n, d]
                            a_v = at[g, n, d]
                            dh = gy_v * ct_v + carry[n, d]
                            s_dct += gy_v * hs[b, g, t, n, d]
                            dxv = dh * hprev[d] * ab_v
                            dw = dh * bt_v * ud_v
                            ddelta[b, g, t, d] += dxv * a_v + dw * (p_v + dd_v * pg_v * a_v)
                            da[g, n, d] += dxv * dd_v + dw * pg_v * dd_v * dd_v
                            w_v = dd_v * p_v
                            s_dbt += dh * w_v * ud_v
                            du[b, g, t, d] += dh * w_v * bt_v
                            carry[n, d] = dh * ab_v
                        dct[b, g, t, n] = s_dct
                        dbt[b, g, t, n] = s_dbt


def selective_recurrence(u: Tensor, delta: Tensor, a: Tensor, bt: Tensor, ct: Tensor,
                         zoh_mode: str = "printed") -> Tensor:
    """Input-dependent diagonal scan over grouped token sequences.

    Shapes: u, delta (B, G, L, D); a (G, D, N); bt, ct (B, G, L, N).
    Per token: abar = exp(delta * a); bbar u = delta * phi(delta * a) * bt * u
    ("printed" mode) or delta * bt * u ("simplified"); h accumulates along L
    and y_t = sum_n ct[n] * h[n] is returned as (B, G, L, D).

    The backward pass replays the loop in reverse, so the whole scan is one
    graph node regardless of sequence length.
    """
    if zoh_mode not in ZOH_MODES:
        raise ValueError(f"unknown zoh mode {zoh_mode!r}")
    ud, dd, ad, btd, ctd = u.data, delta.data, a.data, bt.data, ct.data
    if ud.ndim != 4 or dd.shape != ud.shape:
        raise ShapeError(f"selective_recurrence: u/delta must be (B,G,L,D), got {u.shape}/{delta.shape}")
    B, G, L, D = ud.shape
    if ad.shape[:2] != (G, D) or ad.ndim != 3:
        raise ShapeError(f"selective_recurrence: a must be (G,D,N), got {a.shape}")
    N = ad.shape[2]
    if btd.shape != (B, G, L, N) or ctd.shape != (B, G, L, N):
        raise ShapeError(f"selective_recurrence: bt/ct must be (B,G,L,N), got {bt.shape}/{ct.shape}")

    dt = ud.dtype
    printed = zoh_mode == "printed"

    # per-token discretization is independent of the recurrence; the
    # transcendentals run once, vectorized, in state-last-but-one layout
    # (B, G, L, N, D) so the jitted loops stream contiguous channel rows
    needs_grad = any(t.requires_grad or t._parents for t in (u, delta, a, bt, ct))
    at = np.ascontiguousarray(ad.transpose(0, 2, 1))  # (G, N, D)
    x = dd[:, :, :, None, :] * at[None, :, None]
    em1 = np.expm1(x)
    if printed:
        with np.errstate(divide="ignore", invalid="ignore"):
            p = em1 / x
            # phi' = (exp(x) - phi(x)) / x, reusing the stored pieces
            pg = (em1 + (1.0 - p)) / x if needs_grad else None
        mask = np.abs(x) < SERIES_THRESHOLD
        if mask.any():
            xs = x[mask]
            p[mask] = 1.0 + xs / 2.0 + xs * xs / 6.0 + xs * xs * xs / 24.0
            if pg is not None:
                pg[mask] = 0.5 + xs / 3.0 + xs * xs / 8.0 + xs * xs * xs / 30.0
    else:
        p = np.ones_like(x)
        pg = np.zeros_like(x) if needs_grad else None

    hs = np.empty((B, G, L, N, D), dtype=dt)
    y = np.zeros((B, G, L, D), dtype=dt)
    if _HAVE_NUMBA:
        _scan_fwd_kernel(em1, p, dd, ud, btd, ctd, hs, y)
    else:
        abar = em1 + 1.0
        np.multiply(p * dd[:, :, :, None, :], btd[..., None] * ud[:, :, :, None, :], out=hs)
        h = np.zeros((B, G, N, D), dtype=dt)
        for t in range(L):
            step = hs[:, :, t]
            step += abar[:, :, t] * h
            h = step
        np.einsum("bglnd,bgln->bgld", hs, ctd, out=y)

    def bwd(gy):
        du = np.zeros_like(ud)
        ddelta = np.zeros_like(dd)
        da_t = np.zeros_like(at)
        dbt = np.empty_like(btd)
        dct = np.empty_like(ctd)
        if _HAVE_NUMBA:
            gy = np.ascontiguousarray(gy)
            _scan_bwd_kernel(em1, p, pg, at, hs, gy, dd, ud, btd, ctd,
                             du, ddelta, da_t, dbt, dct)
        else:
            abar = em1 + 1.0
            dhs = np.einsum("bgld,bgln->bglnd", gy, ctd)
            carry = np.zeros((B, G, N, D), dtype=dt)
            for t in range(L - 1, -1, -1):
                row = dhs[:, :, t]
                row += carry
                np.multiply(row, abar[:, :, t], out=carry)
            np.einsum("bgld,bglnd->bgln", gy, hs, out=dct)
            dx = np.empty_like(dhs)
            dx[:, :, 0] = 0.0
            np.multiply(dhs[:, :, 1:], hs[:, :, :-1], out=dx[:, :, 1:])
            dx *= abar
            ddelta += np.einsum("bglnd,gnd->bgld", dx, at)
            da_t += np.einsum("bglnd,bgld->gnd", dx, dd)
            t1 = dhs * p
            s1 = np.einsum("bglnd,bgln->bgld", t1, btd)
            ddelta += ud * dd * np.einsum("bglnd,bgln->bgld", (dhs * pg) * at[None, :, None], btd)
            ddelta += ud * s1
            outer = np.einsum("bgln,bgld->bglnd", btd, ud * dd * dd)
            da_t += np.einsum("bglnd,bglnd->gnd", dhs * pg, outer)
            np.einsum("bglnd,bgld->bgln", t1, dd * ud, out=dbt)
            du += dd * s1
        da = np.ascontiguousarray(da_t.transpose(0, 2, 1))
        return du, ddelta, da, dbt, dct

    return T._make("selective_recurrence", y, (u, delta, a, bt, ct), bwd)


# ---- the selective (input-dependent) SSM module -----------------------------------


class SelectiveSSM(Module):
    """Per-token parameterized scan over `groups` independent channels sets.

    Each group owns a diagonal transition spectrum (`a_log`, materialized as
    -exp(a_log)), projections of the token vector to the state input/readout
    vectors, and a low-rank projection plus bias producing the positive step
    size via softplus.
    """

    def __init__(self, channels: int, state_dim: int = 8, dt_rank: int | None = None,
                 groups: int = 1, zoh_mode: str = "printed"):
        if zoh_mode not in ZOH_MODES:
            raise ValueError(f"unknown zoh mode {zoh_mode!r}")
        self.channels = channels
        self.state_dim = state_dim
        self.groups = groups
        self.dt_rank = dt_rank if dt_rank is not None else max(1, channels // 16)
        self.zoh_mode = zoh_mode
        G, D, N, R = groups, channels, state_dim, self.dt_rank
        self.a_log = Parameter((G, D, N), ("s4_log", "a_log"))
        self.w_b = uniform_param((G, D, N), D)
        self.b_b = Parameter((G, 1, N), ("zeros",))
        self.w_c = uniform_param((G, D, N), D)
        self.b_c = Parameter((G, 1, N), ("zeros",))
        self.w_dt_down = uniform_param((G, D, R), D)
        self.w_dt_up = uniform_param((G, R, D), R)
        self.dt_bias = Parameter((G, 1, D), ("s4_log", "dt_bias"))

    def scan(self, u: Tensor) -> Tensor:
        """u: (B, G, L, D) -> y: (B, G, L, D)."""
        if u.data.ndim != 4 or u.shape[1] != self.groups or u.shape[3] != self.channels:
            raise ShapeError(
                f"SelectiveSSM.scan: expected (B, {self.groups}, L, {self.channels}), got {u.shape}"
            )
        bias = lambda p: T.reshape(p, (1,) + p.shape)  # (G,1,K) -> (1,G,1,K)
        delta = T.softplus(T.add(T.group_matmul(T.group_matmul(u, self.w_dt_down), self.w_dt_up),
                                 bias(self.dt_bias)))
        bt = T.add(T.group_matmul(u, self.w_b), bias(self.b_b))
        ct = T.add(T.group_matmul(u, self.w_c), bias(self.b_c))
        a = T.neg(T.exp(self.a_log))
        return selective_recurrence(u, delta, a, bt, ct, self.zoh_mode)

    def __call__(self, u: Tensor) -> Tensor:
        """Token-sequence form: accepts (L, D) or (B, L, D) for groups == 1."""
        if self.groups != 1:
            raise ShapeError("use .scan for multi-group input")
        squeeze_batch = u.data.ndim == 2
        if squeeze_batch:
            u = T.reshape(u, (1,) + u.shape)
        y = self.scan(T.reshape(u, (u.shape[0], 1) + u.shape[1:]))
        y = T.reshape(y, (y.shape[0],) + y.shape[2:])
        if squeeze_batch:
            y = T.reshape(y, y.shape[1:])
        return y
