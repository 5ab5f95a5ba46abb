"""2D-to-1D serialization geometry.

A `ScanPath` is a bijection between sequence positions and cells of a
(possibly padded) H' x W' grid: `order[i]` is the row-major flat index of
the cell visited at step i.  Paths built here:

  * raster: plain row-major traversal;
  * the four cross-scan directions (row/column major, forward/reversed);
  * atrous windows at rate r, in two readings of "atrous":
      - "contiguous": non-overlapping r x r tiles, visited in row-major
        tile order, each tile unfolded row-major;
      - "dilated": the r^2 interleaved sub-grids indexed by offset (a, b),
        each sub-grid unfolded row-major.

When r does not divide H or W the grid is zero-padded at the bottom/right
edge; `apply_path` pads and `inverse_scatter` drops padded cells, so the
pair is an exact round trip on the original map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

WINDOW_MODES = ("contiguous", "dilated")

CSM_MODES = ("csm_h_fwd", "csm_v_fwd", "csm_h_rev", "csm_v_rev")


@dataclass(frozen=True)
class ScanPath:
    """A serialization order over a padded grid.

    `order[i]` = flat padded index (row * padded_width + col) visited at
    sequence position i; always a permutation of 0 .. H'*W'-1.
    """

    height: int
    width: int
    padded_height: int
    padded_width: int
    order: np.ndarray
    mode: str
    rate: int = 1
    window_mode: str = ""

    def __post_init__(self):
        n = self.padded_height * self.padded_width
        order = np.asarray(self.order, dtype=np.int64)
        if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
            raise ShapeError(f"ScanPath({self.mode}): order is not a permutation of 0..{n - 1}")
        object.__setattr__(self, "order", order)

    @property
    def length(self) -> int:
        return self.padded_height * self.padded_width

    @property
    def padded(self) -> bool:
        return (self.padded_height, self.padded_width) != (self.height, self.width)

    def valid_mask(self) -> np.ndarray:
        """Boolean (H', W') mask of real (non-padded) cells."""
        m = np.zeros((self.padded_height, self.padded_width), dtype=bool)
        m[: self.height, : self.width] = True
        return m

    def positions(self) -> np.ndarray:
        """Inverse view: (H', W') grid of sequence positions."""
        pos = np.empty(self.length, dtype=np.int64)
        pos[self.order] = np.arange(self.length)
        return pos.reshape(self.padded_height, self.padded_width)


def _check_extents(h: int, w: int) -> None:
    if h < 1 or w < 1:
        raise ValueError(f"grid extents must be positive, got ({h}, {w})")


@lru_cache(maxsize=None)
def raster_path(height: int, width: int) -> ScanPath:
    _check_extents(height, width)
    return ScanPath(height, width, height, width,
                    np.arange(height * width, dtype=np.int64), "raster")


@lru_cache(maxsize=None)
def _cross_scan_tuple(height: int, width: int) -> tuple:
    _check_extents(height, width)
    fwd = np.arange(height * width, dtype=np.int64)
    col = (fwd % height) * width + fwd // height  # visit columns top-to-bottom
    out = []
    for mode, order in (("csm_h_fwd", fwd), ("csm_v_fwd", col),
                        ("csm_h_rev", fwd[::-1]), ("csm_v_rev", col[::-1])):
        out.append(ScanPath(height, width, height, width, order.copy(), mode))
    return tuple(out)


def cross_scan_paths(height: int, width: int) -> tuple:
    """The four cross-scan directions, in the order of `CSM_MODES`."""
    return _cross_scan_tuple(height, width)


@lru_cache(maxsize=None)
def atrous_window_path(height: int, width: int, rate: int, window_mode: str = "contiguous") -> ScanPath:
    _check_extents(height, width)
    if rate < 1:
        raise ValueError(f"atrous rate must be >= 1, got {rate}")
    if window_mode not in WINDOW_MODES:
        raise ValueError(f"unknown window mode {window_mode!r}")
    ph = ((height + rate - 1) // rate) * rate
    pw = ((width + rate - 1) // rate) * rate
    rows = np.arange(ph)
    cols = np.arange(pw)
    if window_mode == "contiguous":
        # tile index (row-major), then cell within tile (row-major)
        key_tile = (rows[:, None] // rate) * (pw // rate) + cols[None, :] // rate
        key_cell = (rows[:, None] % rate) * rate + cols[None, :] % rate
    else:
        # offset sub-grid (a, b) in row-major offset order, then cell within sub-grid
        key_tile = (rows[:, None] % rate) * rate + cols[None, :] % rate
        key_cell = (rows[:, None] // rate) * (pw // rate) + cols[None, :] // rate
    keys = key_tile.astype(np.int64) * (ph * pw) + key_cell.astype(np.int64)
    order = np.argsort(keys.reshape(-1), kind="stable").astype(np.int64)
    return ScanPath(height, width, ph, pw, order, f"atrous_r{rate}", rate, window_mode)


def window_partition(height: int, width: int, rate: int, window_mode: str = "contiguous") -> list:
    """The window decomposition behind an atrous path: a list of flat-index
    arrays, one per window, in concatenation order; together they partition
    the padded grid."""
    path = atrous_window_path(height, width, rate, window_mode)
    per = rate * rate if window_mode == "contiguous" else (path.padded_height // rate) * (path.padded_width // rate)
    return [path.order[i : i + per] for i in range(0, path.length, per)]


# ---- applying paths to maps --------------------------------------------------------


def _pad_np(arr: np.ndarray, path: ScanPath) -> np.ndarray:
    if not path.padded:
        return arr
    widths = [(0, 0)] * arr.ndim
    widths[-3] = (0, path.padded_height - path.height)
    widths[-2] = (0, path.padded_width - path.width)
    return np.pad(arr, widths)


def apply_path(path: ScanPath, grid) -> np.ndarray:
    """Serialize a (..., H, W, C) array into (..., L, C) sequence order."""
    arr = np.asarray(grid.data if isinstance(grid, Tensor) else grid)
    if arr.ndim < 3 or arr.shape[-3] != path.height or arr.shape[-2] != path.width:
        raise ShapeError(f"apply_path: map {arr.shape} does not match path ({path.height}, {path.width})")
    arr = _pad_np(arr, path)
    flat = arr.reshape(arr.shape[:-3] + (path.length, arr.shape[-1]))
    return np.take(flat, path.order, axis=-2)


def inverse_scatter(path: ScanPath, seq) -> np.ndarray:
    """Scatter a (..., L, C) sequence back to the (..., H, W, C) grid.

    Padded cells are dropped; exact inverse of `apply_path`.
    """
    arr = np.asarray(seq.data if isinstance(seq, Tensor) else seq)
    if arr.ndim < 2 or arr.shape[-2] != path.length:
        raise ShapeError(f"inverse_scatter: sequence {arr.shape} does not match path length {path.length}")
    flat = np.zeros(arr.shape[:-2] + (path.length, arr.shape[-1]), dtype=arr.dtype)
    flat[..., path.order, :] = arr
    grid = flat.reshape(arr.shape[:-2] + (path.padded_height, path.padded_width, arr.shape[-1]))
    return np.ascontiguousarray(grid[..., : path.height, : path.width, :])


def apply_path_t(path: ScanPath, grid: Tensor) -> Tensor:
    """Differentiable `apply_path` for (..., H, W, C) tensors."""
    if grid.shape[-3] != path.height or grid.shape[-2] != path.width:
        raise ShapeError(f"apply_path: map {grid.shape} does not match path ({path.height}, {path.width})")
    x = grid
    if path.padded:
        x = T.pad2d(x, 0, path.padded_height - path.height, 0, path.padded_width - path.width)
    x = T.reshape(x, x.shape[:-3] + (path.length, x.shape[-1]))
    return T.gather_tokens(x, path.order)


def inverse_scatter_t(path: ScanPath, seq: Tensor) -> Tensor:
    """Differentiable `inverse_scatter` for (..., L, C) tensors."""
    if seq.shape[-2] != path.length:
        raise ShapeError(f"inverse_scatter: sequence {seq.shape} does not match path length {path.length}")
    x = T.scatter_tokens(seq, path.order, path.length)
    x = T.reshape(x, x.shape[:-2] + (path.padded_height, path.padded_width, x.shape[-1]))
    if path.padded:
        x = T.crop2d(x, 0, path.height, 0, path.width)
    return x


def format_path_grid(path: ScanPath) -> str:
    """Render the path as a grid of sequence positions (padded cells in
    brackets), used by the path-debug CLI subcommand."""
    pos = path.positions()
    valid = path.valid_mask()
    cells = []
    width = len(str(path.length - 1)) + 2
    for r in range(path.padded_height):
        row = []
        for c in range(path.padded_width):
            text = str(pos[r, c])
            if not valid[r, c]:
                text = f"[{text}]"
            row.append(text.rjust(width))
        cells.append(" ".join(row))
    return "\n".join(cells)
