"""Synthetic bi-temporal change-detection data and image IO.

Scenes are land-cover maps over a fixed class palette: class 1 is the
background cover, classes 2..K-1 are patch covers (rectangles and disks).
A pair is generated by drawing a base cover map, then applying change
events for the second date:

  * appear:    stamp a new patch over the current cover;
  * disappear: revert an existing patch region to the background cover;
  * move:      erase a patch and stamp it at a shifted position.

Ground truth falls out of the construction: the change mask marks cells
whose cover differs between the dates, and the semantic maps carry the
respective cover class on changed cells (0 elsewhere).  Images render
the cover palette plus i.i.d. Gaussian noise, quantized to 8-bit.

Everything is keyed by (spec, seed): sample i of a split uses an RNG
derived from (seed, split index, i), so regeneration is byte-identical
and samples may be produced in any order.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, replace

import numpy as np

SPLITS = ("train", "val", "test")

# RGB palette per cover class; class 0 is never rendered (it is the
# "no change" label, not a cover)
PALETTE = np.array(
    [
        [0.00, 0.00, 0.00],  # unused
        [0.22, 0.34, 0.20],  # background cover
        [0.16, 0.28, 0.58],  # water-like cover
        [0.68, 0.66, 0.60],  # built-up cover
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the generator; (spec, seed) fixes every output byte."""

    height: int = 64
    width: int = 64
    train: int = 200
    val: int = 50
    test: int = 50
    seed: int = 0
    num_classes: int = 4  # including class 0 = no change
    noise: float = 0.05
    static_patches: tuple = (1, 3)  # inclusive range per scene
    change_events: tuple = (2, 4)
    patch_extent: tuple = (14, 30)  # bounding-box side range, pixels
    shapes: tuple = ("rectangle", "disk")
    change_modes: tuple = ("appear", "disappear", "move")

    def count(self, split: str) -> int:
        return {"train": self.train, "val": self.val, "test": self.test}[split]


def _stamp(cover: np.ndarray, shape: str, cy: int, cx: int, h: int, w: int, cls: int) -> np.ndarray:
    """Rasterize one patch onto a copy of the cover map; returns its footprint."""
    H, W = cover.shape
    ys = np.arange(H)[:, None]
    xs = np.arange(W)[None, :]
    if shape == "rectangle":
        mask = (np.abs(ys - cy) <= h // 2) & (np.abs(xs - cx) <= w // 2)
    elif shape == "disk":
        r = min(h, w) / 2.0
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    else:
        raise ValueError(f"unknown shape {shape!r}")
    cover[mask] = cls
    return mask


@dataclass
class Patch:
    shape: str
    cy: int
    cx: int
    h: int
    w: int
    cls: int


def _random_patch(rng: np.random.Generator, spec: SyntheticSpec) -> Patch:
    lo, hi = spec.patch_extent
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    cy = int(rng.integers(0, spec.height))
    cx = int(rng.integers(0, spec.width))
    cls = int(rng.integers(2, spec.num_classes))
    shape = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
    return Patch(shape, cy, cx, h, w, cls)


def generate_sample(spec: SyntheticSpec, split: str, index: int) -> dict:
    """One bi-temporal sample: images, change mask, semantic label maps."""
    rng = np.random.default_rng([spec.seed, SPLITS.index(split), index])
    H, W = spec.height, spec.width

    cover1 = np.ones((H, W), dtype=np.int64)
    patches = []
    n_static = int(rng.integers(spec.static_patches[0], spec.static_patches[1] + 1))
    for _ in range(n_static):
        p = _random_patch(rng, spec)
        _stamp(cover1, p.shape, p.cy, p.cx, p.h, p.w, p.cls)
        patches.append(p)

    cover2 = cover1.copy()
    n_events = int(rng.integers(spec.change_events[0], spec.change_events[1] + 1))
    for _ in range(n_events):
        mode = spec.change_modes[int(rng.integers(0, len(spec.change_modes)))]
        if mode == "appear" or not patches:
            p = _random_patch(rng, spec)
            _stamp(cover2, p.shape, p.cy, p.cx, p.h, p.w, p.cls)
        elif mode == "disappear":
            p = patches[int(rng.integers(0, len(patches)))]
            _stamp(cover2, p.shape, p.cy, p.cx, p.h, p.w, 1)
        else:  # move
            p = patches[int(rng.integers(0, len(patches)))]
            dy = int(rng.integers(8, 20)) * (1 if rng.integers(0, 2) else -1)
            dx = int(rng.integers(8, 20)) * (1 if rng.integers(0, 2) else -1)
            _stamp(cover2, p.shape, p.cy, p.cx, p.h, p.w, 1)
            _stamp(cover2, p.shape, p.cy + dy, p.cx + dx, p.h, p.w, p.cls)

    changed = cover1 != cover2
    mask = changed.astype(np.uint8)
    sem1 = np.where(changed, cover1, 0).astype(np.uint8)
    sem2 = np.where(changed, cover2, 0).astype(np.uint8)

    img1 = render_cover(cover1, rng, spec.noise)
    img2 = render_cover(cover2, rng, spec.noise)
    return {"img1": img1, "img2": img2, "mask": mask, "sem1": sem1, "sem2": sem2}


def render_cover(cover: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    """Palette lookup plus Gaussian noise, quantized to uint8 RGB."""
    img = PALETTE[cover]
    if noise:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


# ---- PPM / PGM IO -------------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"write_ppm: need (H, W, 3) uint8, got {img.shape} {img.dtype}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"write_pgm: need (H, W) uint8, got {img.shape} {img.dtype}")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def _read_netpbm(path, magic: bytes):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(magic):
        raise ValueError(f"{path}: expected {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while blob[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    return blob, pos, h, w


def read_ppm(path) -> np.ndarray:
    blob, pos, h, w = _read_netpbm(path, b"P6")
    return np.frombuffer(blob, dtype=np.uint8, count=h * w * 3, offset=pos).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    blob, pos, h, w = _read_netpbm(path, b"P5")
    return np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos).reshape(h, w).copy()


# ---- on-disk dataset ----------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def gen_synthetic(spec: SyntheticSpec, out_dir) -> str:
    """Write the dataset and its manifest; returns the manifest path.

    The manifest lists every file with its per-sample seed derivation and
    content hash, so equality of manifests certifies byte-identical data.
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = [
        f"# synthetic change-detection dataset",
        f"height = {spec.height}",
        f"width = {spec.width}",
        f"seed = {spec.seed}",
        f"num_classes = {spec.num_classes}",
        f"noise = {spec.noise}",
    ]
    for split in SPLITS:
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        for i in range(spec.count(split)):
            sample = generate_sample(spec, split, i)
            base = f"{i:04d}"
            files = {
                f"{base}_t1.ppm": ("img1", write_ppm),
                f"{base}_t2.ppm": ("img2", write_ppm),
                f"{base}_mask.pgm": ("mask", write_pgm),
                f"{base}_sem1.pgm": ("sem1", write_pgm),
                f"{base}_sem2.pgm": ("sem2", write_pgm),
            }
            for name, (key, writer) in files.items():
                arr = sample[key]
                if key == "mask":
                    arr = arr * 255
                path = os.path.join(split_dir, name)
                writer(path, arr)
                lines.append(f"{split}/{name} seed=({spec.seed},{SPLITS.index(split)},{i}) sha256={_sha256(path)}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


@dataclass
class Dataset:
    """An in-memory split: uint8 images, binary masks, class maps."""

    img1: np.ndarray  # (S, H, W, 3) uint8
    img2: np.ndarray
    mask: np.ndarray  # (S, H, W) uint8 in {0, 1}
    sem1: np.ndarray  # (S, H, W) uint8 class ids
    sem2: np.ndarray

    def __len__(self) -> int:
        return self.img1.shape[0]


def load_split(data_dir, split: str) -> Dataset:
    split_dir = os.path.join(data_dir, split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"dataset split directory not found: {split_dir}")
    ids = sorted({name[:4] for name in os.listdir(split_dir) if name.endswith("_t1.ppm")})
    if not ids:
        raise FileNotFoundError(f"no samples in {split_dir}")
    img1, img2, mask, sem1, sem2 = [], [], [], [], []
    for base in ids:
        img1.append(read_ppm(os.path.join(split_dir, f"{base}_t1.ppm")))
        img2.append(read_ppm(os.path.join(split_dir, f"{base}_t2.ppm")))
        mask.append((read_pgm(os.path.join(split_dir, f"{base}_mask.pgm")) > 127).astype(np.uint8))
        sem1.append(read_pgm(os.path.join(split_dir, f"{base}_sem1.pgm")))
        sem2.append(read_pgm(os.path.join(split_dir, f"{base}_sem2.pgm")))
    return Dataset(np.stack(img1), np.stack(img2), np.stack(mask), np.stack(sem1), np.stack(sem2))


# ---- augmentation -------------------------------------------------------------------


def augment_sample(arrays: list, k_rot: int, flip_lr: bool, flip_tb: bool) -> list:
    """Apply the same spatial transform to every array (images and labels)."""
    out = []
    for arr in arrays:
        a = np.rot90(arr, k_rot, axes=(0, 1))
        if flip_lr:
            a = a[:, ::-1]
        if flip_tb:
            a = a[::-1, :]
        out.append(np.ascontiguousarray(a))
    return out
