"""Binary checkpoint format.

Layout (all integers little-endian u32, all floats little-endian f32):

    magic   4 bytes  "AWMB"
    version u32      currently 1
    count   u32      number of parameters
    per parameter:
        name_len u32, name UTF-8 bytes,
        rank u32, extent u32 * rank,
        raw f32 data (row-major)

Loading validates every name and shape against the instantiated model.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"AWMB"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_params) -> None:
    items = list(named_params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(items)))
        for name, p in items:
            data = p.data if isinstance(p.data, np.ndarray) else np.asarray(p.data)
            raw = np.ascontiguousarray(data, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", raw.ndim))
            fh.write(struct.pack(f"<{raw.ndim}I", *raw.shape))
            fh.write(raw.tobytes())


def read_checkpoint(path) -> dict:
    """Return {name: float32 array} from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    ofs = 12
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, ofs)
        ofs += 4
        name = blob[ofs : ofs + name_len].decode("utf-8")
        ofs += name_len
        (rank,) = struct.unpack_from("<I", blob, ofs)
        ofs += 4
        shape = struct.unpack_from(f"<{rank}I", blob, ofs)
        ofs += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=ofs).reshape(shape)
        ofs += 4 * n
        out[name] = arr.copy()
    if ofs != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - ofs} trailing bytes")
    return out


def load_into_model(path, model) -> None:
    """Load a checkpoint, validating names and shapes against the model."""
    stored = read_checkpoint(path)
    live = dict(model.named_parameters())
    missing = sorted(set(live) - set(stored))
    extra = sorted(set(stored) - set(live))
    if missing:
        raise CheckpointError(f"{path}: missing parameter {missing[0]!r}")
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]!r}")
    for name, p in live.items():
        arr = stored[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {name!r}: file {arr.shape}, model {p.data.shape}"
            )
        p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
        p.grad = None
