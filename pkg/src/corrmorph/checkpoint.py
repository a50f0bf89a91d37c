"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic     8 bytes  b"CMORPHCK"
    version   uint32
    hdr_len   uint64, then hdr_len bytes of UTF-8 JSON (model config, self-describing)
    n_blocks  uint32
    per block:
        name_len uint16, name UTF-8
        ndim     uint8, dims ndim x uint64
        data     float64 little-endian, C order
    has_opt   uint8 (0/1); if 1: step uint64, then n_blocks m-arrays and
              n_blocks v-arrays (same names/shapes/order as the blocks)

Writers are deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CMORPHCK"
VERSION = 1


def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<B", fh.read(1))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8", count=count)
    return data.reshape(shape).astype(np.float64)


def save_checkpoint(
    path: str | Path,
    header: dict,
    blocks: dict[str, np.ndarray],
    opt_step: int | None = None,
    opt_m: dict[str, np.ndarray] | None = None,
    opt_v: dict[str, np.ndarray] | None = None,
) -> None:
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    has_opt = opt_step is not None
    if has_opt and (opt_m is None or opt_v is None or set(opt_m) != set(blocks) or set(opt_v) != set(blocks)):
        raise ValueError("optimizer state must provide m and v for every block")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        fh.write(struct.pack("<I", len(blocks)))
        for name, arr in blocks.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            _write_array(fh, arr)
        fh.write(struct.pack("<B", 1 if has_opt else 0))
        if has_opt:
            fh.write(struct.pack("<Q", opt_step))
            for name in blocks:
                _write_array(fh, opt_m[name])
            for name in blocks:
                _write_array(fh, opt_v[name])


def load_checkpoint(path: str | Path):
    """Returns (header, blocks, opt) where opt is None or (step, m, v)."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a corrmorph checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hdr_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hdr_len).decode("utf-8"))
        (n_blocks,) = struct.unpack("<I", fh.read(4))
        blocks: dict[str, np.ndarray] = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            blocks[name] = _read_array(fh)
        (has_opt,) = struct.unpack("<B", fh.read(1))
        opt = None
        if has_opt:
            (step,) = struct.unpack("<Q", fh.read(8))
            m = {name: _read_array(fh) for name in blocks}
            v = {name: _read_array(fh) for name in blocks}
            opt = (step, m, v)
    return header, blocks, opt
