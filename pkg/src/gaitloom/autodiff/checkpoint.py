"""Parameter checkpoint file format.

Layout (all little-endian):
  magic 'GLNN', u32 version,
  u32 n_tensors, then per tensor:
    u16 name_len, name bytes (utf-8), u8 dtype (0=f32, 1=f64),
    u8 ndim, u32 dims..., raw data
  u8 has_optimizer; if 1:
    u32 step, f64 lr,
    u32 n_moment_pairs, then per parameter: m tensor, v tensor
    (unnamed, same dtype/dims encoding, f64 data)
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GLNN"
_DTYPES = {0: "<f4", 1: "<f8"}


def _write_array(f, arr: np.ndarray, name: str = ""):
    code = 1 if arr.dtype == np.float64 else 0
    name_b = name.encode()
    f.write(struct.pack("<H", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_array(f) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", f.read(2))
    name = f.read(name_len).decode()
    code, ndim = struct.unpack("<BB", f.read(2))
    dims = [struct.unpack("<I", f.read(4))[0] for _ in range(ndim)]
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(f.read(count * int(_DTYPES[code][-1])), dtype=_DTYPES[code])
    return name, data.reshape(dims).astype(np.float64 if code else np.float32)


def save_checkpoint(path, tensors: dict[str, np.ndarray], opt_state: dict | None = None):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_array(f, np.asarray(arr), name)
        if opt_state is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Id", opt_state["step"], opt_state["lr"]))
            f.write(struct.pack("<I", len(opt_state["m"])))
            for m, v in zip(opt_state["m"], opt_state["v"]):
                _write_array(f, np.asarray(m, dtype=np.float64))
                _write_array(f, np.asarray(v, dtype=np.float64))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (_version,) = struct.unpack("<I", f.read(4))
        (n,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(n):
            name, arr = _read_array(f)
            tensors[name] = arr
        (has_opt,) = struct.unpack("<B", f.read(1))
        opt = None
        if has_opt:
            step, lr = struct.unpack("<Id", f.read(12))
            (n_pairs,) = struct.unpack("<I", f.read(4))
            ms, vs = [], []
            for _ in range(n_pairs):
                ms.append(_read_array(f)[1])
                vs.append(_read_array(f)[1])
            opt = {"step": step, "lr": lr, "m": ms, "v": vs}
    return tensors, opt
