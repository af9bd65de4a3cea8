"""Binary checkpoint files: magic, version, config echo, named tensors.

Layout (little-endian throughout):
  magic b"OBAT", u32 version,
  u32 config-JSON length, config JSON bytes,
  u32 tensor count, then per tensor:
    u16 name length, name UTF-8, u8 dtype tag (0=f32, 1=f64, 2=i64),
    u8 ndim, u32 dims..., raw values.
Optimizer state rides along as tensors under an "opt." prefix.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .numerics import Tensor
from .optim import OptState

MAGIC = b"OBAT"
VERSION = 1
_DTYPE_TAGS = {0: "<f4", 1: "<f8", 2: "<i8"}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    tag = _TAG_OF[arr.dtype]
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", fh.read(2))
    name = fh.read(nlen).decode()
    tag, ndim = struct.unpack("<BB", fh.read(2))
    shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
    dtype = np.dtype(_DTYPE_TAGS[tag])
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
    return name, arr.reshape(shape).copy()


def save_checkpoint(path: str | Path, params: dict[str, Tensor],
                    config: dict, opt_state: OptState | None = None) -> None:
    tensors: dict[str, np.ndarray] = {n: t.data for n, t in params.items()}
    if opt_state is not None:
        tensors["opt.step"] = np.array([opt_state.step], dtype=np.int64)
        for n, a in opt_state.m.items():
            tensors[f"opt.m.{n}"] = a
        for n, a in opt_state.v.items():
            tensors[f"opt.v.{n}"] = a
        config = dict(config, _opt={"beta1": opt_state.beta1,
                                    "beta2": opt_state.beta2,
                                    "eps": opt_state.eps,
                                    "weight_decay": opt_state.weight_decay,
                                    "trust_min": opt_state.trust_min,
                                    "trust_max": opt_state.trust_max})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cfg = json.dumps(config, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(fh, name, tensors[name])


def load_checkpoint(path: str | Path):
    """Returns (params dict, config dict, OptState or None)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", fh.read(4))
        config = json.loads(fh.read(clen).decode())
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = dict(_read_tensor(fh) for _ in range(count))

    opt_cfg = config.pop("_opt", None)
    opt_state = None
    if opt_cfg is not None:
        opt_state = OptState(**opt_cfg)
        opt_state.step = int(tensors.pop("opt.step")[0])
        for name in list(tensors):
            if name.startswith("opt.m."):
                opt_state.m[name[6:]] = tensors.pop(name)
            elif name.startswith("opt.v."):
                opt_state.v[name[6:]] = tensors.pop(name)
    params = {n: Tensor(a, requires_grad=True, name=n)
              for n, a in tensors.items()}
    return params, config, opt_state
