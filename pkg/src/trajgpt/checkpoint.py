"""Self-describing binary checkpoints.

Layout: magic "TJGP", u32 format version, length-prefixed canonical
config JSON, length-prefixed meta JSON (step counter, seed), u32 tensor
count, then per-tensor records (name, precision tag, shape, raw
little-endian values). Round trips are byte-exact.
"""

import io
import json
import struct

import numpy as np

from .errors import (
    CheckpointMagicError,
    CheckpointPrecisionError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractViolation,
)
from .model import AdamState, ModelConfig

MAGIC = b"TJGP"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _write_tensor(buf, name: str, arr: np.ndarray):
    tag = _DTYPE_TAGS.get(arr.dtype)
    if tag is None:
        raise ContractViolation(f"checkpoint: unsupported dtype {arr.dtype} for {name}")
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BB", tag, arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<Q", dim))
    buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"),
                                               copy=False).tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(
            f"checkpoint: expected {n} more bytes, got {len(data)}")
    return data


def _read_tensor(f):
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    tag, ndim = struct.unpack("<BB", _read_exact(f, 2))
    if tag not in _TAG_DTYPES:
        raise CheckpointShapeError(f"checkpoint: unknown dtype tag {tag} for {name}")
    shape = tuple(struct.unpack("<Q", _read_exact(f, 8))[0] for _ in range(ndim))
    dtype = _TAG_DTYPES[tag]
    n_items = int(np.prod(shape)) if shape else 1
    raw = _read_exact(f, n_items * dtype.itemsize)
    arr = np.frombuffer(raw, dtype=dtype)
    if arr.size != n_items:
        raise CheckpointShapeError(
            f"checkpoint: {name} payload disagrees with declared shape {shape}")
    return name, arr.reshape(shape).astype(dtype.newbyteorder("=")).copy()


def save_checkpoint(path, cfg: ModelConfig, params: dict, step: int = 0,
                    seed: int = 0, opt: AdamState = None):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg_bytes = cfg.to_json().encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    meta = {"step": int(step), "seed": int(seed), "has_opt": opt is not None}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    tensors = list(params.items())
    if opt is not None:
        tensors += [("opt.m." + k, v) for k, v in opt.m.items()]
        tensors += [("opt.v." + k, v) for k, v in opt.v.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, np.asarray(arr))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, expected_precision: str = None):
    """Returns (cfg, params, meta, opt_or_None); rejects cross-precision loads."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointMagicError(
                f"checkpoint: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != VERSION:
            raise CheckpointVersionError(
                f"checkpoint: format version {version}, reader supports {VERSION}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4))
        cfg = ModelConfig.from_json(_read_exact(f, cfg_len).decode("utf-8"))
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4))
        meta = json.loads(_read_exact(f, meta_len).decode("utf-8"))
        if expected_precision is not None and cfg.precision != expected_precision:
            raise CheckpointPrecisionError(
                f"checkpoint: stored precision {cfg.precision!r} cannot be cast "
                f"to requested {expected_precision!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        params, opt_m, opt_v = {}, {}, {}
        for _ in range(count):
            name, arr = _read_tensor(f)
            if name.startswith("opt.m."):
                opt_m[name[6:]] = arr
            elif name.startswith("opt.v."):
                opt_v[name[6:]] = arr
            else:
                if arr.dtype != cfg.dtype:
                    raise CheckpointPrecisionError(
                        f"checkpoint: tensor {name} has dtype {arr.dtype}, "
                        f"config declares {cfg.precision}")
                params[name] = arr
    expected = _expected_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointShapeError(f"checkpoint: missing tensor {name}")
        if params[name].shape != shape:
            raise CheckpointShapeError(
                f"checkpoint: {name} has shape {params[name].shape}, "
                f"config implies {shape}")
    opt = None
    if meta.get("has_opt"):
        opt = AdamState(step=meta["step"], m=opt_m, v=opt_v)
    return cfg, params, meta, opt


def _expected_shapes(cfg: ModelConfig) -> dict:
    shapes = {"embed": (cfg.vocab_size, cfg.d)}
    for i in range(cfg.layers):
        p = f"layers.{i}."
        shapes[p + "norm1.gain"] = (cfg.d,)
        shapes[p + "attn.w_q"] = (cfg.d, cfg.d)
        shapes[p + "attn.w_k"] = (cfg.d, cfg.d)
        shapes[p + "attn.w_v"] = (cfg.d, cfg.d)
        shapes[p + "attn.w_o"] = (cfg.d, cfg.d)
        shapes[p + "attn.w_gamma"] = (cfg.d, cfg.heads)
        shapes[p + "norm2.gain"] = (cfg.d,)
        shapes[p + "ff.w1"] = (cfg.d, cfg.ff_width)
        shapes[p + "ff.b1"] = (cfg.ff_width,)
        shapes[p + "ff.w2"] = (cfg.ff_width, cfg.d)
        shapes[p + "ff.b2"] = (cfg.d,)
    shapes["norm_f.gain"] = (cfg.d,)
    if not cfg.tie_output:
        shapes["head.w"] = (cfg.d, cfg.vocab_size)
    return shapes
