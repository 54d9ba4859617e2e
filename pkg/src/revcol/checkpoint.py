"""Binary checkpoints.

Layout (header integers little-endian)::

    b"RVCL" | u32 version | u32 n | n bytes UTF-8 JSON config record
    entries until the trailer, each:
        u32 name length | name (UTF-8) | u8 dtype tag (1=f32, 2=f64) | u8 ndim |
        ndim x u64 dims | raw little-endian values
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import FormatError
from .model import ModelConfig, RevCol, build_model
from .optim import AdamW

__all__ = [
    "MAGIC",
    "VERSION",
    "ChecksumError",
    "VersionError",
    "write_checkpoint",
    "read_checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"RVCL"
VERSION = 1
_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    def __init__(self, found: int, expected: int):
        super().__init__(f"checkpoint version {found}, expected {expected}")
        self.found = found
        self.expected = expected


def _encode(config: dict, tensors: dict[str, np.ndarray], version: int) -> bytes:
    rec = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", version, len(rec)), rec]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _TAG_OF.get(arr.dtype)
        if tag is None:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        key = name.encode()
        parts.append(struct.pack("<I", len(key)) + key + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def write_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray],
                     version: int = VERSION) -> None:
    Path(path).write_bytes(_encode(config, tensors, version))


def read_checkpoint(path: str | Path, expected_version: int = VERSION) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(config record, name -> array)`` after verifying magic, CRC and version."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise ChecksumError(f"{path}: CRC mismatch")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != expected_version:
        raise VersionError(version, expected_version)
    pos = 12
    end = len(raw) - 4
    try:
        config = json.loads(raw[pos : pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable config record ({e})") from None
    pos += n
    tensors: dict[str, np.ndarray] = {}
    while pos < end:
        if pos + 4 > end:
            raise FormatError(f"{path}: truncated entry header")
        (ln,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + ln].decode()
        pos += ln
        if pos + 2 > end:
            raise FormatError(f"{path}: truncated entry header")
        tag, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        if tag not in _TAGS:
            raise FormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
        dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        dt = _TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > end:
            raise FormatError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(raw, dt, nbytes // dt.itemsize, pos).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    return config, tensors


def save_checkpoint(model: RevCol, opt: AdamW | None, path: str | Path, extra: dict | None = None) -> None:
    """Model parameters, then optimizer moments as ``opt.m.*`` / ``opt.v.*`` and ``opt.step``."""
    tensors = {name: p.data for name, p in model.named_parameters()}
    if opt is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, (m, v) in zip(opt.params, opt.moments):
            tensors[f"opt.m.{names[id(p)]}"] = m
        for p, (m, v) in zip(opt.params, opt.moments):
            tensors[f"opt.v.{names[id(p)]}"] = v
        tensors["opt.step"] = np.array(float(opt.step_count))
    record = {"model": model.config.to_dict()}
    if opt is not None:
        record["optimizer"] = {"betas": list(opt.betas), "weight_decay": opt.weight_decay, "eps": opt.eps}
    if extra:
        record["extra"] = extra
    write_checkpoint(path, record, tensors)


def load_checkpoint(path: str | Path) -> tuple[RevCol, AdamW | None, dict]:
    """Rebuild the model (and optimizer if saved); arrays keep their stored dtype."""
    record, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(record["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: bad model config record ({e})") from None
    model = build_model(cfg, 0)
    named = dict(model.named_parameters())
    for name, p in named.items():
        if name not in tensors:
            raise FormatError(f"{path}: missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != p.shape:
            raise FormatError(f"{path}: {name!r} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr
    unknown = [n for n in tensors if n not in named and not n.startswith("opt.")]
    if unknown:
        raise FormatError(f"{path}: unexpected tensors {unknown[:3]}")
    opt = None
    if "opt.step" in tensors:
        o = record.get("optimizer", {})
        params = list(named.values())
        moments = [(tensors[f"opt.m.{n}"], tensors[f"opt.v.{n}"]) for n in named]
        opt = AdamW(params, tuple(o.get("betas", (0.9, 0.999))), o.get("weight_decay", 0.05),
                    o.get("eps", 1e-8), int(tensors["opt.step"]), moments)
    return model, opt, record.get("extra", {})
