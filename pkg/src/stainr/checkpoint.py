"""Checkpoint files: named float32 tensors behind a hashed config header.

Layout (all integers little-endian):
  magic b"STAINR01\\n" | version u32 | config-hash (64 ascii hex bytes) |
  record count u32 | records...
Record: name-length u16 | name utf-8 | ndim u8 | each dim u32 | payload
(float32 LE, C order). Bit-exact round trips by construction.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import NumericError

MAGIC = b"STAINR01\n"
VERSION = 1


def save_records(path, config_hash: str, records):
    """Write (name, ndarray) records; arrays are stored as float32."""
    if len(config_hash) != 64:
        raise NumericError(f"config hash must be 64 hex chars, got {len(config_hash)}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(config_hash.encode("ascii"))
        items = list(records)
        f.write(struct.pack("<I", len(items)))
        for name, arr in items:
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arr, dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def _read_exact(f, n, path, what):
    buf = f.read(n)
    if len(buf) != n:
        raise NumericError(f"{path}: truncated checkpoint while reading {what}")
    return buf


def load_records(path):
    """Read back (config_hash, dict name -> float32 array)."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise NumericError(f"cannot open checkpoint {path}: {e}") from None
    with f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise NumericError(f"{path}: not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path, "version"))
        if version != VERSION:
            raise NumericError(f"{path}: unsupported checkpoint version {version}")
        config_hash = _read_exact(f, 64, path, "config hash").decode("ascii")
        (count,) = struct.unpack("<I", _read_exact(f, 4, path, "record count"))
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(f, 2, path, "name length"))
            name = _read_exact(f, nlen, path, "name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, path, "rank"))
            shape = tuple(struct.unpack("<I", _read_exact(f, 4, path, "dim"))[0]
                          for _ in range(ndim))
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
            payload = _read_exact(f, nbytes, path, f"tensor {name}")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise NumericError(f"{path}: trailing bytes after final record")
    return config_hash, out


def save_checkpoint(path, model_params, optim_state=None):
    """Model tensors (prefix `model.`) plus optional optimizer state."""
    records = [("model." + n, t.data) for n, t in model_params.named_tensors()]
    if optim_state is not None:
        records.append(("optim.step", np.array([optim_state.step], dtype=np.float32)))
        records.extend(optim_state.named_tensors())
    save_records(path, model_params.config.hash(), records)


def load_into_model(path, model_params, optim_state=None):
    """Restore tensors in place; verifies config hash and every shape."""
    config_hash, records = load_records(path)
    expected = model_params.config.hash()
    if config_hash != expected:
        raise NumericError(
            f"{path}: checkpoint config hash {config_hash[:12]}... does not match "
            f"model config {expected[:12]}...")
    for name, t in model_params.named_tensors():
        key = "model." + name
        if key not in records:
            raise NumericError(f"{path}: checkpoint is missing tensor {key}")
        arr = records[key]
        if arr.shape != t.data.shape:
            raise NumericError(
                f"{path}: tensor {key} has shape {arr.shape}, model expects {t.data.shape}")
        t.data = arr.astype(model_params.dtype)
    if optim_state is not None and "optim.step" in records:
        optim_state.step = int(records["optim.step"][0])
        for name, _ in model_params.named_tensors():
            mk, vk = "optim.m." + name, "optim.v." + name
            if mk in records:
                optim_state.m[name] = records[mk].astype(model_params.dtype)
            if vk in records:
                optim_state.v[name] = records[vk].astype(model_params.dtype)
    return config_hash
