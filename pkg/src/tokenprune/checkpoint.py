"""Versioned binary checkpoints.

Layout: the magic b"TPRN1", a length-prefixed UTF-8 block holding the model
configuration as key=value lines, then a count of arrays followed by one
record per parameter: name length (u16), UTF-8 name, ndim (u8), dims (u32
each), and the row-major float64 payload. Everything is little-endian, so
files round-trip bit-exactly across platforms.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataError
from .model import Model, config_from_kv, config_to_kv

MAGIC = b"TPRN1"


def save_checkpoint(path, model: Model) -> None:
    config_text = "\n".join(f"{k}={v}" for k, v in config_to_kv(model.config).items())
    config_bytes = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(model.params)))
        for name, arr in model.params.items():
            name_bytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise DataError(f"checkpoint {path} is truncated")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise DataError(f"checkpoint {path} has a bad magic header")
    (config_len,) = struct.unpack("<I", take(4))
    config_text = bytes(take(config_len)).decode("utf-8")
    kv = {}
    for line in config_text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise DataError(f"checkpoint {path} has a malformed config line: {line!r}")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    try:
        config = config_from_kv(kv)
    except ValueError as exc:
        raise DataError(f"checkpoint {path} config invalid: {exc}") from exc

    (count,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        payload = take(size * 8)
        params[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if offset != len(view):
        raise DataError(f"checkpoint {path} has trailing bytes")

    expected = set(Model.init(config, seed=0).params)
    if set(params) != expected:
        missing = expected - set(params)
        extra = set(params) - expected
        raise DataError(
            f"checkpoint {path} parameter names do not match its config "
            f"(missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})"
        )
    for name, arr in params.items():
        if not np.isfinite(arr).all():
            raise DataError(f"checkpoint {path} parameter {name} has non-finite values")
    return Model(config, params)
