"""
utils/checkpoint.py · CDNW checkpoint codec for ConDA Desk

    "CDNW" u32 version u32 digest_len digest(ascii) u32 count
    count × { u32 name_len name(utf-8) u32 ndim ndim×u32 shape  f64 data }

Tensors are written in sorted name order, so identical weights give
identical bytes.
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

from utils.errors import ConfigError, DataError

MAGIC = b"CDNW"
VERSION = 1


def encode_checkpoint(params: dict, digest: str) -> bytes:
    d = digest.encode("ascii")
    out = [MAGIC, struct.pack("<II", VERSION, len(d)), d, struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes, path="<bytes>"):
    """Returns (params as float64 arrays, config digest)."""
    if buf[:4] != MAGIC:
        raise DataError(f"{path}: not a CDNW checkpoint")
    version, dlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    digest = buf[off : off + dlen].decode("ascii")
    off += dlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        if off + 8 * n > len(buf):
            raise DataError(f"{path}: truncated tensor {name!r}")
        params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return params, digest


def save_checkpoint(path, params: dict, digest: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(params, digest))


def load_checkpoint(path, expected_digest: str = None, dtype=np.float64):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    params, digest = decode_checkpoint(path.read_bytes(), path)
    if expected_digest is not None and digest != expected_digest:
        raise ConfigError(
            f"{path} was trained under config digest {digest[:12]}…, but the current sensor/model "
            f"config hashes to {expected_digest[:12]}…; evaluate with the config the checkpoint was built from"
        )
    return {k: v.astype(dtype) for k, v in params.items()}, digest


def weights_digest(params: dict) -> str:
    """sha256 over the canonical encoding of `params`; identical weights give identical digests."""
    return hashlib.sha256(encode_checkpoint(params, "")).hexdigest()
