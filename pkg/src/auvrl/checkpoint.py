"""Policy checkpoints.

Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header,
little-endian float32 array payload, then a SHA-256 digest of everything
before it.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

from . import neural as nn

MAGIC = b"AUVCKPT1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


def _header(policy: nn.GaussianPolicy, algo: str, config_hash: str, extra: dict | None) -> dict:
    arrays = policy.arrays()
    names = policy.net.names() + (["log_std"] if policy.log_std is not None else [])
    return {
        "format": FORMAT_VERSION,
        "algorithm": algo,
        "activation": policy.net.activation,
        "config_hash": config_hash,
        "sizes": policy.net.sizes,
        "layer_norm": policy.net.layer_norm,
        "squash": policy.squash,
        "free_log_std": policy.log_std is not None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)],
        "meta": extra or {},
    }


def encode(policy: nn.GaussianPolicy, algo: str, config_hash: str = "", extra: dict | None = None) -> bytes:
    head = json.dumps(_header(policy, algo, config_hash, extra), sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype=_LE_F32).tobytes() for a in policy.arrays())
    body = MAGIC + struct.pack("<I", len(head)) + head + payload
    return body + hashlib.sha256(body).digest()


def save(path, policy: nn.GaussianPolicy, algo: str, config_hash: str = "", extra: dict | None = None) -> None:
    """Write atomically (temp file, then rename)."""
    data = encode(policy, algo, config_hash, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def decode(data: bytes, expect_algo: str | None = None):
    """Returns ``(policy, header)``; the policy arrays are float32."""
    if len(data) < len(MAGIC) + 4 + 32:
        raise ChecksumError("checkpoint is truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (file truncated or corrupted)")
    if body[:len(MAGIC)] != MAGIC:
        raise HeaderError("not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<I", body[len(MAGIC):len(MAGIC) + 4])
    start = len(MAGIC) + 4
    try:
        head = json.loads(body[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"unreadable checkpoint header: {e}") from None
    if head.get("format") != FORMAT_VERSION:
        raise HeaderError(f"unsupported checkpoint format {head.get('format')!r}")
    if expect_algo is not None and head.get("algorithm") != expect_algo:
        raise HeaderError(f"checkpoint was written by {head.get('algorithm')!r}, expected {expect_algo!r}")
    arrays, off = [], start + hlen
    for spec in head["arrays"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        chunk = body[off:off + 4 * n]
        if len(chunk) != 4 * n:
            raise HeaderError(f"payload too short for array {spec['name']}")
        arrays.append(np.frombuffer(chunk, dtype=_LE_F32).astype(np.float32).reshape(spec["shape"]))
        off += 4 * n
    if off != len(body):
        raise HeaderError("payload length does not match the header")
    sizes = head["sizes"]
    n_layers = len(sizes) - 1
    n_ln = n_layers - 1 if head["layer_norm"] else 0
    expected = 2 * n_layers + 2 * n_ln + (1 if head["free_log_std"] else 0)
    if len(arrays) != expected:
        raise HeaderError(f"header lists {len(arrays)} arrays, architecture needs {expected}")
    template = nn.MlpParams([None] * n_layers, [None] * n_layers, [None] * n_ln, [None] * n_ln,
                            head["activation"])
    if head["free_log_std"]:
        policy = nn.GaussianPolicy(template.with_arrays(arrays[:-1]), arrays[-1], head["squash"])
    else:
        policy = nn.GaussianPolicy(template.with_arrays(arrays), None, head["squash"])
    for W, (a, b) in zip(policy.net.weights, zip(sizes[:-1], sizes[1:])):
        if W.shape != (a, b):
            raise HeaderError(f"layer shape {W.shape} disagrees with sizes {sizes}")
    return policy, head


def load(path, expect_algo: str | None = None):
    with open(path, "rb") as fh:
        return decode(fh.read(), expect_algo)
