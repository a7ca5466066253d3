"""Weight-file container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw little-endian float32 blocks in declaration order. The header holds
the architecture descriptor, the init seed, an architecture hash over the
descriptor and parameter table, and a SHA-256 of the parameter payload.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .core import ModelSuite, build_from_arch

MAGIC = b"MIMICWT1"
FORMAT = "mimic-weights/1"


class WeightFileError(ValueError):
    pass


def _tensors(suite: ModelSuite):
    for prefix, module in suite.modules():
        for name, t in module.state_dict().items():
            if t.is_floating_point():
                yield f"{prefix}.{name}", t


def architecture_hash(arch: dict, table) -> str:
    doc = json.dumps({"arch": arch, "params": table}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()


def suite_architecture_hash(suite: ModelSuite) -> str:
    table = [[name, list(t.shape)] for name, t in _tensors(suite)]
    return architecture_hash(suite.arch, table)


def save_weights(suite: ModelSuite, path) -> None:
    table, blocks = [], []
    for name, t in _tensors(suite):
        table.append([name, list(t.shape)])
        blocks.append(np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4").tobytes())
    payload = b"".join(blocks)
    header = {
        "format": FORMAT,
        "architecture": suite.arch,
        "seed": suite.seed,
        "params": table,
        "arch_hash": architecture_hash(suite.arch, table),
        "content_hash": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
    }
    raw = json.dumps(header, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(raw)) + raw + payload)


def read_header(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file (bad magic)")
    (n,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + n:
        raise WeightFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + n])
    except json.JSONDecodeError as e:
        raise WeightFileError(f"{path}: corrupt header ({e})") from None
    return header, data[16 + n:]


def load_weights(path, expected_arch: dict | None = None) -> ModelSuite:
    """Rebuild a suite from a weight file.

    ``expected_arch`` (an architecture descriptor) is checked against the
    stored architecture hash; a mismatch raises ``WeightFileError``.
    """
    header, payload = read_header(path)
    if header.get("format") != FORMAT:
        raise WeightFileError(f"{path}: unsupported format {header.get('format')!r}")
    if len(payload) != header["payload_bytes"]:
        raise WeightFileError(f"{path}: truncated payload ({len(payload)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["content_hash"]:
        raise WeightFileError(f"{path}: content hash mismatch")
    if expected_arch is not None:
        want = architecture_hash(expected_arch, header["params"])
        if want != header["arch_hash"]:
            raise WeightFileError(f"{path}: architecture hash mismatch (file {header['arch_hash'][:12]}, "
                                  f"expected {want[:12]})")
    suite = build_from_arch(header["architecture"], header["seed"] if header["seed"] is not None else None)
    if suite_architecture_hash(suite) != header["arch_hash"]:
        raise WeightFileError(f"{path}: architecture hash mismatch with this code version")
    offset = 0
    tensors = dict(_tensors(suite))
    with torch.no_grad():
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
            tensors[name].copy_(torch.from_numpy(arr.copy()))
            offset += 4 * count
    return suite
