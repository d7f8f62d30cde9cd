"""Binary checkpoint format.

Layout::

    b"SNXC" | u32 version | u64 header length | header (UTF-8 JSON)
    | payload: little-endian float32 per parameter, header order
    | u64 checksum (BLAKE2b-64 of the payload)
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import Model, ModelConfig
from .tensor import Tensor

MAGIC = b"SNXC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_checkpoint(model: Model, path) -> None:
    header = {
        "format_version": VERSION,
        "config": model.config.to_dict(),
        "class_names": list(model.class_names),
        "parameters": [{"name": name, "shape": list(t.shape)} for name, t in model.named_parameters],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in model.named_parameters)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
        fh.write(struct.pack("<Q", _checksum(payload)))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError("truncated", f"{path}: file shorter than the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("format", f"{path}: not a checkpoint file")
    if version != VERSION:
        raise CheckpointError("version", f"{path}: format version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise CheckpointError("truncated", f"{path}: header cut short")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("format", f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != VERSION:
        raise CheckpointError("version", f"{path}: header version {header.get('format_version')}")
    shapes = [tuple(p["shape"]) for p in header["parameters"]]
    nbytes = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) != start + nbytes + 8:
        raise CheckpointError("truncated", f"{path}: expected {nbytes} payload bytes plus checksum, "
                                           f"found {len(raw) - start} bytes")
    payload = raw[start:start + nbytes]
    (stored,) = struct.unpack_from("<Q", raw, start + nbytes)
    if stored != _checksum(payload):
        raise CheckpointError("checksum", f"{path}: payload checksum mismatch")

    config = ModelConfig.from_dict(header["config"])
    model = Model(config)
    names = [n for n, _ in model.named_parameters]
    if names != [p["name"] for p in header["parameters"]]:
        raise CheckpointError("format", f"{path}: parameter list does not match the stored config")
    offset = 0
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape))
        offset += 4 * n
    model.parameters = [(i, r, Tensor(a.astype(np.float32), requires_grad=True))
                        for (i, r, _), a in zip(model.parameters, arrays)]
    return model
