"""Binary checkpoint format.

Layout::

    b"MFTCKPT1"                      8-byte magic
    uint32 LE  format version
    uint64 LE  header length in bytes
    header     UTF-8 JSON: config, schema, sampling, tensor table
    payload    float32 LE values of every tensor, row-major, in table order

Each table entry is ``{"name", "shape", "offset"}`` with ``offset`` counted
in float32 elements from the start of the payload.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .ingest import EncodingSchema
from .model import MFTConfig, MFTParameters

MAGIC = b"MFTCKPT1"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def encode_checkpoint(params: MFTParameters, schema: EncodingSchema | None = None, sampling: dict | None = None, extra: dict | None = None) -> bytes:
    table, chunks, offset = [], [], 0
    for name, tensor in params.items():
        arr = np.ascontiguousarray(tensor.data, dtype=_LE_F32)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    header = {
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "schema": schema.to_dict() if schema is not None else None,
        "sampling": sampling,
        "extra": extra or {},
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)


def save_checkpoint(path, params: MFTParameters, schema: EncodingSchema | None = None, sampling: dict | None = None, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(params, schema, sampling, extra))


class Checkpoint:
    def __init__(self, params: MFTParameters, schema: EncodingSchema | None, sampling: dict | None, extra: dict):
        self.params = params
        self.schema = schema
        self.sampling = sampling
        self.extra = extra

    @property
    def config(self) -> MFTConfig:
        return self.params.config


def decode_checkpoint(blob: bytes, expected_config: MFTConfig | None = None) -> Checkpoint:
    if blob[:8] != MAGIC:
        raise DataError("not an MFT checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    start = 8 + 12
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header: {exc}") from None
    config = MFTConfig.from_dict(header["config"])
    if expected_config is not None and expected_config != config:
        raise ConfigError("checkpoint config does not match the requested model config")
    payload = np.frombuffer(blob, dtype=_LE_F32, offset=start + hlen)
    arrays = {}
    for entry in header["tensors"]:
        size = math.prod(entry["shape"])
        lo = entry["offset"]
        if lo + size > payload.size:
            raise DataError(f"checkpoint truncated at tensor {entry['name']}")
        arrays[entry["name"]] = payload[lo : lo + size].reshape(entry["shape"]).astype(np.float32)
    params = MFTParameters.from_arrays(config, arrays, dtype=np.float32)
    schema = EncodingSchema.from_dict(header["schema"]) if header.get("schema") else None
    return Checkpoint(params, schema, header.get("sampling"), header.get("extra", {}))


def load_checkpoint(path, expected_config: MFTConfig | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected_config)
