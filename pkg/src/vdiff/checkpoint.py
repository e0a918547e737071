"""Versioned binary checkpoint archive.

Layout (little endian)::

    magic   8 bytes  b"VDDIFFCK"
    version u32
    stage   u32
    hlen    u64      length of the JSON header that follows
    header  hlen bytes, UTF-8 JSON (sorted keys)
    blob    concatenated raw array buffers, offsets given in the header
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VDDIFFCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIIQ")
_DTYPES = {"float64": "<f8", "int64": "<i8", "uint8": "u1"}
GROUPS = ("params", "optimizer", "rng")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    stage: int
    step: int = 0
    config: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for group in GROUPS:
            arrays = getattr(self, group)
            for name in sorted(arrays):
                arr = np.asarray(arrays[name])
                kind = arr.dtype.name
                if kind not in _DTYPES:
                    raise CheckpointError(f"{group}/{name}: unsupported dtype {kind}")
                raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
                entries.append({"group": group, "name": name, "dtype": kind,
                                "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
                chunks.append(raw)
                offset += len(raw)
        header = json.dumps({"step": self.step, "config": self.config, "arrays": entries},
                            sort_keys=True, separators=(",", ":")).encode()
        return _PREFIX.pack(MAGIC, self.version, self.stage, len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREFIX.size:
            raise CheckpointError("truncated checkpoint")
        magic, version, stage, hlen = _PREFIX.unpack_from(data)
        if magic != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        start = _PREFIX.size
        header = json.loads(data[start:start + hlen].decode())
        blob = memoryview(data)[start + hlen:]
        ck = cls(stage=stage, step=header["step"], config=header["config"], version=version)
        for e in header["arrays"]:
            if e["group"] not in GROUPS:
                raise CheckpointError(f"unknown array group {e['group']!r}")
            raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise CheckpointError(f"truncated array {e['group']}/{e['name']}")
            arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
            getattr(ck, e["group"])[e["name"]] = arr
        return ck

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
