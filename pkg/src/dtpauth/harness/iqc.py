"""IQC1 capture container.

Layout (little-endian)::

    b"IQC1" | u16 version | u32 entry count
    per entry: u32 key length | key (UTF-8) | u32 value length | value (UTF-8 JSON)
    u64 sample count | interleaved float32 I, Q
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InputError

MAGIC = b"IQC1"
VERSION = 1


@dataclass
class CaptureRecord:
    device_id: str
    scheme: str
    index: int
    seed: int
    samples: np.ndarray                 # complex64
    meta: dict = field(default_factory=dict)
    sync_report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples).astype(np.complex64, copy=False)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError("a capture holds a non-empty 1-D sample array")

    @property
    def capture_id(self) -> str:
        return f"{self.device_id}-{self.scheme}-{self.index:05d}"

    def header(self) -> dict:
        return {"device_id": self.device_id, "scheme": self.scheme, "index": self.index,
                "seed": self.seed, "meta": self.meta, "sync_report": self.sync_report}


def encode(rec: CaptureRecord) -> bytes:
    entries = rec.header()
    out = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for key in sorted(entries):
        k = key.encode("utf-8")
        v = json.dumps(entries[key], sort_keys=True).encode("utf-8")
        out += [struct.pack("<I", len(k)), k, struct.pack("<I", len(v)), v]
    iq = np.empty(2 * rec.samples.size, dtype="<f4")
    iq[0::2] = rec.samples.real
    iq[1::2] = rec.samples.imag
    out += [struct.pack("<Q", rec.samples.size), iq.tobytes()]
    return b"".join(out)


def decode(data: bytes) -> CaptureRecord:
    if data[:4] != MAGIC:
        raise InputError("not an IQC1 capture")
    version, n = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise InputError(f"unsupported IQC1 version {version}")
    pos = 10
    entries = {}
    for _ in range(n):
        (kl,) = struct.unpack_from("<I", data, pos)
        key = data[pos + 4: pos + 4 + kl].decode("utf-8")
        pos += 4 + kl
        (vl,) = struct.unpack_from("<I", data, pos)
        entries[key] = json.loads(data[pos + 4: pos + 4 + vl].decode("utf-8"))
        pos += 4 + vl
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) - pos != 8 * count:
        raise InputError("IQC1 sample block length mismatch")
    iq = np.frombuffer(data, dtype="<f4", offset=pos)
    samples = (iq[0::2] + 1j * iq[1::2]).astype(np.complex64)
    return CaptureRecord(entries["device_id"], entries["scheme"], int(entries["index"]),
                         int(entries["seed"]), samples, entries.get("meta", {}),
                         entries.get("sync_report", {}))


def write_capture(rec: CaptureRecord, path) -> None:
    try:
        Path(path).write_bytes(encode(rec))
    except OSError as exc:
        raise OSError(f"cannot write capture {path}: {exc}") from exc


def read_capture(path) -> CaptureRecord:
    try:
        return decode(Path(path).read_bytes())
    except OSError as exc:
        raise OSError(f"cannot read capture {path}: {exc}") from exc
