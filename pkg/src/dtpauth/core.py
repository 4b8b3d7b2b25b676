"""Shared data containers and seeding helpers."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np


@dataclass(frozen=True)
class IqFrame:
    """Complex baseband samples plus sample rate and provenance metadata."""

    samples: np.ndarray
    fs: float
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.samples)
        if not np.iscomplexobj(s):
            s = s.astype(np.complex128)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.shape[0]

    def with_samples(self, samples, **meta) -> "IqFrame":
        """Copy of this frame carrying new samples and (merged) metadata."""
        merged = dict(self.meta)
        merged.update(meta)
        return replace(self, samples=np.asarray(samples), meta=merged)

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.abs(self.samples) ** 2)))


def as_samples(frame_or_array) -> np.ndarray:
    if isinstance(frame_or_array, IqFrame):
        return frame_or_array.samples
    return np.asarray(frame_or_array)


def derive_seed(master: int, *tags) -> int:
    """Split a master seed into an independent 63-bit child seed.

    The child is the first 8 bytes of BLAKE2b over the master seed and the
    ``repr`` of each tag, so it is stable across platforms and Python versions.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"\x1f")
        h.update(repr(tag).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))
