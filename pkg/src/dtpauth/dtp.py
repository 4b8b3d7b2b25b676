"""Density Trace Plots: 2D histograms of signal trajectories.

Three projections are supported. ``constellation`` (Type 1) bins every
sample at (Re, Im). ``eye`` (Type 2) bins the I and Q rails separately
against the position within a two-symbol window. ``phase`` (Type 3) bins
the wrapped instantaneous phase against the same window. Counts are then
log-normalized to 0..255.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import IqFrame
from .errors import ConfigurationError, DegenerateInputError, InputError

DTP_TYPES = ("constellation", "eye", "phase")

DEFAULT_BOUNDS = {
    "constellation": (-1.6, 1.6, -1.6, 1.6),
    "eye": (-1.0, 1.0, -1.6, 1.6),
    "phase": (-1.0, 1.0, 0.0, 2 * math.pi),
}

_MAGIC = b"DTP1"


@dataclass(frozen=True)
class DtpConfig:
    dtp_type: str = "constellation"
    h: int = 100
    w: int = 100
    bounds: Optional[tuple] = None            # (x_min, x_max, y_min, y_max)
    symbols_per_frame: Optional[int] = None   # None: one image for the whole signal

    def __post_init__(self):
        if self.dtp_type not in DTP_TYPES:
            raise ConfigurationError(f"dtp_type must be one of {DTP_TYPES}")
        if self.h < 8 or self.w < 8:
            raise ConfigurationError("h and w must be >= 8")
        x0, x1, y0, y1 = self.axis_bounds
        if not (x0 < x1 and y0 < y1):
            raise ConfigurationError("bounds need x_min < x_max and y_min < y_max")
        if self.symbols_per_frame is not None and self.symbols_per_frame < 1:
            raise ConfigurationError("symbols_per_frame must be positive")

    @property
    def axis_bounds(self) -> tuple:
        return tuple(float(b) for b in (self.bounds or DEFAULT_BOUNDS[self.dtp_type]))

    @property
    def channels(self) -> int:
        return 2 if self.dtp_type == "eye" else 1


@dataclass
class DtpImage:
    bins: np.ndarray                  # uint8 [h, w, c]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        b = np.asarray(self.bins)
        if b.ndim == 2:
            b = b[:, :, None]
        if b.ndim != 3:
            raise InputError("DtpImage bins must be [h, w, c]")
        self.bins = b.astype(np.uint8, copy=False)

    @property
    def shape(self):
        return self.bins.shape

    @property
    def channels(self) -> int:
        return self.bins.shape[2]

    def channel(self, i: int) -> np.ndarray:
        return self.bins[:, :, i]

    def to_bytes(self) -> bytes:
        h, w, c = self.bins.shape
        return _MAGIC + struct.pack("<HHB", h, w, c) + np.ascontiguousarray(self.bins).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DtpImage":
        if data[:4] != _MAGIC:
            raise InputError("not a DTP1 container")
        h, w, c = struct.unpack("<HHB", data[4:9])
        payload = np.frombuffer(data, dtype=np.uint8, offset=9)
        if payload.size != h * w * c:
            raise InputError("DTP1 payload size does not match its header")
        return cls(payload.reshape(h, w, c).copy())

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DtpImage":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class DtpStack:
    frames: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = {f.shape for f in self.frames}
        if len(shapes) > 1:
            raise InputError("all frames of a stack must share one shape")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def to_array(self) -> np.ndarray:
        """Stacked bins as ``[h, w, n_frames, c]``."""
        return np.stack([f.bins for f in self.frames], axis=2)


def bin_edges(lo: float, hi: float, n: int) -> np.ndarray:
    """``n + 1`` uniform edges, the k-th at ``lo + |hi - lo|*k/n``."""
    return lo + abs(hi - lo) * np.arange(n + 1) / n


def histogram2d(xs, ys, cfg: DtpConfig) -> tuple[np.ndarray, int]:
    """Count points into the ``h x w`` grid; returns ``(counts, overflow)``.

    Row ``r`` covers ``y in [y_r, y_{r+1})`` and column ``c`` covers
    ``x in [x_c, x_{c+1})``. Points on or beyond an upper edge, or below a
    lower one, are dropped and tallied in ``overflow``.
    """
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if xs.shape != ys.shape:
        raise InputError("x and y must have equal length")
    x0, x1, y0, y1 = cfg.axis_bounds
    xe, ye = bin_edges(x0, x1, cfg.w), bin_edges(y0, y1, cfg.h)
    col = np.searchsorted(xe, xs, side="right") - 1
    row = np.searchsorted(ye, ys, side="right") - 1
    ok = (col >= 0) & (col < cfg.w) & (row >= 0) & (row < cfg.h)
    counts = np.bincount(row[ok] * cfg.w + col[ok], minlength=cfg.h * cfg.w)
    return counts.reshape(cfg.h, cfg.w).astype(np.int64), int(xs.size - ok.sum())


def log_normalize(counts) -> np.ndarray:
    """``ceil(255*log10(v)/log10(max))`` per bin, zeros stay 0.

    If the largest count is 1 every occupied bin maps to 255.
    """
    v = np.asarray(counts)
    if np.any(v < 0):
        raise InputError("counts must be non-negative")
    out = np.zeros(v.shape, dtype=np.uint8)
    vmax = int(v.max()) if v.size else 0
    if vmax == 0:
        return out
    nz = v > 0
    if vmax == 1:
        out[nz] = 255
        return out
    scaled = np.ceil(255.0 * np.log10(v[nz].astype(float)) / math.log10(vmax) - 1e-9)
    out[nz] = np.clip(scaled, 0, 255).astype(np.uint8)
    return out


def window_time(n_samples: int, sps: int, offset: int = 0) -> np.ndarray:
    """Position of each sample within a two-symbol window, in [-1, 1) symbols."""
    idx = np.arange(offset, offset + n_samples)
    return ((idx % (2 * sps)) - sps) / sps


def project(s, cfg: DtpConfig, sps: int, offset: int = 0) -> list:
    """Map a signal to per-channel ``(x, y)`` point arrays.

    ``s`` is the complex pre-processed signal for the constellation and eye
    types and the instantaneous phase (real) for the phase type. ``offset``
    is the global index of ``s[0]`` so framed segments keep the window
    alignment of the whole signal.
    """
    v = s.samples if isinstance(s, IqFrame) else np.asarray(s)
    if v.ndim != 1:
        raise InputError("signal must be one-dimensional")
    if cfg.dtp_type == "constellation":
        if not np.iscomplexobj(v):
            raise ConfigurationError("constellation DTP needs a complex signal, not a phase sequence")
        return [(v.real, v.imag)]
    if sps < 1:
        raise ConfigurationError("sps must be positive")
    t = window_time(v.size, sps, offset)
    if cfg.dtp_type == "eye":
        if not np.iscomplexobj(v):
            raise ConfigurationError("eye DTP needs a complex signal")
        return [(t, v.real), (t, v.imag)]
    if np.iscomplexobj(v):
        raise ConfigurationError("phase DTP needs the instantaneous phase sequence")
    return [(t, v)]


def dtp_counts(s, cfg: DtpConfig, sps: int, offset: int = 0) -> tuple[np.ndarray, int]:
    """Raw counts ``[h, w, c]`` and the total overflow tally."""
    grids, over = [], 0
    for xs, ys in project(s, cfg, sps, offset):
        g, o = histogram2d(xs, ys, cfg)
        grids.append(g)
        over += o
    return np.stack(grids, axis=2), over


def _signal(s):
    v = s.samples if isinstance(s, IqFrame) else np.asarray(s)
    if v.size == 0:
        raise DegenerateInputError("empty signal")
    return v


def make_dtp2d(s, cfg: DtpConfig, sps: int, offset: int = 0, **meta) -> DtpImage:
    """Whole-signal DTP; each channel is normalized on its own grid."""
    v = _signal(s)
    counts, over = dtp_counts(v, cfg, sps, offset)
    bins = np.stack([log_normalize(counts[:, :, i]) for i in range(counts.shape[2])], axis=2)
    return DtpImage(bins, meta={"dtp_type": cfg.dtp_type, "overflow": over, **meta})


def frame_slices(n_samples: int, sps: int, symbols_per_frame: int) -> list:
    """Contiguous segment boundaries; the signal must split into whole frames."""
    seg = symbols_per_frame * sps
    if n_samples % sps or (n_samples // sps) % symbols_per_frame:
        raise ConfigurationError(
            f"{n_samples} samples at sps={sps} do not split into frames of {symbols_per_frame} symbols")
    return [slice(i, i + seg) for i in range(0, n_samples, seg)]


def make_dtp3d(s, cfg: DtpConfig, sps: int, **meta) -> DtpStack:
    if cfg.symbols_per_frame is None:
        raise ConfigurationError("3D DTP needs symbols_per_frame")
    v = _signal(s)
    frames = [make_dtp2d(v[sl], cfg, sps, offset=sl.start, frame=i, **meta)
              for i, sl in enumerate(frame_slices(v.size, sps, cfg.symbols_per_frame))]
    return DtpStack(frames, meta={"dtp_type": cfg.dtp_type, **meta})


def write_pgm(channel: np.ndarray, path) -> None:
    """Binary PGM (P5) of one channel, rows in stored order."""
    a = np.asarray(channel)
    if a.ndim != 2:
        raise InputError("PGM export takes a single [h, w] channel")
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + a.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise InputError("only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InputError("only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    payload = np.frombuffer(data, dtype=np.uint8, offset=pos, count=h * w)
    return payload.reshape(h, w).copy()
