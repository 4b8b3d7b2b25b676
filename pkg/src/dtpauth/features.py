"""Baseline fingerprint representations: DCTF images and HOS feature vectors."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .core import IqFrame
from .dtp import DtpConfig, DtpImage, histogram2d, log_normalize
from .errors import InputError

HOS_PROFILES = ("amp", "phase", "freq")
HOS_MOMENTS = ("mean", "var", "skew", "kurt")
HOS_COLUMNS = tuple(f"{p}_{m}" for p in HOS_PROFILES for m in HOS_MOMENTS)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(HOS_COLUMNS),):
            raise InputError(f"expected {len(HOS_COLUMNS)} features, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InputError("feature values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def labels(self):
        return HOS_COLUMNS

    def as_dict(self) -> dict:
        return dict(zip(HOS_COLUMNS, self.values.tolist()))

    @staticmethod
    def csv_header() -> str:
        return ",".join(HOS_COLUMNS)

    def to_csv_row(self) -> str:
        return ",".join(repr(float(v)) for v in self.values)

    @classmethod
    def from_csv_row(cls, row: str) -> "FeatureVector":
        return cls(np.array([float(v) for v in next(csv.reader(io.StringIO(row)))]))


def _samples(s):
    return s.samples if isinstance(s, IqFrame) else np.asarray(s, dtype=complex)


def dctf(s, lag: int, h: int = 100, w: int = 100, bounds=None) -> DtpImage:
    """Differential constellation trace: histogram of ``s[n]*conj(s[n-lag])``."""
    x = _samples(s)
    if lag < 1:
        raise InputError("lag must be >= 1")
    if lag >= x.size:
        raise InputError("lag must be shorter than the signal")
    d = x[lag:] * np.conj(x[:-lag])
    cfg = DtpConfig("constellation", h, w, bounds)
    counts, over = histogram2d(d.real, d.imag, cfg)
    return DtpImage(log_normalize(counts), meta={"kind": "dctf", "lag": lag, "overflow": over})


def _moments(v):
    mean = float(np.mean(v))
    var = float(np.var(v))
    if var <= 1e-24 * max(1.0, mean * mean):
        return [mean, var, 0.0, 0.0]
    return [mean, var, float(stats.skew(v)), float(stats.kurtosis(v, fisher=False))]


def hos_features(s, min_length: int = 100) -> FeatureVector:
    """Four moments of the amplitude, phase and frequency profiles (12 values).

    Amplitude is ``|s|`` over its RMS so the vector is scale-invariant; the
    phase is unwrapped and linearly detrended; the instantaneous frequency is
    the first difference of the unwrapped phase in radians per sample.
    Kurtosis is the Pearson (non-excess) form; a constant profile has
    skewness and kurtosis 0.
    """
    x = _samples(s)
    if x.size < min_length:
        raise InputError(f"need at least {min_length} samples")
    mag = np.abs(x)
    rms = np.sqrt(np.mean(mag ** 2))
    if not rms > 0:
        raise InputError("all-zero signal")
    amp = mag / rms
    ph = np.unwrap(np.angle(x))
    n = np.arange(x.size, dtype=float)
    ph = ph - np.polyval(np.polyfit(n, ph, 1), n)
    freq = np.diff(np.unwrap(np.angle(x)))
    return FeatureVector(np.array(_moments(amp) + _moments(ph) + _moments(freq)))
