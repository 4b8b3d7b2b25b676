"""Transmitter/receiver hardware impairments and channel effects.

The IQ-imbalanced down-conversion is evaluated directly in its post-LPF
closed form at baseband; the passband product it stands for is verified
separately against a brute-force carrier simulation in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import IqFrame, make_rng
from .dsp import sinc_interp
from .errors import ConfigurationError, ContractViolationError, InputError


@dataclass(frozen=True)
class TxProfile:
    device_id: str
    alpha: float = 1.0
    phi: float = 0.0
    carrier_offset_hz: float = 0.0
    dc_offset: complex = 0j
    clock_skew_ppm: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if not abs(self.phi) < math.pi / 2:
            raise ConfigurationError("|phi| must be below pi/2")
        if not abs(self.clock_skew_ppm) < 100:
            raise ConfigurationError("|clock_skew_ppm| must be below 100")


@dataclass(frozen=True)
class RxProfile:
    beta: float = 1.0
    psi: float = 0.0
    carrier_offset_hz: float = 0.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigurationError("beta must be positive")


@dataclass(frozen=True)
class CaptureParams:
    cpo: float = 0.0
    delta_f: float = 0.0
    snr_db: float = math.inf
    channel: str = "ideal"
    k_factor: Optional[float] = None

    def __post_init__(self):
        if not (math.isinf(self.snr_db) or -20.0 <= self.snr_db <= 20.0):
            raise ConfigurationError("snr_db must lie in [-20, 20] dB (or be inf)")
        if self.channel not in ("ideal", "rician"):
            raise ConfigurationError(f"unknown channel {self.channel!r}")
        if self.channel == "rician" and not (self.k_factor and self.k_factor > 0):
            raise ConfigurationError("rician channel needs k_factor > 0")


def compose_delta_f(tx: TxProfile, rx: RxProfile, f_cs: float = 0.0, jitter_hz: float = 0.0):
    """Total carrier offset seen by the receiver, including the deliberate f_cs shift."""
    return tx.carrier_offset_hz - rx.carrier_offset_hz + f_cs + jitter_hz


def default_fleet():
    """Five emulated transmitters; every pair differs by >= 0.05 in alpha and in phi."""
    grid = [(0.90, 0.05), (0.95, -0.10), (1.00, 0.10), (1.05, -0.05), (1.10, 0.00)]
    cfo = [1800.0, -2500.0, 600.0, -900.0, 2200.0]
    skew = [12.0, -20.0, 5.0, 30.0, -8.0]
    dc = [0.02 + 0.01j, -0.015 + 0.02j, 0.01 - 0.02j, -0.02 - 0.01j, 0.005 + 0.015j]
    return [TxProfile(f"tx{i}", a, p, cfo[i], dc[i], skew[i]) for i, (a, p) in enumerate(grid)]


def default_receiver():
    return RxProfile(beta=1.005, psi=0.005, carrier_offset_hz=150.0)


def impaired_downconvert(x_i, x_q, tx: TxProfile, rx: RxProfile, cap: CaptureParams,
                         fs: float) -> IqFrame:
    """Baseband output of the imbalanced up/down-conversion chain after the LPF.

    With ``a[n] = 2*pi*delta_f*n/fs - cpo``::

        xi_hat = x_i/2 cos(a) - alpha/2 x_q sin(a + phi)
        xq_hat = -beta/2 x_i sin(a - psi) - alpha*beta/2 x_q cos(a + phi - psi)
        out    = xi_hat - j*xq_hat
    """
    xi = np.asarray(x_i, dtype=float)
    xq = np.asarray(x_q, dtype=float)
    if xi.shape != xq.shape:
        raise InputError("x_i and x_q must have equal length")
    if not fs > 2 * abs(cap.delta_f):
        raise ConfigurationError("sample rate must exceed twice the carrier offset")
    a = 2 * np.pi * cap.delta_f * np.arange(xi.size) / fs - cap.cpo
    al, ph, be, ps = tx.alpha, tx.phi, rx.beta, rx.psi
    xi_hat = 0.5 * xi * np.cos(a) - 0.5 * al * xq * np.sin(a + ph)
    xq_hat = -0.5 * be * xi * np.sin(a - ps) - 0.5 * al * be * xq * np.cos(a + ph - ps)
    return IqFrame(xi_hat - 1j * xq_hat, fs=fs,
                   meta={"device_id": tx.device_id, "cpo": cap.cpo, "delta_f": cap.delta_f})


def eq10_closed_form(x_i, x_q, tx: TxProfile, rx: RxProfile) -> np.ndarray:
    """Down-converted signal once carrier frequency and phase offsets are removed."""
    xi = np.asarray(x_i, dtype=float)
    xq = np.asarray(x_q, dtype=float)
    al, ph, be, ps = tx.alpha, tx.phi, rx.beta, rx.psi
    re = 0.5 * xi - 0.5 * al * xq * np.sin(ph)
    im = -0.5 * be * xi * np.sin(ps) + 0.5 * al * be * xq * np.cos(ph - ps)
    return re + 1j * im


def apply_dc_offset(frame: IqFrame, offset: complex) -> IqFrame:
    return frame.with_samples(frame.samples + offset)


def apply_clock_skew(frame: IqFrame, skew_ppm: float) -> IqFrame:
    """Resample at ratio ``1 + skew_ppm*1e-6``; a tone's frequency scales by its inverse."""
    if not abs(skew_ppm) < 100:
        raise ConfigurationError("|skew_ppm| must be below 100")
    if skew_ppm == 0:
        return frame.with_samples(frame.samples.copy())
    ratio = 1.0 + skew_ppm * 1e-6
    n_out = int(math.floor((len(frame) - 1) * ratio)) + 1
    t = np.arange(n_out) / ratio
    return frame.with_samples(sinc_interp(frame.samples, t), clock_skew_ppm=skew_ppm)


def apply_frequency_shift(frame: IqFrame, f_shift: float) -> IqFrame:
    if not abs(f_shift) < frame.fs / 2:
        raise ConfigurationError(f"shift {f_shift} Hz aliases at fs={frame.fs} Hz")
    if f_shift == 0:
        return frame.with_samples(frame.samples.copy())
    n = np.arange(len(frame))
    return frame.with_samples(frame.samples * np.exp(2j * np.pi * f_shift * n / frame.fs))


def awgn(frame: IqFrame, snr_db: float, seed: int, check_rms: bool = True) -> IqFrame:
    """Add complex white Gaussian noise of variance ``10**(-snr_db/10)``.

    The frame must already be RMS-normalized so that ``snr_db`` is the
    per-sample signal-to-noise ratio.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return frame.with_samples(frame.samples.copy())
    if check_rms and abs(frame.rms - 1.0) > 0.01:
        raise ContractViolationError(f"awgn expects unit-RMS input, got RMS {frame.rms:.4f}")
    var = 10.0 ** (-snr_db / 10.0)
    rng = make_rng(seed)
    noise = rng.standard_normal((2, len(frame)))
    noise = (noise[0] + 1j * noise[1]) * math.sqrt(var / 2.0)
    return frame.with_samples(frame.samples + noise, snr_db=snr_db)


def rician_gain(k_factor: float, seed: int) -> complex:
    """Single flat-fading tap with unit mean power."""
    if not k_factor > 0:
        raise ConfigurationError("k_factor must be positive")
    rng = make_rng(seed)
    los_phase = rng.uniform(-math.pi, math.pi)
    g = (rng.standard_normal() + 1j * rng.standard_normal()) / math.sqrt(2.0)
    return (math.sqrt(k_factor / (k_factor + 1.0)) * complex(math.cos(los_phase), math.sin(los_phase))
            + math.sqrt(1.0 / (k_factor + 1.0)) * g)


def rician_fade(frame: IqFrame, k_factor: float, seed: int) -> IqFrame:
    h = rician_gain(k_factor, seed)
    return frame.with_samples(frame.samples * h, channel_gain=h)
