"""Receiver pre-processing: burst detection, carrier and timing recovery.

The chain turns a raw captured frame into a compensated, unit-power signal
in which only IQ-imbalance structure remains, then exposes its wrapped
instantaneous phase.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import IqFrame, as_samples
from .dsp import next_pow2, sinc_interp
from .errors import (ConfigurationError, ConvergenceError, DegenerateInputError,
                     DetectionFailedError, EstimationFailedError, InputError, StageError)
from .waveform import ReferenceSignal, matched_filter


@dataclass(frozen=True)
class SyncConfig:
    n_phases: int = 64
    mth_power: Optional[int] = None          # default: scheme's rotational symmetry
    fft_size: Optional[int] = None           # default: next pow2 >= 8x segment length
    ted_loop_bandwidth: float = 0.01         # B_n*T, normalized to the symbol rate
    ted_damping: float = 0.707
    burst_threshold_db: float = 10.0
    burst_window: int = 32
    burst_guard: int = 40                    # pulse-tail samples outside the half-power edges
    known_shift_hz: float = 0.0              # deliberate transmitter f_cs, removed first
    iq_reference_angle: float = 0.0          # expected angle of the in-phase coefficient
    cfo_peak_ratio: float = 20.0
    cpe_block: int = 32
    rx_iq: Optional[tuple] = None            # receiver's own calibrated (beta, psi)

    def __post_init__(self):
        if self.burst_guard < 0:
            raise ConfigurationError("burst_guard must be >= 0")
        if self.n_phases < 8:
            raise ConfigurationError("n_phases must be >= 8")
        if self.fft_size is not None and self.fft_size & (self.fft_size - 1):
            raise ConfigurationError("fft_size must be a power of two")
        if self.rx_iq is not None:
            beta, psi = self.rx_iq
            if not (beta > 0 and abs(psi) < math.pi / 2):
                raise ConfigurationError("rx_iq needs beta > 0 and |psi| < pi/2")


@dataclass
class SyncReport:
    coarse_cfo_hz: float = 0.0
    residual_cfo_hz: float = 0.0
    cpo_rad: float = 0.0
    residual_cpo_rad: float = 0.0
    timing_offset: float = 0.0
    timing_drift: float = 0.0
    burst_range: tuple = (0, 0)
    lag: int = 0
    bank_phase_rad: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def total_cfo_hz(self) -> float:
        return self.extra.get("known_shift_hz", 0.0) + self.coarse_cfo_hz + self.residual_cfo_hz

    def to_json(self) -> str:
        d = asdict(self)
        d["burst_range"] = list(self.burst_range)
        d["total_cfo_hz"] = self.total_cfo_hz
        return json.dumps(d, sort_keys=True)


def _wrap(x):
    return (x + math.pi) % (2 * math.pi) - math.pi


def _frame(x, fs=1.0):
    return x if isinstance(x, IqFrame) else IqFrame(np.asarray(x), fs=fs)


def remove_dc(frame):
    f = _frame(frame)
    if len(f) == 0:
        raise DegenerateInputError("empty frame")
    return f.with_samples(f.samples - np.mean(f.samples))


def normalize_rms(frame):
    f = _frame(frame)
    rms = f.rms if len(f) else 0.0
    if not rms > 0:
        raise DegenerateInputError("cannot RMS-normalize an all-zero frame")
    return f.with_samples(f.samples / rms)


def apply_rx_iq(x, beta: float, psi: float) -> np.ndarray:
    """Receiver IQ mismatch: ``I' = I``, ``Q' = beta*(Q cos(psi) - I sin(psi))``."""
    x = np.asarray(x, dtype=complex)
    return x.real + 1j * beta * (x.imag * math.cos(psi) - x.real * math.sin(psi))


def undo_rx_iq(x, beta: float, psi: float) -> np.ndarray:
    """Inverse of :func:`apply_rx_iq`."""
    x = np.asarray(x, dtype=complex)
    return x.real + 1j * (x.imag / beta + x.real * math.sin(psi)) / math.cos(psi)


def detect_burst(frame, cfg: SyncConfig = SyncConfig()) -> tuple[int, int]:
    """Locate the burst as a half-open sample interval ``[start, stop)``.

    A ``burst_window``-sample sliding power average is compared against the
    noise floor (10th percentile of window powers) raised by
    ``burst_threshold_db``. Edges are then refined to the half-power crossing
    between floor and burst level and widened by ``burst_guard`` samples,
    since a shaped burst's leading and trailing pulse tails carry little
    power but still belong to it.
    """
    x = as_samples(frame)
    w = cfg.burst_window
    if x.size < 4 * w:
        raise DetectionFailedError("frame shorter than four detection windows")
    p = np.convolve(np.abs(x) ** 2, np.ones(w) / w, mode="valid")
    peak = float(p.max())
    if not peak > 0:
        raise DetectionFailedError("frame carries no energy")
    floor = max(float(np.percentile(p, 10)), 1e-12 * peak)
    above = p > floor * 10 ** (cfg.burst_threshold_db / 10)
    if not above.any():
        raise DetectionFailedError("no window exceeds the energy threshold")
    # longest run of consecutive windows above threshold
    edges = np.diff(np.concatenate(([0], above.astype(np.int8), [0])))
    starts, stops = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    best = int(np.argmax(stops - starts))
    i0, i1 = int(starts[best]), int(stops[best])
    if i1 - i0 < 2 * w:
        raise DetectionFailedError("energy excursion too short to be a burst")
    level = float(np.median(p[i0:i1]))
    half = 0.5 * (floor + level)
    lo = i0
    while lo > 0 and p[lo - 1] > half:
        lo -= 1
    while lo < i1 and p[lo] < half:
        lo += 1
    hi = i1 - 1
    while hi + 1 < p.size and p[hi + 1] > half:
        hi += 1
    while hi > lo and p[hi] < half:
        hi -= 1
    g = cfg.burst_guard
    start = 0 if lo == 0 else max(0, lo + w // 2 - g)
    stop = x.size if hi == p.size - 1 else min(x.size, hi + w // 2 + g)
    return int(start), int(max(stop, start + 1))


def coarse_cfo(frame, m: int, fs: float, fft_size: Optional[int] = None,
               peak_ratio: float = 20.0) -> float:
    """m-th power FFT carrier offset estimate in Hz."""
    x = as_samples(frame)
    if m < 1:
        raise ConfigurationError("m must be >= 1")
    n_fft = fft_size or next_pow2(8 * x.size)
    if n_fft < x.size:
        raise ConfigurationError("fft_size shorter than the signal")
    spec = np.abs(np.fft.fft(x ** m, n_fft)) ** 2
    k = int(np.argmax(spec))
    if spec[k] < peak_ratio * np.mean(spec):
        raise EstimationFailedError("no dominant spectral line in the m-th power")
    # parabolic refinement on the log spectrum
    l, c, r = np.log(spec[(k - 1) % n_fft] + 1e-300), np.log(spec[k]), np.log(spec[(k + 1) % n_fft] + 1e-300)
    den = l - 2 * c + r
    delta = 0.5 * (l - r) / den if den < 0 else 0.0
    f = (k + float(np.clip(delta, -0.5, 0.5))) / n_fft
    if f >= 0.5:
        f -= 1.0
    return f * fs / m


def _bank_search(x, ref, n_phases):
    corr = np.correlate(x, ref, mode="valid")
    thetas = -math.pi + 2 * math.pi * np.arange(n_phases) / n_phases
    bank = np.real(np.exp(-1j * thetas)[:, None] * corr[None, :])
    i, k = np.unravel_index(int(np.argmax(bank)), bank.shape)
    return float(thetas[i]), int(k), corr


def phase_bank(frame, ref, n_phases: int = 64) -> float:
    """Grid phase of the matched-filter bank with the largest in-phase response.

    Each filter is the time-reversed conjugate of ``ref*exp(j*Theta)`` for
    ``Theta`` on a uniform grid over [-pi, pi). Because the bank members only
    differ by a unit phasor, the winner is chosen on the real part of the
    output (the magnitude is identical across the bank).
    """
    x = as_samples(frame)
    r = ref.samples if isinstance(ref, ReferenceSignal) else as_samples(ref)
    if r.size == 0 or x.size < r.size:
        raise InputError("frame must be at least as long as the reference")
    theta, _, _ = _bank_search(x, r, n_phases)
    return theta


def _block_phasors(p, block):
    nb = p.size // block
    if nb < 2:
        raise InputError("frame too short for conjugate-product estimation")
    pb = p[: nb * block].reshape(nb, block)
    q = pb.sum(axis=1)
    mag = np.abs(pb)
    n = np.arange(nb * block, dtype=float).reshape(nb, block)
    wsum = mag.sum(axis=1)
    t = np.where(wsum > 0, (mag * n).sum(axis=1) / np.where(wsum > 0, wsum, 1), n.mean(axis=1))
    return q, t


def _phase_line(p, block, check=False):
    q, t = _block_phasors(p, block)
    w = np.abs(q)
    if not w.sum() > 0:
        raise EstimationFailedError("conjugate product carries no energy")
    ang = np.angle(q)
    if check:
        jumps = np.abs(_wrap(np.diff(ang))) > math.pi / 2
        if jumps.mean() > 0.10:
            raise EstimationFailedError("phase unwrapping failed (too many jumps)")
    u = np.unwrap(ang)
    wt = w / w.sum()
    tm = np.sum(wt * t)
    um = np.sum(wt * u)
    var_t = np.sum(wt * (t - tm) ** 2)
    slope = np.sum(wt * (t - tm) * (u - um)) / var_t if var_t > 0 else 0.0
    return um - slope * tm, slope


def cpe_refine(frame, ref, block: int = 32, reference_angle: float = 0.0, iterations: int = 3):
    """Conjugate-product estimator for the residual carrier frequency and phase.

    Fits a weighted least-squares line to the unwrapped phase of
    ``frame*conj(ref)``. The fit is then iterated against a widely-linear
    model ``A*Re(ref) + B*Im(ref)`` of the frame so that IQ-imbalance does
    not leak into the phase estimate; the intercept is defined by the angle
    of the in-phase coefficient ``A`` (expected at ``reference_angle``).

    Returns ``(corrected_frame, residual_cfo_hz, residual_cpo_rad)`` where
    the CPO is the frame's rotation at its first sample.
    """
    f = _frame(frame)
    r = ref.samples if isinstance(ref, ReferenceSignal) else as_samples(ref)
    x = f.samples
    if x.size != r.size:
        raise InputError("frame and reference must be time-aligned and of equal length")
    m = np.arange(x.size, dtype=float)
    c0, c1 = _phase_line(x * np.conj(r), block, check=True)
    basis = np.stack([r.real, r.imag], axis=1).astype(complex)
    for _ in range(iterations):
        z = x * np.exp(-1j * (c0 + c1 * m))
        coef = np.linalg.lstsq(basis, z, rcond=None)[0]
        model = basis @ coef
        d0, d1 = _phase_line(z * np.conj(model), block)
        c0 += d0
        c1 += d1
    z = x * np.exp(-1j * (c0 + c1 * m))
    coef = np.linalg.lstsq(basis, z, rcond=None)[0]
    c0 += float(np.angle(coef[0])) - reference_angle
    corrected = x * np.exp(-1j * (c0 + c1 * m))
    return f.with_samples(corrected), float(c1 * f.fs / (2 * math.pi)), float(_wrap(c0))


def _interp_at(x, t):
    return complex(sinc_interp(x, np.array([t]))[0])


def timing_recover(frame, sps: int, cfg: SyncConfig = SyncConfig(), start: int = 0,
                   n_symbols: Optional[int] = None, initial_offset: float = 0.0,
                   model=None):
    """Gardner timing-error detector driving a proportional-integral loop.

    Symbol instants are nominally at ``start + k*sps``. The loop tracks the
    fractional offset ``tau_k`` per symbol; the frame is then resampled at
    ``n + tau(n)`` so the output keeps ``sps`` samples per symbol with the
    recovered clock. Returns ``(frame, taus)``.

    ``model`` optionally supplies the noise-free expected waveform on the
    nominal clock (e.g. the known payload through the fitted IQ model). Its
    detector output at the nominal instants is the data-pattern self-noise
    of the Gardner detector, and is subtracted from every error sample.
    """
    f = _frame(frame)
    x = f.samples
    if model is not None:
        model = np.asarray(model, dtype=complex)
        if model.shape != x.shape:
            raise InputError("model must match the frame length")
    if sps < 4:
        raise ConfigurationError("timing recovery needs sps >= 4")
    if n_symbols is None:
        n_symbols = (x.size - start) // sps
    if n_symbols < 8:
        raise InputError("too few symbols for timing recovery")
    half = sps / 2.0
    power = float(np.mean(np.abs(x[start:start + n_symbols * sps]) ** 2)) or 1.0

    def gardner(v, tk, tprev):
        yk, yp, ym = _interp_at(v, tk), _interp_at(v, tprev), _interp_at(v, tk - half)
        return float(np.real((yp - yk) * np.conj(ym)))

    pattern = np.zeros(n_symbols)
    if model is not None:
        tn = start + np.arange(n_symbols) * sps
        ym = sinc_interp(model, np.concatenate(([start - sps], tn)).astype(float))
        yh = sinc_interp(model, tn - half)
        pattern = np.real((ym[:-1] - ym[1:]) * np.conj(yh))

    def ted(tk, tprev):
        k = int(round((tk - start) / sps))
        return (gardner(x, tk, tprev) - pattern[min(k, n_symbols - 1)]) / power

    # detector gain from the measured S-curve slope around the initial offset
    probe = range(1, n_symbols, max(1, n_symbols // 64))

    def mean_err(d):
        return np.mean([ted(start + k * sps + initial_offset + d,
                            start + (k - 1) * sps + initial_offset + d) for k in probe])

    gain = (mean_err(0.25) - mean_err(-0.25)) / 0.5
    if abs(gain) < 1e-6:
        gain = 1.0
    theta = cfg.ted_loop_bandwidth / (cfg.ted_damping + 1.0 / (4 * cfg.ted_damping))
    den = 1 + 2 * cfg.ted_damping * theta + theta ** 2
    kp = 4 * cfg.ted_damping * theta / den
    ki = 4 * theta ** 2 / den

    taus = np.empty(n_symbols)
    errs = np.zeros(n_symbols)
    tau = initial_offset
    integ = 0.0
    taus[0] = tau
    t_prev = start + tau
    for k in range(1, n_symbols):
        tk = start + k * sps + tau
        e = ted(tk, t_prev) / gain
        errs[k] = e
        integ += ki * e
        tau -= kp * e + integ
        if not abs(tau) < sps / 2:
            raise ConvergenceError(f"timing loop left the +-sps/2 range at symbol {k}")
        taus[k] = tau
        t_prev = tk
    q = n_symbols // 4
    if q >= 8:
        early, late = np.var(errs[q:2 * q]), np.var(errs[3 * q:])
        if late > 4 * early and late > 1e-2:
            raise ConvergenceError("timing error variance grows in the last quarter")
    nominal = start + np.arange(n_symbols) * sps
    n = np.arange(x.size)
    out = sinc_interp(x, n + np.interp(n, nominal, taus))
    return f.with_samples(out, timing_offsets=taus), taus


def instantaneous_phase(s) -> np.ndarray:
    """atan2 phase mapped into [0, 2*pi); exact zeros map to 0."""
    x = as_samples(s)
    ph = np.arctan2(x.imag, x.real)
    ph = np.where(ph < 0, ph + 2 * np.pi, ph)
    ph = np.where(x == 0, 0.0, ph)
    # atan2 of a tiny negative imaginary part can round to exactly 2*pi
    return np.where(ph >= 2 * np.pi, 0.0, ph)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (DetectionFailedError, EstimationFailedError, ConvergenceError, InputError) as exc:
        raise StageError(name, exc) from exc


def preprocess(frame: IqFrame, ref: ReferenceSignal, cfg: SyncConfig = SyncConfig()):
    """Full receiver chain; returns ``(s_hat, report)``.

    ``s_hat`` holds ``n_symbols*sps`` unit-RMS samples starting at the first
    symbol instant, transients excluded. The report's ``cpo_rad`` follows the
    impairment model's sign (received rotation ``2*pi*df*n/fs - cpo``) and is
    referenced to the frame's first sample.
    """
    fs = frame.fs
    filt = ref.filter
    sps, delay = filt.sps, filt.delay
    report = SyncReport(extra={"known_shift_hz": cfg.known_shift_hz})
    x = frame.samples
    n_all = np.arange(x.size)
    if cfg.rx_iq is not None:
        # carrier rotation does not commute with the receiver's own mismatch,
        # so it is taken out first and re-imposed on the compensated signal
        x = undo_rx_iq(x, *cfg.rx_iq)
    if cfg.known_shift_hz:
        x = x * np.exp(-2j * np.pi * cfg.known_shift_hz * n_all / fs)
    x = normalize_rms(remove_dc(x)).samples

    b0, b1 = _stage("burst", detect_burst, x, cfg)
    report.burst_range = (b0, b1)
    # The payload itself has a nonzero mean, so the receiver DC estimate is
    # refreshed from the idle samples around the burst when there are enough.
    idle = np.ones(x.size, dtype=bool)
    idle[max(0, b0 - delay): b1 + delay] = False
    if idle.sum() >= 4 * cfg.burst_window:
        x = normalize_rms(x - np.mean(x[idle])).samples

    mf = matched_filter(x, filt)[delay: delay + x.size]
    ref_rc = matched_filter(ref.samples, filt)[delay: delay + ref.samples.size]

    m = cfg.mth_power or ref.scheme.rotational_symmetry
    seg = mf[b0: min(x.size, b1 + 2 * delay)]
    f_coarse = _stage("coarse_cfo", coarse_cfo, seg, m, fs, cfg.fft_size, cfg.cfo_peak_ratio)
    report.coarse_cfo_hz = f_coarse
    # de-rotate ahead of the matched filter so its passband sees the payload
    # centred and the band edges are not skewed by the offset
    y = matched_filter(x * np.exp(-2j * np.pi * f_coarse * n_all / fs), filt)[delay: delay + x.size]

    # alignment + filter bank over lags around the detected start
    lo = max(0, b0 - 4 * delay)
    hi = min(x.size, b0 + 4 * delay + ref_rc.size)
    if hi - lo < ref_rc.size:
        lo = max(0, hi - ref_rc.size - 8 * delay)
    if hi - lo < ref_rc.size:
        raise StageError("phase_bank", InputError("burst too close to frame edge"))
    theta, k, corr = _bank_search(y[lo:hi], ref_rc, cfg.n_phases)
    lag = lo + k
    frac = 0.0
    if 0 < k < corr.size - 1:
        a, b, c = np.abs(corr[k - 1]), np.abs(corr[k]), np.abs(corr[k + 1])
        den = a - 2 * b + c
        frac = float(np.clip(0.5 * (a - c) / den, -0.5, 0.5)) if den < 0 else 0.0
    report.lag = lag
    report.bank_phase_rad = theta
    aligned = y[lag: lag + ref_rc.size] * np.exp(-1j * theta)

    seg_frame, d_f, d_phi = _stage("cpe", cpe_refine, IqFrame(aligned, fs), ref_rc,
                                   cfg.cpe_block, cfg.iq_reference_angle)
    report.residual_cfo_hz = d_f
    report.residual_cpo_rad = d_phi
    # rotation of the received signal at frame sample 0
    f_total = f_coarse + d_f
    rot_lag = theta + d_phi + 2 * np.pi * f_coarse * lag / fs
    rot0 = rot_lag - 2 * np.pi * f_total * lag / fs
    report.cpo_rad = float(_wrap(-rot0))

    basis = np.stack([ref_rc.real, ref_rc.imag], axis=1).astype(complex)
    coef = np.linalg.lstsq(basis, seg_frame.samples, rcond=None)[0]
    timed, taus = _stage("timing", timing_recover, seg_frame, sps, cfg, start=delay,
                         n_symbols=ref.n_symbols, initial_offset=frac, model=basis @ coef)
    report.timing_offset = float(np.mean(taus))
    report.timing_drift = float(taus[-1] - taus[0])

    body = timed.samples[delay: delay + ref.n_symbols * sps]
    if cfg.rx_iq is not None:
        body = apply_rx_iq(body, *cfg.rx_iq)
    s_hat = normalize_rms(remove_dc(body)).samples
    out = IqFrame(s_hat, fs=fs, meta={"sps": sps, "n_symbols": ref.n_symbols,
                                      "scheme": ref.scheme.name, **frame.meta})
    return out, report
