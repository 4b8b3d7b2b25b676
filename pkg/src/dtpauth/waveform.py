"""QAM symbol generation, Gray mapping and SRRC pulse shaping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import IqFrame, make_rng
from .errors import ConfigurationError, InputError

SUPPORTED_ORDERS = (2, 4, 16, 64)


@dataclass(frozen=True)
class ModScheme:
    order: int
    phase_offset: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.order not in SUPPORTED_ORDERS:
            raise ConfigurationError(
                f"modulation order {self.order} not in {SUPPORTED_ORDERS}")
        if not self.name:
            object.__setattr__(self, "name", _default_name(self.order, self.phase_offset))

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.order))

    @property
    def rotational_symmetry(self) -> int:
        """Power that strips the modulation (m of the m-th power CFO estimator)."""
        return 2 if self.order == 2 else 4


def _default_name(order, phase_offset):
    base = "bpsk" if order == 2 else f"qam{order}"
    if phase_offset:
        base += f"_{round(math.degrees(phase_offset))}"
    return base


SCHEMES = {
    "bpsk": ModScheme(2, 0.0, "bpsk"),
    "bpsk45": ModScheme(2, math.pi / 4, "bpsk45"),
    "qam4": ModScheme(4, 0.0, "qam4"),
    "qam16": ModScheme(16, 0.0, "qam16"),
    "qam64": ModScheme(64, 0.0, "qam64"),
}


def scheme_by_name(name: str) -> ModScheme:
    try:
        return SCHEMES[name.lower()]
    except KeyError:
        raise ConfigurationError(f"unknown scheme {name!r}; known: {sorted(SCHEMES)}") from None


@dataclass(frozen=True)
class SrrcFilter:
    sps: int
    rolloff: float
    span: int
    taps: np.ndarray = field(repr=False)

    @property
    def delay(self) -> int:
        """Group delay in samples."""
        return self.span * self.sps // 2


@dataclass(frozen=True)
class ReferenceSignal:
    """Ideal pulse-shaped payload stored for receiver synchronization."""

    samples: np.ndarray
    scheme: ModScheme
    seed: int
    n_symbols: int
    filter: SrrcFilter
    symbols: np.ndarray = field(repr=False)

    @property
    def sps(self) -> int:
        return self.filter.sps


def generate_symbols(scheme: ModScheme, n: int, seed: int) -> np.ndarray:
    """Pseudo-random symbol indices in ``[0, order)``."""
    if n < 1:
        raise InputError("need at least one symbol")
    return make_rng(seed).integers(0, scheme.order, size=int(n), dtype=np.int64)


def _gray_levels(n_levels):
    """Amplitude for each Gray-coded bit pattern of an n-level PAM axis.

    Pattern 0 sits at the most positive level so index 0 lands in the first
    quadrant (and maps to +1 for BPSK).
    """
    levels = np.empty(n_levels)
    for pos in range(n_levels):
        levels[pos ^ (pos >> 1)] = (n_levels - 1) - 2 * pos
    return levels


def constellation(scheme: ModScheme) -> np.ndarray:
    """All constellation points in index order, unit average power, rotated."""
    if scheme.order == 2:
        pts = np.array([1.0, -1.0], dtype=complex)
    else:
        side = int(round(math.sqrt(scheme.order)))
        half = scheme.bits_per_symbol // 2
        lv = _gray_levels(side)
        idx = np.arange(scheme.order)
        pts = lv[idx >> half] + 1j * lv[idx & (side - 1)]
    pts = pts / np.sqrt(np.mean(np.abs(pts) ** 2))
    return pts * np.exp(1j * scheme.phase_offset)


def map_symbols(indices, scheme: ModScheme) -> np.ndarray:
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= scheme.order):
        raise InputError(f"symbol index outside [0, {scheme.order})")
    return constellation(scheme)[idx]


def srrc_design(sps: int, rolloff: float, span: int, nyquist_refine: bool = True) -> SrrcFilter:
    """Unit-energy square-root raised-cosine taps, ``span*sps + 1`` long.

    Truncating the SRRC to a short span leaves a few 1e-3 of residual ISI in
    the matched cascade. With ``nyquist_refine`` the taps get the minimum-norm
    symmetric correction that zeroes the cascade at every symbol instant.
    """
    if not 0.0 < rolloff <= 1.0:
        raise ConfigurationError(f"rolloff {rolloff} outside (0, 1]")
    if sps < 2 or span < 2:
        raise ConfigurationError("srrc_design needs sps >= 2 and span >= 2")
    if (span * sps) % 2:
        raise ConfigurationError("span*sps must be even for a centered filter")
    b = rolloff
    t = (np.arange(span * sps + 1) - span * sps / 2) / sps
    h = np.empty_like(t)
    for i, ti in enumerate(t):
        if abs(ti) < 1e-12:
            h[i] = 1.0 - b + 4 * b / math.pi
        elif abs(abs(ti) - 1.0 / (4 * b)) < 1e-9:
            h[i] = (b / math.sqrt(2)) * ((1 + 2 / math.pi) * math.sin(math.pi / (4 * b))
                                         + (1 - 2 / math.pi) * math.cos(math.pi / (4 * b)))
        else:
            num = math.sin(math.pi * ti * (1 - b)) + 4 * b * ti * math.cos(math.pi * ti * (1 + b))
            den = math.pi * ti * (1 - (4 * b * ti) ** 2)
            h[i] = num / den
    h /= np.sqrt(np.sum(h ** 2))
    if nyquist_refine:
        h = _refine_nyquist(h, sps, span)
    h = 0.5 * (h + h[::-1])
    return SrrcFilter(sps=sps, rolloff=rolloff, span=span, taps=h)


def _refine_nyquist(g, sps, span, iterations=8):
    # Gauss-Newton on the autocorrelation at lags k*sps, k=1..span.
    n = g.size
    lags = np.arange(1, span + 1) * sps
    for _ in range(iterations):
        c = np.array([np.dot(g[: n - lag], g[lag:]) for lag in lags])
        if np.max(np.abs(c)) < 1e-12:
            break
        jac = np.zeros((lags.size, n))
        for i, lag in enumerate(lags):
            jac[i, : n - lag] += g[lag:]
            jac[i, lag:] += g[: n - lag]
        g = g - np.linalg.lstsq(jac, c, rcond=None)[0]
        g = 0.5 * (g + g[::-1])
        g /= np.sqrt(np.sum(g ** 2))
    return g


def pulse_shape(symbols, filt: SrrcFilter, symbol_rate: float = 1e6) -> IqFrame:
    """Upsample by ``sps`` and apply the SRRC filter (full convolution)."""
    sym = np.asarray(symbols, dtype=complex)
    if sym.size == 0:
        raise InputError("empty symbol sequence")
    up = np.zeros(sym.size * filt.sps, dtype=complex)
    up[:: filt.sps] = sym
    out = np.convolve(up, filt.taps)
    return IqFrame(out, fs=symbol_rate * filt.sps,
                   meta={"sps": filt.sps, "n_symbols": int(sym.size), "delay": filt.delay})


def matched_filter(samples, filt: SrrcFilter) -> np.ndarray:
    """Receive-side SRRC (full convolution, adds ``span*sps`` samples)."""
    return np.convolve(np.asarray(samples), filt.taps)


def make_reference(scheme: ModScheme, n_symbols: int, seed: int,
                   filt: SrrcFilter) -> ReferenceSignal:
    idx = generate_symbols(scheme, n_symbols, seed)
    sym = map_symbols(idx, scheme)
    shaped = pulse_shape(sym, filt)
    return ReferenceSignal(samples=shaped.samples, scheme=scheme, seed=int(seed),
                           n_symbols=int(n_symbols), filter=filt, symbols=sym)
