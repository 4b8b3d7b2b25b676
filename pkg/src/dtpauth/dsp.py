"""Small DSP primitives shared by the impairment and synchronization stages."""

import numpy as np
from scipy.special import i0

_HALF_WIDTH = 16
_KAISER_BETA = 8.0


def sinc_interp(x, t, half_width=_HALF_WIDTH, beta=_KAISER_BETA):
    """Band-limited (Kaiser-windowed sinc) interpolation of ``x`` at times ``t``.

    ``t`` is in samples of ``x``; samples outside ``[0, len(x))`` count as zero.
    """
    x = np.asarray(x)
    t = np.asarray(t, dtype=float)
    base = np.floor(t).astype(np.int64)
    frac = t - base
    k = np.arange(-half_width + 1, half_width + 1)
    idx = base[:, None] + k[None, :]
    d = frac[:, None] - k[None, :]
    win = i0(beta * np.sqrt(np.clip(1.0 - (d / half_width) ** 2, 0.0, None))) / i0(beta)
    w = np.sinc(d) * win
    valid = (idx >= 0) & (idx < x.size)
    vals = np.where(valid, x[np.clip(idx, 0, x.size - 1)], 0)
    return np.sum(vals * w, axis=1)


def fractional_delay(x, delay, **kw):
    """Shift ``x`` later by ``delay`` samples (output[n] = x(n - delay))."""
    n = np.arange(np.asarray(x).size)
    return sinc_interp(x, n - delay, **kw)


def next_pow2(n):
    return 1 << int(np.ceil(np.log2(max(1, int(n)))))
