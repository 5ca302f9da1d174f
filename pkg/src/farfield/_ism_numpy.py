"""Pure-numpy fallback for the RIR tap-accumulation kernel."""

import numpy as np

_CHUNK = 65536


def accumulate_sinc_taps(rir, delays, amps, half_width):
    """Add a Hann-windowed sinc at each fractional delay into the buffer."""
    n = len(rir)
    offsets = np.arange(-half_width, half_width + 1)
    for i in range(0, len(delays), _CHUNK):
        d = delays[i : i + _CHUNK]
        a = amps[i : i + _CHUNK]
        base = np.floor(d).astype(np.int64)
        arg = offsets[None, :] - (d - base)[:, None]
        window = 0.5 * (1.0 + np.cos(np.pi * arg / (half_width + 1)))
        vals = a[:, None] * np.sinc(arg) * window
        pos = base[:, None] + offsets[None, :]
        inside = (pos >= 0) & (pos < n)
        np.add.at(rir, pos[inside], vals[inside])
    return rir
