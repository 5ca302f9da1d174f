# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernel: windowed-sinc impulse accumulation for RIR synthesis."""

from libc.math cimport sin, cos, floor, M_PI

import numpy as np


def accumulate_sinc_taps(double[::1] rir, double[::1] delays, double[::1] amps,
                         int half_width):
    """Add a Hann-windowed sinc at each fractional delay into the buffer."""
    cdef Py_ssize_t n = rir.shape[0]
    cdef Py_ssize_t count = delays.shape[0]
    cdef Py_ssize_t i, j, pos
    cdef int base
    cdef double d, a, frac, arg, w, s
    cdef double window_scale = M_PI / (half_width + 1)
    for i in range(count):
        d = delays[i]
        a = amps[i]
        base = <int>floor(d)
        frac = d - base
        for j in range(-half_width, half_width + 1):
            pos = base + j
            if pos < 0 or pos >= n:
                continue
            arg = j - frac
            if -1e-12 < arg < 1e-12:
                s = 1.0
            else:
                s = sin(M_PI * arg) / (M_PI * arg)
            w = 0.5 * (1.0 + cos(window_scale * arg))
            rir[pos] += a * s * w
    return np.asarray(rir)
