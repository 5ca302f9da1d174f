"""Benchmark the windowed-sinc tap accumulation: compiled kernel vs numpy.

Run with:  python benchmarks/bench_rir.py
The FARFIELD_PURE=1 environment variable forces the numpy fallback at import
time; this script times both implementations directly.
"""

import time

import numpy as np

from farfield._ism_numpy import accumulate_sinc_taps as numpy_kernel
from farfield.kernels import BACKEND
from farfield.simulate import SINC_HALF_WIDTH, RoomSpec, generate_rir

try:
    from farfield._ism_core import accumulate_sinc_taps as compiled_kernel
except ImportError:
    compiled_kernel = None


def time_kernel(kernel, n_taps, delays, amps, repeats=5):
    best = np.inf
    for _ in range(repeats):
        rir = np.zeros(n_taps)
        t0 = time.perf_counter()
        kernel(rir, delays, amps, SINC_HALF_WIDTH)
        best = min(best, time.perf_counter() - t0)
    return best, rir


def bench_raw_kernel():
    rng = np.random.default_rng(0)
    n_taps = 16000
    for n_images in (10_000, 100_000, 1_000_000):
        delays = np.ascontiguousarray(
            rng.uniform(SINC_HALF_WIDTH + 1, n_taps - SINC_HALF_WIDTH - 2, n_images)
        )
        amps = np.ascontiguousarray(rng.standard_normal(n_images) / n_images)
        t_np, ref = time_kernel(numpy_kernel, n_taps, delays, amps)
        line = f"{n_images:>9} images | numpy {t_np * 1e3:8.1f} ms"
        if compiled_kernel is not None:
            t_c, out = time_kernel(compiled_kernel, n_taps, delays, amps)
            np.testing.assert_allclose(out, ref, atol=1e-12)
            line += f" | compiled {t_c * 1e3:8.1f} ms | speedup {t_np / t_c:5.1f}x"
        print(line)


def bench_full_rir():
    room = RoomSpec(
        dimensions=np.array([6.0, 5.0, 3.0]),
        t60=0.5,
        source_positions=np.array([[1.3, 1.9, 1.4]]),
        receiver_positions=np.array([[4.2, 3.1, 1.6]]),
    )
    t0 = time.perf_counter()
    generate_rir(room, 0, 0, 16000)
    print(f"full RIR (t60 0.5 s, active backend '{BACKEND}'): "
          f"{(time.perf_counter() - t0) * 1e3:.1f} ms")


if __name__ == "__main__":
    print(f"active backend: {BACKEND}")
    if compiled_kernel is None:
        print("compiled kernel unavailable; timing numpy fallback only")
    bench_raw_kernel()
    bench_full_rir()
