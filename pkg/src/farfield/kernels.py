"""Hot-kernel dispatch: compiled extension if available, numpy fallback otherwise.

Set FARFIELD_PURE=1 to force the fallback (useful for the benchmark and for
debugging the compiled path).
"""

import os

if os.environ.get("FARFIELD_PURE") == "1":
    from farfield._ism_numpy import accumulate_sinc_taps

    BACKEND = "numpy"
else:
    try:
        from farfield._ism_core import accumulate_sinc_taps

        BACKEND = "compiled"
    except ImportError:
        from farfield._ism_numpy import accumulate_sinc_taps

        BACKEND = "numpy"

__all__ = ["accumulate_sinc_taps", "BACKEND"]
