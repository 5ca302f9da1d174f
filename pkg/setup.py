from setuptools import setup, Extension

import numpy as np

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "farfield._ism_core",
                ["src/farfield/_ism_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ]
    )
except ImportError:
    # Pure-python fallback kernels are selected at import time, so the
    # package still works without Cython.
    ext_modules = []

setup(ext_modules=ext_modules)
