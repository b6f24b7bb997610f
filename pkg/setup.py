"""Build script for the compiled nearest-neighbor scan extension.

The package works without the extension (a NumPy fallback is selected at
import time), but the compiled kernel is what makes the single-threaded
throughput target reachable, so the default build compiles it.
Set PATCHBANK_SKIP_EXT=1 to build a pure-Python wheel.
"""

import os

import numpy as np
from setuptools import Extension, setup

if os.environ.get("PATCHBANK_SKIP_EXT") == "1":
    ext_modules = []
else:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "patchbank._nnscan",
                ["src/patchbank/_nnscan.pyx", "src/patchbank/_nnscan_core.c"],
                include_dirs=[np.get_include(), "src/patchbank"],
                # -ffp-contract=off pins mul+add rounding so grouped and
                # remainder row paths are bitwise identical.
                extra_compile_args=["-O3", "-march=native", "-ffp-contract=off"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
