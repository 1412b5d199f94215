"""Build script: compiles the optional Cython time-stepping kernel.

The package works without the compiled extension (a NumPy fallback is
selected at import time), so any build failure here is downgraded to a
warning and a pure-Python install proceeds.
"""

import warnings

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/pcsghmc/_kernels/_newmark.pyx"],
        compiler_directives={"language_level": "3"},
    )
    include_dirs = [np.get_include()]
except Exception as exc:  # pragma: no cover - exercised only without Cython
    warnings.warn(f"building without compiled kernels: {exc}")
    include_dirs = []

setup(ext_modules=ext_modules, include_dirs=include_dirs)
