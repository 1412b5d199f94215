"""Hot-path kernels with a compiled core and a NumPy fallback.

The Cython extension is preferred when it was built; otherwise the pure
NumPy implementation is selected at import time. Both expose the same
`time_loop` contract and are cross-checked in the test suite.
"""

from __future__ import annotations

import numpy as np

from pcsghmc._kernels.assembly import assemble_system

try:
    from pcsghmc._kernels._newmark import time_loop as _time_loop

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - depends on build environment
    from pcsghmc._kernels.newmark_py import time_loop as _time_loop

    HAVE_COMPILED = False

IMPLEMENTATION = "cython" if HAVE_COMPILED else "numpy"


def newmark_batch(masses, k_story, ground_accel, dt, zeta=0.02, impl=None):
    """Absolute floor accelerations of a shear building under base excitation.

    masses (n,), k_story (B,n), ground_accel (T,) -> (B, T, n) float64.
    `impl` forces "cython" or "numpy" (used by tests and the benchmark);
    default picks the import-time selection.
    """
    masses = np.ascontiguousarray(masses, dtype=np.float64)
    k_story = np.atleast_2d(np.asarray(k_story, dtype=np.float64))
    ag = np.ascontiguousarray(ground_accel, dtype=np.float64)
    C, Khat_inv = assemble_system(masses, k_story, dt, zeta)
    loop = _time_loop
    if impl == "numpy":
        from pcsghmc._kernels.newmark_py import time_loop as loop
    elif impl == "cython":
        from pcsghmc._kernels._newmark import time_loop as loop
    return loop(masses, np.ascontiguousarray(C), np.ascontiguousarray(Khat_inv), ag, float(dt))
