"""Kernel backend selection.

The compiled Cython core is used when it imports; otherwise, or when
``KTIE_PURE_PYTHON=1`` is set, the numpy fallback is used.
"""

import os

from . import _fallback as fallback

compiled = None
if os.environ.get("KTIE_PURE_PYTHON", "") != "1":
    try:
        from . import _core as compiled
    except ImportError:
        compiled = None

active = compiled if compiled is not None else fallback
BACKEND = "cython" if compiled is not None else "python"

sl_sweep = active.sl_sweep
ray_accumulate = active.ray_accumulate
ray_exit_accumulate = active.ray_exit_accumulate
geodesic_march = active.geodesic_march

__all__ = ["BACKEND", "compiled", "fallback", "sl_sweep", "ray_accumulate",
           "ray_exit_accumulate", "geodesic_march"]
