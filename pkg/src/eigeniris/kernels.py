"""Hot-kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``EIGENIRIS_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

_compiled = None
if os.environ.get("EIGENIRIS_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"

hamming_min = _impl.hamming_min
orientation_histograms = _impl.orientation_histograms
sift_descriptors = _impl.sift_descriptors


def available_backends() -> dict:
    """Name -> module for every backend that can be imported here."""
    found = {"python": _kernels_py}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
