"""Kernel backend selection.

The compiled module is used when it imports; set ``MTUDA_PURE_PYTHON=1`` to
force the numpy fallback. Both backends produce bitwise-identical results.
"""

import os

from mtuda import _pykernels

if os.environ.get("MTUDA_PURE_PYTHON") == "1":
    _impl = _pykernels
else:
    try:
        from mtuda import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.BACKEND
im2col = _impl.im2col
col2im = _impl.col2im
out_size = _pykernels.out_size


def available_backends():
    found = {"numpy": _pykernels}
    try:
        from mtuda import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
