"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the numpy
fallback. Set ``ATLMETRIC_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

_impl = _pykernels
if os.environ.get("ATLMETRIC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pykernels

BACKEND: str = _impl.BACKEND
topk_neighbors = _impl.topk_neighbors
triplet_hinge = _impl.triplet_hinge
