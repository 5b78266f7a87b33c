"""Backend selection for the voxel-traversal kernels.

The compiled extension is used when it imports; otherwise, or when
``RADIOMAP_PURE_PYTHON=1`` is set, the NumPy implementation is used. Both
expose ``raycast_batch``, ``segments_blocked`` and ``trace_specular``.
"""

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("RADIOMAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        log.debug("compiled kernels unavailable, using NumPy fallback")

raycast_batch = _impl.raycast_batch
segments_blocked = _impl.segments_blocked
trace_specular = _impl.trace_specular


def implementations():
    """Return the available backends as a name -> module mapping."""
    impls = {"python": _kernels_py}
    try:
        from . import _kernels

        impls["cython"] = _kernels
    except ImportError:  # pragma: no cover
        pass
    return impls
