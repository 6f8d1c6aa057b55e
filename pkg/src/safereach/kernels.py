"""Geometry kernel dispatch: compiled extension if available, numpy otherwise.

Set SAFEREACH_PURE_KERNELS=1 to force the numpy fallback (used by the
benchmark and the backend-agreement tests).
"""

import os

if os.environ.get("SAFEREACH_PURE_KERNELS"):
    from . import _kernels_py as _impl

    _compiled = None
else:
    try:
        from . import _kernels_c as _impl

        _compiled = _impl
    except ImportError:
        from . import _kernels_py as _impl

        _compiled = None

from . import _kernels_py as pure

BACKEND = _impl.BACKEND
HAVE_COMPILED = _compiled is not None
compiled = _compiled

obb_sdf_batch = _impl.obb_sdf_batch
fk_points_batch = _impl.fk_points_batch
clearance_batch = _impl.clearance_batch
min_clearance = _impl.min_clearance
