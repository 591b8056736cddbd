"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is preferred when importable. Set FORESTLOC_KERNELS to
"numpy" or "cython" to force a backend (the latter raises if unavailable).
"""

import os

_requested = os.environ.get("FORESTLOC_KERNELS", "auto").lower()

if _requested == "numpy":
    from . import _numpy as _impl
elif _requested == "cython":
    from . import _core as _impl
else:
    try:
        from . import _core as _impl
    except ImportError:
        from . import _numpy as _impl

BACKEND = _impl.BACKEND
gicp_reduce = _impl.gicp_reduce
weighted_cost = _impl.weighted_cost
