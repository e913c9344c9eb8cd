"""Hot per-token kernels, compiled when available.

The compiled extension ``sadp.kernels._core`` is used if it imports; otherwise
the numpy fallback is. ``SADP_KERNELS=python`` forces the fallback and
``SADP_KERNELS=cython`` makes a missing extension an import error.

Callers pass C-contiguous float64 arrays and int64 index arrays.
"""

import os
from types import ModuleType

from . import _fallback

_choice = os.environ.get("SADP_KERNELS", "auto").lower()
if _choice not in ("auto", "cython", "python"):
    raise ImportError(f"SADP_KERNELS must be auto, cython or python, not {_choice!r}")

_compiled: ModuleType | None
try:
    from . import _core as _compiled  # type: ignore[attr-defined]
except ImportError:
    _compiled = None
    if _choice == "cython":
        raise

_impl: ModuleType = _compiled if (_compiled is not None and _choice != "python") else _fallback
BACKEND = "cython" if _impl is _compiled else "python"

clip_rows = _impl.clip_rows
softmax_xent = _impl.softmax_xent
segment_sq_norms = _impl.segment_sq_norms
scatter_add_rows = _impl.scatter_add_rows


def available_backends() -> dict[str, ModuleType]:
    out: dict[str, ModuleType] = {"python": _fallback}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
