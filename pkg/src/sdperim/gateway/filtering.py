"""Filter-core backend selection.

The compiled extension is used when importable; otherwise the pure-Python
engine takes over. ``SDPERIM_PURE_PYTHON=1`` forces the fallback (used by the
benchmark and the cross-implementation tests).
"""

from __future__ import annotations

import os

from . import filtercore_py

if os.environ.get("SDPERIM_PURE_PYTHON") == "1":
    _impl = filtercore_py
    BACKEND = "python"
else:
    try:
        from sdperim._native import filtercore as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = filtercore_py
        BACKEND = "python"

FilterEngine = _impl.FilterEngine
FORWARD = _impl.FORWARD
DROP = _impl.DROP


def available_engines():
    """All importable engine classes, keyed by backend name."""
    engines = {"python": filtercore_py.FilterEngine}
    try:
        from sdperim._native import filtercore as native

        engines["compiled"] = native.FilterEngine
    except ImportError:
        pass
    return engines
