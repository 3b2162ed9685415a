"""Backend selection for the stepping kernels.

The compiled extension (astba._backend._fast) is used when it imported
cleanly; the numpy reference implementation is the fallback. Set
ASTBA_BACKEND=python or ASTBA_BACKEND=compiled to force one; forcing the
compiled backend when it is unavailable raises at import time.
"""

import importlib
import os

from . import layout, reference

_choice = os.environ.get("ASTBA_BACKEND", "auto").lower()

_compiled = None
if _choice in ("auto", "compiled"):
    try:
        mod = importlib.import_module(__name__ + "._fast")
    except ImportError:
        mod = None
    if mod is not None and getattr(mod, "LAYOUT_VERSION", -1) == layout.LAYOUT_VERSION:
        _compiled = mod
    elif _choice == "compiled":
        raise ImportError(
            "ASTBA_BACKEND=compiled but the compiled backend is missing or "
            "was built against a different array layout")

active = _compiled if _compiled is not None else reference
BACKEND_NAME = "compiled" if _compiled is not None else "python"


def available_backends():
    out = {"python": reference}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out
