"""Depthwise-convolution kernel dispatch.

The compiled extension is used when it imported; otherwise the numpy fallback.
``set_backend`` switches explicitly (the benchmark and the cross-backend tests
use it).
"""

from __future__ import annotations

from . import _dwconv_py

try:
    from . import _dwconv as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _dwconv_py}
if _compiled is not None:
    _BACKENDS["cython"] = _compiled

_active = _BACKENDS.get("cython", _dwconv_py)


def available() -> list[str]:
    return sorted(_BACKENDS)


def backend() -> str:
    return "cython" if _active is _compiled and _compiled is not None else "python"


def set_backend(name: str) -> str:
    """Select a backend by name and return the previously active one."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available; have {available()}")
    prev = backend()
    _active = _BACKENDS[name]
    return prev


def dw_forward(xp, w, stride, ho, wo):
    return _active.dw_forward(xp, w, stride, ho, wo)


def dw_backward_input(g, w, stride, hp, wp):
    return _active.dw_backward_input(g, w, stride, hp, wp)


def dw_backward_weight(g, xp, stride, kh, kw):
    return _active.dw_backward_weight(g, xp, stride, kh, kw)
