"""Whole-image kernel backends.

The compiled ``_core`` extension is used when it imports; otherwise the
numpy ``_fallback`` is. Setting ``PKN_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_BACKENDS = {"numpy": _fallback}
if _core is not None:
    _BACKENDS["cython"] = _core

if os.environ.get("PKN_PURE_PYTHON") or _core is None:
    impl = _fallback
else:
    impl = _core

NAME = impl.NAME


def available() -> list:
    return sorted(_BACKENDS)


def get(name: str):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {available()}") from None
