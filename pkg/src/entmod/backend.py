"""Kernel backend selection.

The encoder's row-wise kernels exist twice: a compiled Cython extension
(``entmod._fastops``) and a pure-numpy fallback (``entmod._kernels_py``).
The compiled one is preferred when it imported cleanly; set
``ENTMOD_BACKEND=python`` or ``ENTMOD_BACKEND=compiled`` to force a choice.
"""

import os

from . import _kernels_py

try:
    from . import _fastops
except ImportError:
    _fastops = None

_BACKENDS = {"python": _kernels_py}
if _fastops is not None:
    _BACKENDS["compiled"] = _fastops


def available_backends():
    return tuple(sorted(_BACKENDS))


def _pick_default():
    forced = os.environ.get("ENTMOD_BACKEND")
    if forced:
        if forced not in _BACKENDS:
            raise RuntimeError(
                f"ENTMOD_BACKEND={forced!r} but available backends are "
                f"{available_backends()}"
            )
        return _BACKENDS[forced]
    return _BACKENDS.get("compiled", _kernels_py)


ops = _pick_default()


def use(name: str):
    """Switch the active kernel backend; returns the module now in use."""
    global ops
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    ops = _BACKENDS[name]
    return ops
