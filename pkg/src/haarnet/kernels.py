"""Backend selection for the max-plus window kernels.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``HAARNET_BACKEND=python`` is set, the numpy reference
implementation is used. Both expose ``dilate_forward``, ``erode_forward`` and
``scatter_backward`` with identical results.
"""

import os

from . import _kernels_py

try:
    from . import _kernels_ext
except ImportError:  # extension not built
    _kernels_ext = None

BACKENDS = {"python": _kernels_py}
if _kernels_ext is not None:
    BACKENDS["cython"] = _kernels_ext

_requested = os.environ.get("HAARNET_BACKEND", "").lower()
if _requested == "python" or _kernels_ext is None:
    BACKEND = "python"
else:
    BACKEND = "cython"

_impl = BACKENDS[BACKEND]


def use_backend(name: str) -> None:
    """Switch the active backend for the whole process."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    BACKEND = name
    _impl = BACKENDS[name]


def dilate_forward(fp, hflip, stride, ho, wo):
    return _impl.dilate_forward(fp, hflip, stride, ho, wo)


def erode_forward(fp, hwin, stride, ho, wo):
    return _impl.erode_forward(fp, hwin, stride, ho, wo)


def scatter_backward(grad, arg, k, stride, hp, wp):
    return _impl.scatter_backward(grad, arg, k, stride, hp, wp)
