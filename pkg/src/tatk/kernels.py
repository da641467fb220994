"""Backend selection for the convolution hot kernels.

The compiled Cython extension is preferred when importable; a pure-NumPy
implementation with identical semantics is the fallback. Set TATK_KERNELS
to ``cython`` or ``python`` to force one side (``auto`` is the default);
forcing ``cython`` when the extension is missing raises at import.

Both backends implement the same contract: float64 in, float64 out,
deterministic accumulation order for every output element.
"""

import os

from tatk import _conv_np

_requested = os.environ.get("TATK_KERNELS", "auto").lower()
if _requested not in ("auto", "cython", "python"):
    raise ValueError(
        f"TATK_KERNELS must be one of auto/cython/python, got {_requested!r}"
    )

if _requested == "python":
    _impl = _conv_np
else:
    try:
        from tatk import _conv_cy as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _conv_np

BACKEND = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel


def available_backends():
    """Names of the importable kernel backends."""
    names = ["python"]
    try:
        from tatk import _conv_cy  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    """Return the backend module for ``name`` (``cython`` or ``python``)."""
    if name == "python":
        return _conv_np
    if name == "cython":
        from tatk import _conv_cy

        return _conv_cy
    raise ValueError(f"unknown kernel backend {name!r}")
