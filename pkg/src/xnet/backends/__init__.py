"""Kernel backend selection.

The hot spatial kernels (convolution gather/scatter, RoI pooling) exist twice:
a compiled Cython extension (``_fastcore``) and a vectorized numpy fallback.
The compiled backend is preferred when the extension built; set
``XNET_BACKEND=numpy`` or ``XNET_BACKEND=compiled`` to force one (e.g. for the
benchmark in ``benchmarks/bench_kernels.py``).
"""

import os

from . import numpy_kernels

_BACKENDS = {"numpy": numpy_kernels}
try:
    from . import _fastcore  # type: ignore[attr-defined]

    _BACKENDS["compiled"] = _fastcore
except ImportError:
    _fastcore = None

_requested = os.environ.get("XNET_BACKEND", "auto")
if _requested == "auto":
    _active_name = "compiled" if "compiled" in _BACKENDS else "numpy"
elif _requested in _BACKENDS:
    _active_name = _requested
elif _requested == "compiled":
    raise ImportError("XNET_BACKEND=compiled but the xnet.backends._fastcore extension is not built")
else:
    raise ValueError(f"XNET_BACKEND={_requested!r} not recognized (use 'numpy', 'compiled' or 'auto')")

_active = _BACKENDS[_active_name]


def active_backend():
    return _active


def active_backend_name() -> str:
    return _active_name


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str):
    return _BACKENDS[name]
