"""Kernel backend selection.

Two interchangeable backends expose the same functions:

* ``numpy`` — pure numpy, always available, the reference.
* ``cython`` — compiled extension, used when the build produced it.

``RMOE_KERNELS`` picks one: ``auto`` (default; compiled if present),
``cython`` (fail hard if missing), or ``numpy``. Matrix multiplies are not
routed through here — both backends leave those to BLAS.
"""

from __future__ import annotations

import os

from . import numpy_backend


def _load(choice: str):
    if choice == "numpy":
        return numpy_backend
    try:
        from . import _core
    except ImportError:
        if choice == "cython":
            raise ImportError(
                "RMOE_KERNELS=cython but the compiled extension is not "
                "available; rebuild or set RMOE_KERNELS=numpy"
            ) from None
        return numpy_backend
    return _core


_choice = os.environ.get("RMOE_KERNELS", "auto").lower()
if _choice not in ("auto", "cython", "numpy"):
    raise ImportError(f"RMOE_KERNELS must be auto, cython or numpy, got {_choice!r}")

backend = _load(_choice)
backend_name: str = backend.NAME

gelu_fwd = backend.gelu_fwd
gelu_bwd = backend.gelu_bwd
layernorm_fwd = backend.layernorm_fwd
layernorm_bwd = backend.layernorm_bwd
softmax_fwd = backend.softmax_fwd
softmax_bwd = backend.softmax_bwd
cross_entropy_fwd = backend.cross_entropy_fwd
cross_entropy_bwd = backend.cross_entropy_bwd
topk_mask = backend.topk_mask
adamw_step = backend.adamw_step
sgd_step = backend.sgd_step
