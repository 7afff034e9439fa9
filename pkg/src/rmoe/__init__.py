"""Residual mixture-of-experts training pipelines on a tape-based autodiff core."""

from ._kernels import backend_name

__all__ = ["backend_name"]
__version__ = "0.1.0"
