"""Hot inner loops: Poisson-disc dart throwing, 3x3 patch extraction and 2x2 max pooling.

The compiled extension is used when it is importable; otherwise the numpy /
pure-Python fallback is selected. Setting ``CSRECON_PURE_PYTHON=1`` forces the
fallback. Both backends produce identical results.
"""
import importlib
import os

from . import _pykernels

BACKENDS = ("compiled", "python")


def _load_compiled():
    try:
        return importlib.import_module(".kernels._ckernels", __package__.rpartition(".")[0])
    except ImportError:
        return None


_compiled = _load_compiled()

if _compiled is not None and os.environ.get("CSRECON_PURE_PYTHON") != "1":
    _impl = _compiled
    BACKEND = "compiled"
else:
    _impl = _pykernels
    BACKEND = "python"


def get_backend(name):
    """Return the kernel module for ``name`` ("compiled" or "python")."""
    if name == "python":
        return _pykernels
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")


def compiled_available():
    return _compiled is not None


bridson = _impl.bridson
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward

__all__ = [
    "BACKEND",
    "bridson",
    "col2im3x3",
    "compiled_available",
    "get_backend",
    "im2col3x3",
    "maxpool2x2",
    "maxpool2x2_backward",
]
