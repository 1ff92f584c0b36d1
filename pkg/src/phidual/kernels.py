"""Backend selection for the cell kernels.

The compiled extension is used when it imports; setting ``PHIDUAL_PURE_PYTHON``
forces the numpy fallback.
"""
import os

from . import _kernels_py

_backend = _kernels_py
if not os.environ.get("PHIDUAL_PURE_PYTHON"):
    try:
        from . import _ckernels as _backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _backend = _kernels_py

BACKEND = _backend.NAME


def get_backend(name=None):
    """Kernel module by name (``"cython"`` or ``"python"``); default is the active one."""
    if name is None:
        return _backend
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


envelope_argmin = _backend.envelope_argmin
cell_fractions = _backend.cell_fractions
atom_mass = _backend.atom_mass
nearest_atom = _backend.nearest_atom
