"""Kernel backend selection.

Two interchangeable implementations of the hot training kernels exist:

* ``fedanom.kernels._core`` - Cython extension (BLAS matmuls, fused loops)
* ``fedanom.kernels.pure``  - numpy reference

Selection happens once at import. The environment variable FEDANOM_KERNELS
overrides it: "compiled" demands the extension (ImportError if missing),
"python" forces the numpy path, "auto" (default) prefers compiled.
"""

import os

from fedanom.kernels import pure

ACT_TANH = pure.ACT_TANH
ACT_SIGMOID = pure.ACT_SIGMOID

try:
    from fedanom.kernels import _core
except ImportError:
    _core = None


def available_backends():
    names = ["python"]
    if _core is not None:
        names.append("compiled")
    return names


def get_backend(name=None):
    """Resolve a backend module by name ("auto", "python", "compiled")."""
    if name is None:
        name = os.environ.get("FEDANOM_KERNELS", "auto")
    if name == "auto":
        return _core if _core is not None else pure
    if name == "python":
        return pure
    if name == "compiled":
        if _core is None:
            raise ImportError(
                "the compiled kernels are not built; reinstall the package "
                "with a C compiler or set FEDANOM_KERNELS=python")
        return _core
    raise ValueError(f"unknown kernel backend {name!r}")


active = get_backend()


def set_backend(name):
    """Switch the process-wide backend; returns the module now active."""
    global active
    active = get_backend(name)
    return active
