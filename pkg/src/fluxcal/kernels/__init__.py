"""Hot projection kernels with a compiled backend and a numpy fallback.

The compiled module is preferred when it was built; :func:`use_backend` swaps
the active implementation at runtime (tests and the benchmark compare both).

Functions
---------
project_points
    Distorted pinhole projection of camera-frame points.
residuals
    Per-observation reprojection residuals for a multi-frame problem.
jacobians
    Projection plus analytic Jacobians w.r.t. intrinsics and pose increments.
robust_cost
    Huber-weighted reprojection cost.
normal_equations
    Block-structured Gauss-Newton system (intrinsics, per-frame poses).
"""

from __future__ import annotations

from types import ModuleType

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS: dict[str, ModuleType] = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

BACKEND = "cython" if _ckernels is not None else "python"

_NAMES = ("project_points", "residuals", "jacobians", "robust_cost", "normal_equations")


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend(name: str) -> ModuleType:
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}") from None


def use_backend(name: str) -> None:
    """Route the module-level kernel functions to backend ``name``."""
    global BACKEND
    mod = get_backend(name)
    for fn in _NAMES:
        globals()[fn] = getattr(mod, fn)
    BACKEND = name


use_backend(BACKEND)
