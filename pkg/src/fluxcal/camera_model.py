"""Pinhole + Brown-Conrady camera geometry and thin-lens focal estimation.

Conventions: camera frame has +x right, +y down, +z forward. Normalized image
coordinates are ``(X/Z, Y/Z)`` before distortion. The radial model stops at
``k2``; there is no ``k3`` term anywhere in the toolkit (it is always zero).
Lengths are millimetres for lens/sensor quantities and metres for scene
quantities, as the field names say.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import kernels

PARAM_NAMES = ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2")

UNDISTORT_MAX_ITER = 50
UNDISTORT_TOL = 1e-10


class ThinLensError(ValueError):
    """The thin-lens equation has no real root for the requested state."""

    def __init__(self, lfl_mm: float, fd_m: float):
        self.lfl_mm = lfl_mm
        self.fd_m = fd_m
        super().__init__(
            f"thin lens not solvable for LFL={lfl_mm} mm, FD={fd_m} m: "
            f"need FD >= 4*LFL ({4 * lfl_mm / 1000.0} m)"
        )


class UndistortError(RuntimeError):
    """Iterative inversion of the distortion model did not converge."""

    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"undistortion did not converge (residual {residual:.3e})")


def _from_dict_strict(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    missing = names - set(data)
    if missing:
        raise ValueError(f"missing {cls.__name__} fields: {sorted(missing)}")
    return cls(**data)


@dataclass(frozen=True)
class SensorSpec:
    width_mm: float
    height_mm: float
    width_px: int
    height_px: int

    def __post_init__(self):
        for name in ("width_mm", "height_mm", "width_px", "height_px"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SensorSpec.{name} must be positive")
        aspect = self.pixel_width_mm / self.pixel_height_mm
        if abs(aspect - 1.0) >= 1e-3:
            raise ValueError(f"pixels are not square within 0.1% (aspect {aspect:.6f})")

    @property
    def pixel_width_mm(self) -> float:
        return self.width_mm / self.width_px

    @property
    def pixel_height_mm(self) -> float:
        return self.height_mm / self.height_px

    @property
    def pixel_size_mm(self) -> float:
        """Pixel pitch used for focal conversions (width based)."""
        return self.pixel_width_mm

    @property
    def center(self) -> tuple[float, float]:
        return self.width_px / 2.0, self.height_px / 2.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SensorSpec":
        return _from_dict_strict(cls, data)


ARRI_ALEXA_MINI = SensorSpec(width_mm=28.25, height_mm=18.17, width_px=3424, height_px=2202)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Intrinsics.{name} is not finite")
            object.__setattr__(self, name, value)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("Intrinsics require fx > 0 and fy > 0")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Intrinsics":
        values = np.asarray(values, dtype=np.float64).ravel()
        if values.shape != (8,):
            raise ValueError("expected 8 intrinsics values")
        return cls(*(float(v) for v in values))

    @classmethod
    def pinhole(cls, f: float, sensor: SensorSpec) -> "Intrinsics":
        cx, cy = sensor.center
        return cls(f, f, cx, cy)

    def check_bounds(self, sensor: SensorSpec) -> None:
        if not (0 < self.cx < sensor.width_px and 0 < self.cy < sensor.height_px):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{sensor.width_px}x{sensor.height_px} image"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Intrinsics":
        return _from_dict_strict(cls, data)


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-from-target rigid transform: ``X_cam = R @ X + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("Pose.rotation must be orthonormal with det +1")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "Pose":
        return cls(np.asarray(data["rotation"]), np.asarray(data["translation"]))


@dataclass(frozen=True)
class LensState:
    lfl_mm: float
    fd_m: float

    def __post_init__(self):
        if not (self.lfl_mm > 0 and self.fd_m > 0):
            raise ValueError("LensState requires positive LFL and FD")

    @property
    def fd_mm(self) -> float:
        return self.fd_m * 1000.0


def so3_exp(w) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``w`` (Rodrigues)."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + math.sin(theta) / theta * K + (1.0 - math.cos(theta)) / theta**2 * K @ K


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_t)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if math.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, v) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * v


def rotation_about(axis: str, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == "y":
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == "z":
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValueError(f"axis must be x, y or z, got {axis!r}")


def thin_lens_cfl(state: LensState) -> float:
    """Camera focal length (mm) of an ideal thin lens at ``state``.

    Takes the smaller root of ``CFL^2 - FD*CFL + FD*LFL = 0``. It is evaluated
    as ``2*FD*LFL / (FD + sqrt(disc))``, which is the same root without the
    cancellation of ``FD - sqrt(disc)`` when focus is far.
    """
    lfl = state.lfl_mm
    fd = state.fd_mm
    disc = fd * fd - 4.0 * fd * lfl
    if disc < 0.0:
        if disc > -1e-12 * fd * fd:
            disc = 0.0
        else:
            raise ThinLensError(state.lfl_mm, state.fd_m)
    return 2.0 * fd * lfl / (fd + math.sqrt(disc))


def thin_lens_residual(state: LensState, cfl_mm: float) -> float:
    """Relative residual of ``1/LFL = 1/CFL + 1/(FD - CFL)``."""
    lfl = state.lfl_mm
    return abs(1.0 / lfl - 1.0 / cfl_mm - 1.0 / (state.fd_mm - cfl_mm)) * lfl


def cfl_mm_to_px(cfl_mm: float, sensor: SensorSpec) -> float:
    if not cfl_mm > 0:
        raise ValueError("focal length must be positive")
    return cfl_mm / sensor.pixel_size_mm


def _coeffs(intr):
    if isinstance(intr, Intrinsics):
        return intr.k1, intr.k2, intr.p1, intr.p2
    a = np.asarray(intr, dtype=np.float64)
    return a[4], a[5], a[6], a[7]


def distort(normalized_point, intr) -> np.ndarray:
    """Apply radial (k1, k2) and tangential (p1, p2) distortion.

    Accepts a single 2-vector or an ``(N, 2)`` array of normalized coordinates.
    """
    k1, k2, p1, p2 = _coeffs(intr)
    p = np.asarray(normalized_point, dtype=np.float64)
    x, y = p[..., 0], p[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    out = np.empty_like(p)
    out[..., 0] = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    out[..., 1] = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return out


def undistort(distorted_point, intr) -> np.ndarray:
    """Invert :func:`distort` by Newton iteration on the 2x2 model Jacobian."""
    k1, k2, p1, p2 = _coeffs(intr)
    target = np.asarray(distorted_point, dtype=np.float64)
    flat = target.reshape(-1, 2)
    x = flat[:, 0].copy()
    y = flat[:, 1].copy()
    coeffs = np.array([0, 0, 0, 0, k1, k2, p1, p2], dtype=np.float64)
    for _ in range(UNDISTORT_MAX_ITER):
        xd, yd, _, (a, b, c, d) = kernels._pykernels._distort_with_derivs(x, y, coeffs)
        ex = xd - flat[:, 0]
        ey = yd - flat[:, 1]
        err = np.max(np.abs(np.concatenate([ex, ey]))) if x.size else 0.0
        if err < UNDISTORT_TOL:
            break
        det = a * d - b * c
        x = x - (d * ex - b * ey) / det
        y = y - (a * ey - c * ex) / det
    else:
        xd, yd, _, _ = kernels._pykernels._distort_with_derivs(x, y, coeffs)
        err = float(np.max(np.abs(np.concatenate([xd - flat[:, 0], yd - flat[:, 1]]))))
        if not err < UNDISTORT_TOL:
            raise UndistortError(err)
    return np.stack([x, y], axis=-1).reshape(target.shape)


def pixels_to_normalized(uv, intr: Intrinsics) -> np.ndarray:
    """Undistorted normalized coordinates of pixel observations."""
    uv = np.asarray(uv, dtype=np.float64)
    xd = np.stack([(uv[..., 0] - intr.cx) / intr.fx, (uv[..., 1] - intr.cy) / intr.fy], axis=-1)
    return undistort(xd, intr)


def project(point_3d, pose: Pose, intr: Intrinsics):
    """Project target-frame points to pixels.

    Returns ``(uv, in_front)``. Points at camera depth ``<= 1e-9`` are reported
    with ``in_front`` False and NaN pixel coordinates rather than raising.
    A single 3-vector gives a 2-vector and a scalar flag.
    """
    pts = np.asarray(point_3d, dtype=np.float64)
    single = pts.ndim == 1
    cam = pose.apply(pts.reshape(-1, 3))
    uv, in_front = kernels.project_points(cam, intr.as_array())
    if single:
        return uv[0], bool(in_front[0])
    return uv, in_front


def fsf_plane(state: LensState, sensor: SensorSpec) -> np.ndarray:
    """Corners (m, camera frame) of the in-focus field-of-view rectangle.

    Order: top-left, top-right, bottom-right, bottom-left as seen in the image.
    """
    cfl = thin_lens_cfl(state)
    s = (state.fd_mm - cfl) / cfl
    hw = s * sensor.width_mm / 2.0 / 1000.0
    hh = s * sensor.height_mm / 2.0 / 1000.0
    z = s * cfl / 1000.0
    return np.array([[-hw, -hh, z], [hw, -hh, z], [hw, hh, z], [-hw, hh, z]])
