"""Numpy implementation of the projection kernels.

This is the reference path: the Cython module in ``_ckernels.pyx`` must agree
with it to round-off. Intrinsics are always passed as the 8-vector
``(fx, fy, cx, cy, k1, k2, p1, p2)``; pose perturbations are ``(w, v)`` with
``R <- exp([w]x) R`` and ``t <- t + v``.
"""

from __future__ import annotations

import numpy as np

BEHIND_EPS = 1e-9


def _distort_with_derivs(x, y, intr):
    k1, k2, p1, p2 = intr[4], intr[5], intr[6], intr[7]
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    drad = 2.0 * (k1 + 2.0 * k2 * r2)
    dxd_dx = radial + x * drad * x + 2.0 * p1 * y + 6.0 * p2 * x
    dxd_dy = x * drad * y + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dx = y * drad * x + 2.0 * p1 * x + 2.0 * p2 * y
    dyd_dy = radial + y * drad * y + 6.0 * p1 * y + 2.0 * p2 * x
    return xd, yd, r2, (dxd_dx, dxd_dy, dyd_dx, dyd_dy)


def project_points(points_cam, intr):
    points_cam = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
    intr = np.asarray(intr, dtype=np.float64)
    z = points_cam[:, 2]
    in_front = z > BEHIND_EPS
    safe_z = np.where(in_front, z, 1.0)
    x = points_cam[:, 0] / safe_z
    y = points_cam[:, 1] / safe_z
    xd, yd, _, _ = _distort_with_derivs(x, y, intr)
    uv = np.empty((points_cam.shape[0], 2))
    uv[:, 0] = intr[0] * xd + intr[2]
    uv[:, 1] = intr[1] * yd + intr[3]
    uv[~in_front] = np.nan
    return uv, in_front


def _to_camera(points, frame_index, rotations, translations):
    R = rotations[frame_index]
    return np.einsum("kij,kj->ki", R, points) + translations[frame_index]


def residuals(points, frame_index, rotations, translations, intr, observed):
    pc = _to_camera(points, frame_index, rotations, translations)
    uv, _ = project_points(pc, intr)
    return uv - observed


def jacobians(points, frame_index, rotations, translations, intr):
    points = np.asarray(points, dtype=np.float64)
    intr = np.asarray(intr, dtype=np.float64)
    q = np.einsum("kij,kj->ki", rotations[frame_index], points)
    pc = q + translations[frame_index]
    Z = pc[:, 2]
    in_front = Z > BEHIND_EPS
    Z = np.where(in_front, Z, 1.0)
    x = pc[:, 0] / Z
    y = pc[:, 1] / Z
    xd, yd, r2, (a, b, c, d) = _distort_with_derivs(x, y, intr)
    fx, fy = intr[0], intr[1]
    n = points.shape[0]

    uv = np.empty((n, 2))
    uv[:, 0] = fx * xd + intr[2]
    uv[:, 1] = fy * yd + intr[3]

    Ji = np.zeros((n, 2, 8))
    Ji[:, 0, 0] = xd
    Ji[:, 1, 1] = yd
    Ji[:, 0, 2] = 1.0
    Ji[:, 1, 3] = 1.0
    Ji[:, 0, 4] = fx * x * r2
    Ji[:, 1, 4] = fy * y * r2
    Ji[:, 0, 5] = fx * x * r2 * r2
    Ji[:, 1, 5] = fy * y * r2 * r2
    Ji[:, 0, 6] = fx * 2.0 * x * y
    Ji[:, 1, 6] = fy * (r2 + 2.0 * y * y)
    Ji[:, 0, 7] = fx * (r2 + 2.0 * x * x)
    Ji[:, 1, 7] = fy * 2.0 * x * y

    # d(u, v) / d(camera point)
    inv_z = 1.0 / Z
    du = np.empty((n, 3))
    dv = np.empty((n, 3))
    du[:, 0] = fx * a * inv_z
    du[:, 1] = fx * b * inv_z
    du[:, 2] = -fx * (a * x + b * y) * inv_z
    dv[:, 0] = fy * c * inv_z
    dv[:, 1] = fy * d * inv_z
    dv[:, 2] = -fy * (c * x + d * y) * inv_z

    Jp = np.empty((n, 2, 6))
    for row, g in ((0, du), (1, dv)):
        # g . (-[q]x w)  ==  (q x g) . w
        Jp[:, row, 0:3] = np.cross(q, g)
        Jp[:, row, 3:6] = g
    uv[~in_front] = np.nan
    return uv, Ji, Jp


def _huber(e, weights, huber_delta):
    if huber_delta > 0.0:
        big = e > huber_delta
        rho = np.where(big, 2.0 * huber_delta * e - huber_delta * huber_delta, e * e)
        w_irls = np.where(big, huber_delta / np.where(big, e, 1.0), 1.0)
    else:
        rho = e * e
        w_irls = np.ones_like(e)
    return weights * rho, weights * w_irls


def robust_cost(points, frame_index, rotations, translations, intr, observed, weights, huber_delta):
    res = residuals(points, frame_index, rotations, translations, intr, observed)
    active = weights > 0
    behind = ~np.isfinite(res[:, 0]) & active
    n_behind = int(np.count_nonzero(behind))
    res = np.where(np.isfinite(res), res, 0.0)
    e = np.sqrt(np.sum(res * res, axis=1))
    rho, _ = _huber(e, weights, huber_delta)
    return float(np.sum(rho)), n_behind


def normal_equations(points, frame_index, rotations, translations, intr, observed,
                     weights, huber_delta, n_frames):
    uv, Ji, Jp = jacobians(points, frame_index, rotations, translations, intr)
    active = weights > 0
    behind = ~np.isfinite(uv[:, 0]) & active
    n_behind = int(np.count_nonzero(behind))
    res = uv - observed
    ok = np.isfinite(res[:, 0])
    res = np.where(ok[:, None], res, 0.0)
    e = np.sqrt(np.sum(res * res, axis=1))
    rho, w = _huber(e, weights, huber_delta)
    w = np.where(ok, w, 0.0)
    cost = float(np.sum(np.where(ok, rho, 0.0)))

    Jiw = Ji * w[:, None, None]
    A = np.einsum("kri,krj->ij", Jiw, Ji)
    ga = np.einsum("kri,kr->i", Jiw, res)
    Bk = np.einsum("kri,krj->kij", Jiw, Jp)
    Ck = np.einsum("kri,krj->kij", Jp * w[:, None, None], Jp)
    gk = np.einsum("kri,kr->ki", Jp * w[:, None, None], res)
    B = np.zeros((n_frames, 8, 6))
    C = np.zeros((n_frames, 6, 6))
    gp = np.zeros((n_frames, 6))
    np.add.at(B, frame_index, Bk)
    np.add.at(C, frame_index, Ck)
    np.add.at(gp, frame_index, gk)
    return cost, A, B, C, ga, gp, n_behind
