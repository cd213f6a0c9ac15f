# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled projection kernels.

Same contracts as ``_pykernels``; the normal-equation accumulation fuses the
projection, its Jacobian and the Schur-ready block sums into one pass over the
observations so nothing of size (K, 2, 14) is ever materialised.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, NAN

cnp.import_array()

cdef double BEHIND_EPS = 1e-9


cdef inline int _project_one(double X, double Y, double Z, const double[::1] intr,
                             double* u, double* v) noexcept nogil:
    cdef double x, y, r2, radial, xd, yd
    if Z <= BEHIND_EPS:
        u[0] = NAN
        v[0] = NAN
        return 0
    x = X / Z
    y = Y / Z
    r2 = x * x + y * y
    radial = 1.0 + intr[4] * r2 + intr[5] * r2 * r2
    xd = x * radial + 2.0 * intr[6] * x * y + intr[7] * (r2 + 2.0 * x * x)
    yd = y * radial + intr[6] * (r2 + 2.0 * y * y) + 2.0 * intr[7] * x * y
    u[0] = intr[0] * xd + intr[2]
    v[0] = intr[1] * yd + intr[3]
    return 1


def project_points(points_cam, intr):
    cdef const double[:, ::1] P = np.ascontiguousarray(points_cam, dtype=np.float64).reshape(-1, 3)
    cdef const double[::1] K = np.ascontiguousarray(intr, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], i
    uv_arr = np.empty((n, 2), dtype=np.float64)
    front_arr = np.empty(n, dtype=np.uint8)
    cdef double[:, ::1] uv = uv_arr
    cdef unsigned char[::1] front = front_arr
    with nogil:
        for i in range(n):
            front[i] = _project_one(P[i, 0], P[i, 1], P[i, 2], K, &uv[i, 0], &uv[i, 1])
    return uv_arr, front_arr.astype(bool)


cdef inline void _to_camera(const double[:, ::1] pts, Py_ssize_t k, Py_ssize_t f,
                            const double[:, :, ::1] R, const double[:, ::1] t,
                            double* q) noexcept nogil:
    cdef int r
    for r in range(3):
        q[r] = R[f, r, 0] * pts[k, 0] + R[f, r, 1] * pts[k, 1] + R[f, r, 2] * pts[k, 2]


def residuals(points, frame_index, rotations, translations, intr, observed):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const Py_ssize_t[::1] fi = np.ascontiguousarray(frame_index, dtype=np.intp)
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rotations, dtype=np.float64)
    cdef const double[:, ::1] t = np.ascontiguousarray(translations, dtype=np.float64)
    cdef const double[::1] K = np.ascontiguousarray(intr, dtype=np.float64)
    cdef const double[:, ::1] obs = np.ascontiguousarray(observed, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0], k, f
    cdef double q[3]
    cdef double u, v
    out_arr = np.empty((n, 2), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for k in range(n):
            f = fi[k]
            _to_camera(pts, k, f, R, t, q)
            _project_one(q[0] + t[f, 0], q[1] + t[f, 1], q[2] + t[f, 2], K, &u, &v)
            out[k, 0] = u - obs[k, 0]
            out[k, 1] = v - obs[k, 1]
    return out_arr


cdef inline int _jac_one(const double* q, const double* tt, const double[::1] K,
                         double* uv, double* Ji, double* Jp) noexcept nogil:
    # Ji is 2x8 row-major, Jp is 2x6 row-major.
    cdef double X = q[0] + tt[0], Y = q[1] + tt[1], Z = q[2] + tt[2]
    cdef double x, y, r2, radial, xd, yd, drad, a, b, c, d, iz
    cdef double fx = K[0], fy = K[1], k1 = K[4], k2 = K[5], p1 = K[6], p2 = K[7]
    cdef double gu0, gu1, gu2, gv0, gv1, gv2
    if Z <= BEHIND_EPS:
        uv[0] = NAN
        uv[1] = NAN
        return 0
    iz = 1.0 / Z
    x = X * iz
    y = Y * iz
    r2 = x * x + y * y
    radial = 1.0 + k1 * r2 + k2 * r2 * r2
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    drad = 2.0 * (k1 + 2.0 * k2 * r2)
    a = radial + x * drad * x + 2.0 * p1 * y + 6.0 * p2 * x
    b = x * drad * y + 2.0 * p1 * x + 2.0 * p2 * y
    c = y * drad * x + 2.0 * p1 * x + 2.0 * p2 * y
    d = radial + y * drad * y + 6.0 * p1 * y + 2.0 * p2 * x
    uv[0] = fx * xd + K[2]
    uv[1] = fy * yd + K[3]

    Ji[0] = xd
    Ji[1] = 0.0
    Ji[2] = 1.0
    Ji[3] = 0.0
    Ji[4] = fx * x * r2
    Ji[5] = fx * x * r2 * r2
    Ji[6] = fx * 2.0 * x * y
    Ji[7] = fx * (r2 + 2.0 * x * x)
    Ji[8] = 0.0
    Ji[9] = yd
    Ji[10] = 0.0
    Ji[11] = 1.0
    Ji[12] = fy * y * r2
    Ji[13] = fy * y * r2 * r2
    Ji[14] = fy * (r2 + 2.0 * y * y)
    Ji[15] = fy * 2.0 * x * y

    gu0 = fx * a * iz
    gu1 = fx * b * iz
    gu2 = -fx * (a * x + b * y) * iz
    gv0 = fy * c * iz
    gv1 = fy * d * iz
    gv2 = -fy * (c * x + d * y) * iz
    # q x g
    Jp[0] = q[1] * gu2 - q[2] * gu1
    Jp[1] = q[2] * gu0 - q[0] * gu2
    Jp[2] = q[0] * gu1 - q[1] * gu0
    Jp[3] = gu0
    Jp[4] = gu1
    Jp[5] = gu2
    Jp[6] = q[1] * gv2 - q[2] * gv1
    Jp[7] = q[2] * gv0 - q[0] * gv2
    Jp[8] = q[0] * gv1 - q[1] * gv0
    Jp[9] = gv0
    Jp[10] = gv1
    Jp[11] = gv2
    return 1


def jacobians(points, frame_index, rotations, translations, intr):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const Py_ssize_t[::1] fi = np.ascontiguousarray(frame_index, dtype=np.intp)
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rotations, dtype=np.float64)
    cdef const double[:, ::1] t = np.ascontiguousarray(translations, dtype=np.float64)
    cdef const double[::1] K = np.ascontiguousarray(intr, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0], k, f
    cdef double q[3]
    uv_arr = np.empty((n, 2), dtype=np.float64)
    ji_arr = np.zeros((n, 2, 8), dtype=np.float64)
    jp_arr = np.zeros((n, 2, 6), dtype=np.float64)
    cdef double[:, ::1] uv = uv_arr
    cdef double[:, :, ::1] Ji = ji_arr
    cdef double[:, :, ::1] Jp = jp_arr
    with nogil:
        for k in range(n):
            f = fi[k]
            _to_camera(pts, k, f, R, t, q)
            _jac_one(q, &t[f, 0], K, &uv[k, 0], &Ji[k, 0, 0], &Jp[k, 0, 0])
    return uv_arr, ji_arr, jp_arr


cdef inline double _huber_rho(double e, double delta, double* w) noexcept nogil:
    if delta > 0.0 and e > delta:
        w[0] = delta / e
        return 2.0 * delta * e - delta * delta
    w[0] = 1.0
    return e * e


def robust_cost(points, frame_index, rotations, translations, intr, observed, weights,
                double huber_delta):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const Py_ssize_t[::1] fi = np.ascontiguousarray(frame_index, dtype=np.intp)
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rotations, dtype=np.float64)
    cdef const double[:, ::1] t = np.ascontiguousarray(translations, dtype=np.float64)
    cdef const double[::1] K = np.ascontiguousarray(intr, dtype=np.float64)
    cdef const double[:, ::1] obs = np.ascontiguousarray(observed, dtype=np.float64)
    cdef const double[::1] wt = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0], k, f
    cdef double q[3]
    cdef double u, v, du, dv, w, cost = 0.0
    cdef long n_behind = 0
    with nogil:
        for k in range(n):
            if wt[k] <= 0.0:
                continue
            f = fi[k]
            _to_camera(pts, k, f, R, t, q)
            if not _project_one(q[0] + t[f, 0], q[1] + t[f, 1], q[2] + t[f, 2], K, &u, &v):
                n_behind += 1
                continue
            du = u - obs[k, 0]
            dv = v - obs[k, 1]
            cost += wt[k] * _huber_rho(sqrt(du * du + dv * dv), huber_delta, &w)
    return cost, n_behind


cdef inline void _zero(double* b, double* c, double* g) noexcept nogil:
    cdef int i
    for i in range(48):
        b[i] = 0.0
    for i in range(36):
        c[i] = 0.0
    for i in range(6):
        g[i] = 0.0


cdef inline void _flush(double[:, :, ::1] B, double[:, :, ::1] C, double[:, ::1] gp,
                        Py_ssize_t f, double* b, double* c, double* g) noexcept nogil:
    cdef int i, j
    for i in range(8):
        for j in range(6):
            B[f, i, j] += b[i * 6 + j]
    for i in range(6):
        gp[f, i] += g[i]
        for j in range(i, 6):
            C[f, i, j] += c[i * 6 + j]
            if j != i:
                C[f, j, i] += c[i * 6 + j]
    _zero(b, c, g)


def normal_equations(points, frame_index, rotations, translations, intr, observed,
                     weights, double huber_delta, Py_ssize_t n_frames):
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const Py_ssize_t[::1] fi = np.ascontiguousarray(frame_index, dtype=np.intp)
    cdef const double[:, :, ::1] R = np.ascontiguousarray(rotations, dtype=np.float64)
    cdef const double[:, ::1] t = np.ascontiguousarray(translations, dtype=np.float64)
    cdef const double[::1] K = np.ascontiguousarray(intr, dtype=np.float64)
    cdef const double[:, ::1] obs = np.ascontiguousarray(observed, dtype=np.float64)
    cdef const double[::1] wt = np.ascontiguousarray(weights, dtype=np.float64)
    cdef Py_ssize_t n = pts.shape[0], k, f, i, j, r
    cdef double q[3]
    cdef double uv[2]
    cdef double Ji[16]
    cdef double Jp[12]
    cdef double res[2]
    cdef double e, w, rho, cost = 0.0
    cdef long n_behind = 0

    A_arr = np.zeros((8, 8), dtype=np.float64)
    B_arr = np.zeros((n_frames, 8, 6), dtype=np.float64)
    C_arr = np.zeros((n_frames, 6, 6), dtype=np.float64)
    ga_arr = np.zeros(8, dtype=np.float64)
    gp_arr = np.zeros((n_frames, 6), dtype=np.float64)
    cdef double[:, ::1] A = A_arr
    cdef double[:, :, ::1] B = B_arr
    cdef double[:, :, ::1] C = C_arr
    cdef double[::1] ga = ga_arr
    cdef double[:, ::1] gp = gp_arr

    # per-frame blocks are summed in stack buffers and flushed when the frame
    # index changes, which keeps the inner loops branch-free
    cdef double a_loc[64]
    cdef double b_loc[48]
    cdef double c_loc[36]
    cdef double ga_loc[8]
    cdef double gp_loc[6]
    cdef Py_ssize_t cur = -1
    cdef double wj
    cdef double jv[6]
    cdef int col[6]

    with nogil:
        for i in range(64):
            a_loc[i] = 0.0
        for i in range(4):
            col[2 + i] = 4 + i
        _zero(b_loc, c_loc, gp_loc)
        for i in range(8):
            ga_loc[i] = 0.0
        for k in range(n):
            if wt[k] <= 0.0:
                continue
            f = fi[k]
            _to_camera(pts, k, f, R, t, q)
            if not _jac_one(q, &t[f, 0], K, uv, Ji, Jp):
                n_behind += 1
                continue
            if f != cur:
                if cur >= 0:
                    _flush(B, C, gp, cur, b_loc, c_loc, gp_loc)
                cur = f
            res[0] = uv[0] - obs[k, 0]
            res[1] = uv[1] - obs[k, 1]
            e = sqrt(res[0] * res[0] + res[1] * res[1])
            rho = _huber_rho(e, huber_delta, &w)
            cost += wt[k] * rho
            w = w * wt[k]
            for r in range(2):
                # row r of the intrinsics Jacobian is zero except at columns
                # r (focal), 2 + r (principal point) and 4..7 (distortion)
                jv[0] = Ji[r * 8 + r]
                jv[1] = Ji[r * 8 + 2 + r]
                for i in range(4):
                    jv[2 + i] = Ji[r * 8 + 4 + i]
                col[0] = r
                col[1] = 2 + r
                for i in range(6):
                    wj = w * jv[i]
                    ga_loc[col[i]] += wj * res[r]
                    for j in range(i, 6):
                        a_loc[col[i] * 8 + col[j]] += wj * jv[j]
                    for j in range(6):
                        b_loc[col[i] * 6 + j] += wj * Jp[r * 6 + j]
                for i in range(6):
                    wj = w * Jp[r * 6 + i]
                    gp_loc[i] += wj * res[r]
                    for j in range(i, 6):
                        c_loc[i * 6 + j] += wj * Jp[r * 6 + j]
        if cur >= 0:
            _flush(B, C, gp, cur, b_loc, c_loc, gp_loc)
        for i in range(8):
            ga[i] = ga_loc[i]
            for j in range(i, 8):
                A[i, j] = a_loc[i * 8 + j]
                A[j, i] = a_loc[i * 8 + j]
    return cost, A_arr, B_arr, C_arr, ga_arr, gp_arr, n_behind
