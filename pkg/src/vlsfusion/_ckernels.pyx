# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``. Signatures and results match."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, hypot, acos, fabs, INFINITY

cnp.import_array()


def ratio_match(query, db, labels):
    query = np.ascontiguousarray(query, dtype=np.float32)
    db = np.ascontiguousarray(db, dtype=np.float32)
    cdef const long long[::1] L = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t K = query.shape[0], M = db.shape[0]
    best_a = np.full(K, -1, dtype=np.int64)
    d1_a = np.full(K, np.inf)
    d2_a = np.full(K, np.inf)
    if K == 0 or M == 0:
        return best_a, d1_a, d2_a
    # squared distances through BLAS, same expansion as the numpy twin
    q = query.astype(np.float64)
    d = db.astype(np.float64)
    dist_a = (q * q).sum(1)[:, None] - 2.0 * q @ d.T + (d * d).sum(1)[None, :]
    cdef const double[:, ::1] dist = dist_a
    cdef long long[::1] best = best_a
    cdef double[::1] d1 = d1_a
    cdef double[::1] d2 = d2_a
    cdef Py_ssize_t i, j, arg
    cdef double s, b1, b2
    cdef long long lab
    for i in range(K):
        b1 = INFINITY
        arg = 0
        for j in range(M):
            s = dist[i, j]
            if s < 0.0:
                s = 0.0
            if s < b1:
                b1 = s
                arg = j
        lab = L[arg]
        b2 = INFINITY
        for j in range(M):
            s = dist[i, j]
            if s < 0.0:
                s = 0.0
            if L[j] != lab and s < b2:
                b2 = s
        best[i] = arg
        d1[i] = sqrt(b1)
        d2[i] = sqrt(b2)
    return best_a, d1_a, d2_a


def reprojection_errors(Rcw, tcw, pts, pix, double fx, double fy, double cx, double cy):
    cdef const double[:, ::1] R = np.ascontiguousarray(Rcw, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(tcw, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(pts, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(pix, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], i
    out_a = np.empty(n)
    cdef double[::1] out = out_a
    cdef double x, y, z
    for i in range(n):
        x = R[0, 0] * P[i, 0] + R[0, 1] * P[i, 1] + R[0, 2] * P[i, 2] + t[0]
        y = R[1, 0] * P[i, 0] + R[1, 1] * P[i, 1] + R[1, 2] * P[i, 2] + t[1]
        z = R[2, 0] * P[i, 0] + R[2, 1] * P[i, 1] + R[2, 2] * P[i, 2] + t[2]
        if z > 1e-9:
            out[i] = hypot(fx * x / z + cx - U[i, 0], fy * y / z + cy - U[i, 1])
        else:
            out[i] = INFINITY
    return out_a


def reprojection_jacobian(Rwc, twc, pts, pix, double fx, double fy, double cx, double cy):
    cdef const double[:, ::1] R = np.ascontiguousarray(Rwc, dtype=np.float64)
    cdef const double[::1] t = np.ascontiguousarray(twc, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(pts, dtype=np.float64)
    cdef const double[:, ::1] U = np.ascontiguousarray(pix, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0], i, a, b
    r_a = np.zeros((n, 2))
    J_a = np.zeros((n, 2, 6))
    valid_a = np.zeros(n, dtype=bool)
    cdef double[:, ::1] r = r_a
    cdef double[:, :, ::1] J = J_a
    cdef cnp.npy_bool[::1] valid = valid_a
    cdef double dx, dy, dz, X, Y, Z, iz, d00, d02, d11, d12
    for i in range(n):
        dx = P[i, 0] - t[0]
        dy = P[i, 1] - t[1]
        dz = P[i, 2] - t[2]
        # Xc = R^T (P - t)
        X = R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz
        Y = R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz
        Z = R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz
        if Z <= 1e-9:
            continue
        valid[i] = 1
        iz = 1.0 / Z
        r[i, 0] = fx * X * iz + cx - U[i, 0]
        r[i, 1] = fy * Y * iz + cy - U[i, 1]
        d00 = fx * iz
        d02 = -fx * X * iz * iz
        d11 = fy * iz
        d12 = -fy * Y * iz * iz
        # translation block: -dproj @ R^T
        for b in range(3):
            J[i, 0, b] = -(d00 * R[b, 0] + d02 * R[b, 2])
            J[i, 1, b] = -(d11 * R[b, 1] + d12 * R[b, 2])
        # rotation block: dproj @ [Xc]x
        J[i, 0, 3] = -d02 * Y
        J[i, 0, 4] = -d00 * Z + d02 * X
        J[i, 0, 5] = d00 * Y
        J[i, 1, 3] = d11 * Z - d12 * Y
        J[i, 1, 4] = d12 * X
        J[i, 1, 5] = -d11 * X
    return r_a, J_a, valid_a


def pose_distance_matrix(t, q, double lam):
    cdef const double[:, ::1] T = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[:, ::1] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef Py_ssize_t n = T.shape[0], i, j
    out_a = np.zeros((n, n))
    cdef double[:, ::1] out = out_a
    cdef double dx, dy, dz, dot, d
    for i in range(n):
        for j in range(i + 1, n):
            dx = T[i, 0] - T[j, 0]
            dy = T[i, 1] - T[j, 1]
            dz = T[i, 2] - T[j, 2]
            dot = fabs(Q[i, 0] * Q[j, 0] + Q[i, 1] * Q[j, 1] + Q[i, 2] * Q[j, 2] + Q[i, 3] * Q[j, 3])
            if dot > 1.0:
                dot = 1.0
            d = sqrt(dx * dx + dy * dy + dz * dz) + lam * 2.0 * acos(dot)
            out[i, j] = d
            out[j, i] = d
    return out_a


cdef inline void qmul(double* a, double* b, double* o) noexcept nogil:
    o[0] = a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3]
    o[1] = a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2]
    o[2] = a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1]
    o[3] = a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]


cdef inline void qrot(double* q, double* R) noexcept nogil:
    cdef double w = q[0], x = q[1], y = q[2], z = q[3]
    R[0] = 1 - 2 * (y * y + z * z); R[1] = 2 * (x * y - w * z); R[2] = 2 * (x * z + w * y)
    R[3] = 2 * (x * y + w * z); R[4] = 1 - 2 * (x * x + z * z); R[5] = 2 * (y * z - w * x)
    R[6] = 2 * (x * z - w * y); R[7] = 2 * (y * z + w * x); R[8] = 1 - 2 * (x * x + y * y)


cdef inline void half_block(double ew, double* ev, double sign, double scale, double* out) noexcept nogil:
    # out (3x3, row-major) = scale * 0.5 * (sign * ew * I + [ev]x)
    cdef double h = 0.5 * scale
    out[0] = h * sign * ew; out[1] = -h * ev[2]; out[2] = h * ev[1]
    out[3] = h * ev[2]; out[4] = h * sign * ew; out[5] = -h * ev[0]
    out[6] = -h * ev[1]; out[7] = h * ev[0]; out[8] = h * sign * ew


def pgo_linearize(p, q, dp, dq, vls_idx, vls_p, vls_q, double w_t, double w_q,
                  bint vio_literal, bint vls_next):
    cdef const double[:, ::1] P = np.ascontiguousarray(p, dtype=np.float64)
    cdef const double[:, ::1] Qs = np.ascontiguousarray(q, dtype=np.float64)
    cdef Py_ssize_t n = P.shape[0]
    cdef Py_ssize_t e = n - 1 if n > 0 else 0
    cdef const double[:, ::1] DP = np.ascontiguousarray(np.reshape(dp, (e, 3)), dtype=np.float64)
    cdef const double[:, ::1] DQ = np.ascontiguousarray(np.reshape(dq, (e, 4)), dtype=np.float64)
    cdef const long long[::1] VI = np.ascontiguousarray(vls_idx, dtype=np.int64)
    cdef Py_ssize_t m = VI.shape[0]
    cdef const double[:, ::1] VP = np.ascontiguousarray(np.reshape(vls_p, (m, 3)), dtype=np.float64)
    cdef const double[:, ::1] VQ = np.ascontiguousarray(np.reshape(vls_q, (m, 4)), dtype=np.float64)

    r_vio_a = np.zeros((e, 6))
    Ji_a = np.zeros((e, 6, 6))
    Jj_a = np.zeros((e, 6, 6))
    r_vls_a = np.zeros((m, 6))
    Jq_a = np.zeros((m, 3, 3))
    rot_node_a = np.zeros(m, dtype=np.int64)
    cdef double[:, ::1] r_vio = r_vio_a
    cdef double[:, :, ::1] Ji = Ji_a
    cdef double[:, :, ::1] Jj = Jj_a
    cdef double[:, ::1] r_vls = r_vls_a
    cdef double[:, :, ::1] Jq = Jq_a
    cdef long long[::1] rot_node = rot_node_a

    cdef double qi[4]
    cdef double qic[4]
    cdef double qj[4]
    cdef double meas[4]
    cdef double tmp[4]
    cdef double err[4]
    cdef double Ri[9]
    cdef double Rm[9]
    cdef double blk[9]
    cdef double v[3]
    cdef double d[3]
    cdef Py_ssize_t k, a, b, c, node
    cdef double s

    for k in range(e):
        for a in range(4):
            qi[a] = Qs[k, a]
            qj[a] = Qs[k + 1, a]
        qic[0] = qi[0]; qic[1] = -qi[1]; qic[2] = -qi[2]; qic[3] = -qi[3]
        qrot(qi, Ri)
        for a in range(3):
            d[a] = P[k + 1, a] - P[k, a]
        for a in range(3):
            v[a] = Ri[0 * 3 + a] * d[0] + Ri[1 * 3 + a] * d[1] + Ri[2 * 3 + a] * d[2]
            r_vio[k, a] = w_t * (v[a] - DP[k, a])
        meas[0] = DQ[k, 0]
        if vio_literal:
            meas[1] = DQ[k, 1]; meas[2] = DQ[k, 2]; meas[3] = DQ[k, 3]
        else:
            meas[1] = -DQ[k, 1]; meas[2] = -DQ[k, 2]; meas[3] = -DQ[k, 3]
        qmul(qic, qj, tmp)
        qmul(tmp, meas, err)
        if err[0] < 0.0:
            for a in range(4):
                err[a] = -err[a]
        for a in range(3):
            r_vio[k, 3 + a] = w_q * err[1 + a]
        for a in range(3):
            for b in range(3):
                Ji[k, a, b] = -w_t * Ri[b * 3 + a]
                Jj[k, a, b] = w_t * Ri[b * 3 + a]
        # w_t [v]x
        Ji[k, 0, 4] = -w_t * v[2]; Ji[k, 0, 5] = w_t * v[1]
        Ji[k, 1, 3] = w_t * v[2]; Ji[k, 1, 5] = -w_t * v[0]
        Ji[k, 2, 3] = -w_t * v[1]; Ji[k, 2, 4] = w_t * v[0]
        half_block(err[0], &err[1], -1.0, w_q, blk)
        for a in range(3):
            for b in range(3):
                Ji[k, 3 + a, 3 + b] = blk[a * 3 + b]
        tmp[0] = DQ[k, 0]; tmp[1] = DQ[k, 1]; tmp[2] = DQ[k, 2]; tmp[3] = DQ[k, 3]
        qrot(tmp, Rm)
        half_block(err[0], &err[1], 1.0, w_q, blk)
        for a in range(3):
            for b in range(3):
                s = 0.0
                for c in range(3):
                    if vio_literal:
                        s += blk[a * 3 + c] * Rm[b * 3 + c]
                    else:
                        s += blk[a * 3 + c] * Rm[c * 3 + b]
                Jj[k, 3 + a, 3 + b] = s

    for k in range(m):
        node = VI[k]
        for a in range(3):
            r_vls[k, a] = w_t * (P[node, a] - VP[k, a])
        if vls_next and node + 1 < n:
            node = node + 1
        rot_node[k] = node
        qic[0] = Qs[node, 0]; qic[1] = -Qs[node, 1]; qic[2] = -Qs[node, 2]; qic[3] = -Qs[node, 3]
        for a in range(4):
            tmp[a] = VQ[k, a]
        qmul(qic, tmp, err)
        if err[0] < 0.0:
            for a in range(4):
                err[a] = -err[a]
        for a in range(3):
            r_vls[k, 3 + a] = w_q * err[1 + a]
        half_block(err[0], &err[1], -1.0, w_q, blk)
        for a in range(3):
            for b in range(3):
                Jq[k, a, b] = blk[a * 3 + b]
    return r_vio_a, Ji_a, Jj_a, r_vls_a, Jq_a, rot_node_a
