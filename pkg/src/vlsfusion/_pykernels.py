"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``;
``vlsfusion.kernels`` picks one at import time.
"""

import numpy as np


def ratio_match(query, db, labels):
    """Nearest db row per query row, plus the distance to the nearest row of a different label.

    Returns ``(best_row, d1, d2)``; ``d2`` is ``inf`` when no other label exists.
    """
    query = np.ascontiguousarray(query, dtype=np.float32)
    db = np.ascontiguousarray(db, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    K, M = len(query), len(db)
    if K == 0 or M == 0:
        return (
            np.full(K, -1, dtype=np.int64),
            np.full(K, np.inf),
            np.full(K, np.inf),
        )
    q = query.astype(np.float64)
    d = db.astype(np.float64)
    d2 = (q * q).sum(1)[:, None] - 2.0 * q @ d.T + (d * d).sum(1)[None, :]
    np.maximum(d2, 0.0, out=d2)
    best = np.argmin(d2, axis=1)
    d1 = np.sqrt(d2[np.arange(K), best])
    same = labels[None, :] == labels[best][:, None]
    d2[same] = np.inf
    second = np.sqrt(d2.min(axis=1))
    return best.astype(np.int64), d1, second


def reprojection_errors(Rcw, tcw, pts, pix, fx, fy, cx, cy):
    """Pixel reprojection error norms of world points; ``inf`` where depth <= 0."""
    pc = np.asarray(pts, dtype=np.float64) @ np.asarray(Rcw).T + np.asarray(tcw)
    z = pc[:, 2]
    good = z > 1e-9
    zs = np.where(good, z, 1.0)
    u = fx * pc[:, 0] / zs + cx
    v = fy * pc[:, 1] / zs + cy
    err = np.hypot(u - pix[:, 0], v - pix[:, 1])
    return np.where(good, err, np.inf)


def reprojection_jacobian(Rwc, twc, pts, pix, fx, fy, cx, cy):
    """Residuals (N, 2) and Jacobians (N, 2, 6) w.r.t. a camera-to-world pose.

    Perturbation: ``t <- t + dt``, ``R <- R Exp(dtheta)``; columns are ``[dt, dtheta]``.
    Points with nonpositive depth get zero residual and Jacobian and ``valid=False``.
    """
    Rwc = np.asarray(Rwc, dtype=np.float64)
    pc = (np.asarray(pts, dtype=np.float64) - np.asarray(twc)) @ Rwc
    X, Y, Z = pc[:, 0], pc[:, 1], pc[:, 2]
    valid = Z > 1e-9
    Zs = np.where(valid, Z, 1.0)
    iz = 1.0 / Zs
    r = np.stack([fx * X * iz + cx - pix[:, 0], fy * Y * iz + cy - pix[:, 1]], axis=1)
    n = len(pc)
    dproj = np.zeros((n, 2, 3))
    dproj[:, 0, 0] = fx * iz
    dproj[:, 0, 2] = -fx * X * iz * iz
    dproj[:, 1, 1] = fy * iz
    dproj[:, 1, 2] = -fy * Y * iz * iz
    # dXc/dt = -R^T ; dXc/dtheta = [Xc]x
    sk = np.zeros((n, 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -Z, Y
    sk[:, 1, 0], sk[:, 1, 2] = Z, -X
    sk[:, 2, 0], sk[:, 2, 1] = -Y, X
    J = np.empty((n, 2, 6))
    J[:, :, :3] = -dproj @ Rwc.T
    J[:, :, 3:] = dproj @ sk
    r[~valid] = 0.0
    J[~valid] = 0.0
    return r, J, valid


def _qmul(a, b):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _conj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _rot(q):
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def _skew(v):
    s = np.zeros(v.shape[:-1] + (3, 3))
    s[..., 0, 1], s[..., 0, 2] = -v[..., 2], v[..., 1]
    s[..., 1, 0], s[..., 1, 2] = v[..., 2], -v[..., 0]
    s[..., 2, 0], s[..., 2, 1] = -v[..., 1], v[..., 0]
    return s


def _canon(e):
    return np.where(e[..., :1] < 0.0, -e, e)


def pose_distance_matrix(t, q, lam):
    """``|t_a - t_b| + lam * angle(q_a, q_b)`` for all pairs."""
    t = np.asarray(t, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    dt = np.linalg.norm(t[:, None, :] - t[None, :, :], axis=-1)
    dot = np.clip(np.abs(q @ q.T), 0.0, 1.0)
    return dt + lam * 2.0 * np.arccos(dot)


def pgo_linearize(p, q, dp, dq, vls_idx, vls_p, vls_q, w_t, w_q, vio_literal, vls_next):
    """Residuals and Jacobians of all pose-graph edges.

    VIO edge ``k`` joins nodes ``k`` and ``k+1``: residual (6,) and Jacobians
    (6, 6) w.r.t. ``[dp, dtheta]`` of each endpoint. VLS edge ``k`` anchors
    node ``vls_idx[k]``; its translation Jacobian is ``w_t * I`` on that node
    and its rotation rows depend only on ``dtheta`` of node ``rot_node[k]``.

    Returns ``(r_vio, J_i, J_j, r_vls, Jq_vls, rot_node)``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = len(p)
    e = max(n - 1, 0)
    dp = np.asarray(dp, dtype=np.float64).reshape(e, 3)
    dq = np.asarray(dq, dtype=np.float64).reshape(e, 4)

    Ri = _rot(q[:-1])
    diff = p[1:] - p[:-1]
    v = np.einsum("kji,kj->ki", Ri, diff)
    r_vio = np.empty((e, 6))
    r_vio[:, :3] = w_t * (v - dp)
    meas = dq if vio_literal else _conj(dq)
    err = _canon(_qmul(_qmul(_conj(q[:-1]), q[1:]), meas))
    ew, ev = err[:, :1, None], err[:, 1:]
    r_vio[:, 3:] = w_q * ev
    eye = np.eye(3)
    J_i = np.zeros((e, 6, 6))
    J_j = np.zeros((e, 6, 6))
    RiT = np.transpose(Ri, (0, 2, 1))
    J_i[:, :3, :3] = -w_t * RiT
    J_i[:, :3, 3:] = w_t * _skew(v)
    J_j[:, :3, :3] = w_t * RiT
    J_i[:, 3:, 3:] = w_q * 0.5 * (-ew * eye + _skew(ev))
    Rm = _rot(dq)
    if vio_literal:
        Rm = np.transpose(Rm, (0, 2, 1))
    J_j[:, 3:, 3:] = w_q * 0.5 * (ew * eye + _skew(ev)) @ Rm

    vls_idx = np.asarray(vls_idx, dtype=np.int64)
    m = len(vls_idx)
    vls_p = np.asarray(vls_p, dtype=np.float64).reshape(m, 3)
    vls_q = np.asarray(vls_q, dtype=np.float64).reshape(m, 4)
    rot_node = np.minimum(vls_idx + 1, n - 1) if vls_next else vls_idx.copy()
    r_vls = np.empty((m, 6))
    r_vls[:, :3] = w_t * (p[vls_idx] - vls_p)
    el = _canon(_qmul(_conj(q[rot_node]), vls_q))
    r_vls[:, 3:] = w_q * el[:, 1:]
    Jq = w_q * 0.5 * (-el[:, :1, None] * eye + _skew(el[:, 1:]))
    return r_vio, J_i, J_j, r_vls, Jq, rot_node.astype(np.int64)
