"""Sliding-window pose graph with relative (VIO) and absolute (VLS) edges.

Nodes are ordered in time and VIO edges only join neighbours, so the normal
equations are block tridiagonal and are solved with a banded Cholesky.
Perturbations are ``p <- p + dp`` and ``q <- q * Exp(dtheta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solveh_banded

from . import kernels
from .geometry import quat_canonical, quat_conj, quat_from_rotvec, quat_mul, quat_to_rot


class NotInitialized(RuntimeError):
    pass


@dataclass(frozen=True)
class PgoConfig:
    alpha: float = 1.0
    w_t: float = 1.0
    w_q: float | None = None  # defaults to 10 * w_t
    kf_window: int = 20
    max_iterations: int = 15
    lm_lambda0: float = 1e-4
    convergence_tol: float = 1e-8
    # alternative residual readings, off by default
    vls_rotation_uses_next: bool = False
    vio_literal_rotation: bool = False

    def __post_init__(self):
        if self.w_q is None:
            object.__setattr__(self, "w_q", 10.0 * self.w_t)
        for name in ("alpha", "w_t", "w_q", "kf_window", "max_iterations", "lm_lambda0", "convergence_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class GraphProblem:
    """Window state and measurements in array form."""

    p: np.ndarray  # (n, 3) fused positions
    q: np.ndarray  # (n, 4) fused quaternions
    vio_dp: np.ndarray  # (n-1, 3) measured relative translation, expressed in frame i
    vio_dq: np.ndarray  # (n-1, 4) measured relative rotation
    vls_idx: np.ndarray  # (m,) node index of each absolute edge
    vls_p: np.ndarray  # (m, 3)
    vls_q: np.ndarray  # (m, 4)
    beta: np.ndarray  # (m,) per-edge weights

    def __post_init__(self):
        self.p = np.array(self.p, dtype=float).reshape(-1, 3)
        self.q = np.array(self.q, dtype=float).reshape(-1, 4)
        n = len(self.p)
        self.vio_dp = np.asarray(self.vio_dp, dtype=float).reshape(max(n - 1, 0), 3)
        self.vio_dq = np.asarray(self.vio_dq, dtype=float).reshape(max(n - 1, 0), 4)
        self.vls_idx = np.asarray(self.vls_idx, dtype=np.int64).reshape(-1)
        m = len(self.vls_idx)
        self.vls_p = np.asarray(self.vls_p, dtype=float).reshape(m, 3)
        self.vls_q = np.asarray(self.vls_q, dtype=float).reshape(m, 4)
        self.beta = np.asarray(self.beta, dtype=float).reshape(m)

    @classmethod
    def from_vio(cls, p, q, vio_p, vio_q, vls_idx=(), vls_p=(), vls_q=(), beta=()):
        vio_p = np.asarray(vio_p, dtype=float)
        vio_q = np.asarray(vio_q, dtype=float)
        dq = quat_mul(quat_conj(vio_q[:-1]), vio_q[1:])
        R = quat_to_rot(vio_q[:-1])
        dp = np.einsum("kji,kj->ki", R, vio_p[1:] - vio_p[:-1])
        return cls(p, q, dp, dq, vls_idx, vls_p, vls_q, beta)

    @property
    def n(self) -> int:
        return len(self.p)


@dataclass
class OptimizationTrace:
    costs: list[float] = field(default_factory=list)  # accepted costs, first entry is the start
    rejected: int = 0
    lambdas: list[float] = field(default_factory=list)  # damping of every attempted step
    accepted: list[bool] = field(default_factory=list)
    iterations: int = 0

    @property
    def monotone(self) -> bool:
        return all(b <= a for a, b in zip(self.costs, self.costs[1:]))


def linearize(prob: GraphProblem, cfg: PgoConfig):
    return kernels.pgo_linearize(
        prob.p,
        prob.q,
        prob.vio_dp,
        prob.vio_dq,
        prob.vls_idx,
        prob.vls_p,
        prob.vls_q,
        cfg.w_t,
        cfg.w_q,
        cfg.vio_literal_rotation,
        cfg.vls_rotation_uses_next,
    )


def cost(prob: GraphProblem, cfg: PgoConfig, rotation_only: bool = False) -> float:
    r_vio, _, _, r_vls, _, _ = linearize(prob, cfg)
    return _cost_from(r_vio, r_vls, prob.beta, cfg, rotation_only)


def _cost_from(r_vio, r_vls, beta, cfg, rotation_only):
    if rotation_only:
        r_vio, r_vls = r_vio[:, 3:], r_vls[:, 3:]
    return float(cfg.alpha * np.sum(r_vio**2) + np.sum(beta * np.sum(r_vls**2, axis=1)))


def _assemble(prob: GraphProblem, cfg: PgoConfig, rotation_only: bool):
    """Diagonal blocks (n, b, b), upper off-diagonal blocks (n-1, b, b), gradient (n, b), cost."""
    r_vio, Ji, Jj, r_vls, Jq, rot_node = linearize(prob, cfg)
    n = prob.n
    a = cfg.alpha
    if rotation_only:
        sl = slice(3, 6)
        Ji, Jj, rv = Ji[:, sl, sl], Jj[:, sl, sl], r_vio[:, sl]
        b = 3
    else:
        rv = r_vio
        b = 6
    diag = np.zeros((n, b, b))
    off = np.zeros((max(n - 1, 0), b, b))
    grad = np.zeros((n, b))
    if n > 1:
        JiT = np.transpose(Ji, (0, 2, 1))
        JjT = np.transpose(Jj, (0, 2, 1))
        diag[:-1] += a * JiT @ Ji
        diag[1:] += a * JjT @ Jj
        off[:] = a * JiT @ Jj
        grad[:-1] += a * np.einsum("kij,ki->kj", Ji, rv)
        grad[1:] += a * np.einsum("kij,ki->kj", Jj, rv)
    beta = prob.beta
    if len(beta):
        JqT = np.transpose(Jq, (0, 2, 1))
        rot_blk = beta[:, None, None] * (JqT @ Jq)
        rot_g = beta[:, None] * np.einsum("kij,ki->kj", Jq, r_vls[:, 3:])
        if rotation_only:
            np.add.at(diag, rot_node, rot_blk)
            np.add.at(grad, rot_node, rot_g)
        else:
            wt2 = cfg.w_t**2
            idx = prob.vls_idx
            np.add.at(diag, (idx, slice(0, 3), slice(0, 3)), (beta * wt2)[:, None, None] * np.eye(3))
            np.add.at(grad, (idx, slice(0, 3)), (beta * cfg.w_t)[:, None] * r_vls[:, :3])
            np.add.at(diag, (rot_node, slice(3, 6), slice(3, 6)), rot_blk)
            np.add.at(grad, (rot_node, slice(3, 6)), rot_g)
    c = _cost_from(r_vio, r_vls, beta, cfg, rotation_only)
    return diag, off, grad, c


def _to_banded(diag: np.ndarray, off: np.ndarray, damping: np.ndarray) -> np.ndarray:
    """Upper banded storage of the block tridiagonal matrix for ``solveh_banded``."""
    n, b, _ = diag.shape
    u = 2 * b - 1
    ab = np.zeros((u + 1, n * b))
    rows, cols = np.triu_indices(b)
    base = (np.arange(n) * b)[:, None]
    ab[(u + rows - cols)[None, :].repeat(n, 0), base + cols] = diag[:, rows, cols]
    ab[u, :] += damping
    if len(off):
        r, c = np.divmod(np.arange(b * b), b)
        ab[(u + r - c - b)[None, :].repeat(n - 1, 0), base[1:] + c] = off[:, r, c]
    return ab


def _retract(prob: GraphProblem, delta: np.ndarray, rotation_only: bool) -> GraphProblem:
    out = GraphProblem(prob.p.copy(), prob.q.copy(), prob.vio_dp, prob.vio_dq,
                       prob.vls_idx, prob.vls_p, prob.vls_q, prob.beta)
    if rotation_only:
        dth = delta
    else:
        out.p = prob.p + delta[:, :3]
        dth = delta[:, 3:]
    out.q = quat_canonical(quat_mul(prob.q, quat_from_rotvec(dth)))
    return out


def optimize(
    prob: GraphProblem,
    cfg: PgoConfig,
    rotation_only: bool = False,
    fix_first: bool | None = None,
) -> tuple[GraphProblem, OptimizationTrace]:
    """Levenberg-Marquardt over all nodes (or rotations only).

    ``fix_first`` holds node 0 constant to remove the gauge freedom; by
    default it is enabled exactly when there are no absolute edges.
    """
    if prob.n < 1:
        raise NotInitialized("empty window")
    if not np.all(np.isfinite(prob.p)) or not np.all(np.isfinite(prob.q)):
        raise NotInitialized("window has frames without an initial fused state")
    if fix_first is None:
        fix_first = len(prob.vls_idx) == 0
    trace = OptimizationTrace()
    lam = cfg.lm_lambda0
    diag, off, grad, c = _assemble(prob, cfg, rotation_only)
    trace.costs.append(c)
    b = diag.shape[1]
    for _ in range(cfg.max_iterations):
        trace.iterations += 1
        if fix_first:
            diag[0] = np.eye(b)
            grad[0] = 0.0
            if len(off):
                off[0] = 0.0
        if c < 1e-24 or np.max(np.abs(grad)) < 1e-15:
            break
        dvals = np.einsum("kii->ki", diag).ravel()
        damping = lam * np.maximum(dvals, 1e-9)
        try:
            delta = solveh_banded(_to_banded(diag, off, damping), -grad.ravel(), lower=False)
        except np.linalg.LinAlgError:
            lam *= 10.0
            trace.rejected += 1
            continue
        delta = delta.reshape(-1, b)
        if fix_first:
            delta[0] = 0.0
        cand = _retract(prob, delta, rotation_only)
        cd, co, cg, cc = _assemble(cand, cfg, rotation_only)
        trace.lambdas.append(lam)
        trace.accepted.append(cc <= c)
        if cc <= c:
            rel = (c - cc) / max(c, 1e-300)
            prob, diag, off, grad, c = cand, cd, co, cg, cc
            trace.costs.append(c)
            lam = max(lam / 3.0, 1e-12)
            if rel < cfg.convergence_tol:
                break
        else:
            trace.rejected += 1
            lam *= 4.0
    return prob, trace


def pgo_step1(prob: GraphProblem, cfg: PgoConfig, fix_first: bool | None = None):
    """Joint position and rotation optimization."""
    return optimize(prob, cfg, rotation_only=False, fix_first=fix_first)


def pgo_step2(prob: GraphProblem, cfg: PgoConfig, fix_first: bool | None = None):
    """Rotation-only refinement; translations are left bit-identical."""
    return optimize(prob, cfg, rotation_only=True, fix_first=fix_first)
