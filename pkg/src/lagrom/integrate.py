"""Implicit Newmark time stepping for second-order systems r(q, v, a) = 0.

Any full- or reduced-order mechanical model is handed to the integrator as a
:class:`SecondOrderSystem`: a residual plus its three partial Jacobians.
Newton iterates on the new acceleration, so the iteration matrix is
``dr/da + gamma*dt*dr/dv + beta*dt**2*dr/dq``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NonConvergence

Residual = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
Jacobians = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


@dataclass(frozen=True)
class SecondOrderSystem:
    dim: int
    residual: Residual
    jacobians: Jacobians
    energy: Optional[Callable[[np.ndarray, np.ndarray], float]] = None


@dataclass(frozen=True)
class NewmarkConfig:
    dt: float
    beta: float = 0.25
    gamma: float = 0.5
    newton_tol: float = 1e-10
    newton_max: int = 25

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")
        if not 0.0 <= self.beta <= 0.5:
            raise ValueError(f"beta must lie in [0, 1/2], got {self.beta}")
        if self.gamma != 0.5:
            warnings.warn("gamma != 1/2: Newmark is only first-order accurate", stacklevel=2)


@dataclass
class Trajectory:
    times: np.ndarray
    Q: np.ndarray
    V: np.ndarray
    A: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else float("nan")

    def __len__(self):
        return len(self.times)


def _newton(sys, q, v, a, predictor, cfg, step=None):
    """Solve r(q(a), v(a), a) = 0 for a, where (q, v) depend affinely on a."""
    dt = cfg.dt
    cq = cfg.beta * dt * dt
    cv = cfg.gamma * dt
    q_pred, v_pred = predictor
    a_new = a.copy()
    qn = q_pred + cq * a_new
    vn = v_pred + cv * a_new
    r = sys.residual(qn, vn, a_new)
    r0 = np.linalg.norm(r)
    tol = cfg.newton_tol * (1.0 + r0)
    it = 0
    norm = r0
    if not np.isfinite(r0):
        raise NonConvergence(0, r0, step)
    while not norm <= tol:  # NaN never counts as converged
        if it >= cfg.newton_max or not np.isfinite(norm):
            raise NonConvergence(it, norm, step)
        jq, jv, ja = sys.jacobians(qn, vn, a_new)
        J = ja + cv * jv + cq * jq
        a_new = a_new - np.linalg.solve(J, r)
        qn = q_pred + cq * a_new
        vn = v_pred + cv * a_new
        r = sys.residual(qn, vn, a_new)
        norm = np.linalg.norm(r)
        it += 1
    return qn, vn, a_new


def newmark_step(sys: SecondOrderSystem, cfg: NewmarkConfig, q, v, a, step=None):
    """Advance one Newmark step from a consistent state (q, v, a)."""
    dt = cfg.dt
    q_pred = q + dt * v + dt * dt * (0.5 - cfg.beta) * a
    v_pred = v + dt * (1.0 - cfg.gamma) * a
    return _newton(sys, q, v, a, (q_pred, v_pred), cfg, step)


def initial_acceleration(sys: SecondOrderSystem, cfg: NewmarkConfig, q0, v0):
    """Acceleration consistent with residual(q0, v0, a0) = 0."""
    a = np.zeros(sys.dim)
    r = sys.residual(q0, v0, a)
    tol = cfg.newton_tol * (1.0 + np.linalg.norm(r))
    if not np.isfinite(tol):
        raise NonConvergence(0, float(np.linalg.norm(r)), 0)
    for it in range(cfg.newton_max):
        if np.linalg.norm(r) <= tol:
            return a
        _, _, ja = sys.jacobians(q0, v0, a)
        a = a - np.linalg.solve(ja, r)
        r = sys.residual(q0, v0, a)
    if np.linalg.norm(r) <= tol:
        return a
    raise NonConvergence(cfg.newton_max, float(np.linalg.norm(r)), 0)


def n_steps(T: float, dt: float) -> int:
    """Number of stored states on [0, T], including t = 0."""
    return int(math.floor(T / dt + 1e-9)) + 1


def simulate(sys: SecondOrderSystem, cfg: NewmarkConfig, q0, v0, T: float) -> Trajectory:
    q = np.asarray(q0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    if q.shape != (sys.dim,) or v.shape != (sys.dim,):
        raise ValueError(f"initial state must have shape ({sys.dim},)")
    K = n_steps(T, cfg.dt)
    Q = np.empty((sys.dim, K))
    V = np.empty((sys.dim, K))
    A = np.empty((sys.dim, K))
    a = initial_acceleration(sys, cfg, q, v)
    Q[:, 0], V[:, 0], A[:, 0] = q, v, a
    for k in range(1, K):
        q, v, a = newmark_step(sys, cfg, q, v, a, step=k)
        Q[:, k], V[:, k], A[:, k] = q, v, a
    return Trajectory(np.arange(K) * cfg.dt, Q, V, A)


def linear_system(M, C, K) -> SecondOrderSystem:
    """M a + C v + K q = 0 as a SecondOrderSystem."""
    M = np.asarray(M, dtype=float)
    C = np.asarray(C, dtype=float)
    K = np.asarray(K, dtype=float)
    jac = (K, C, M)
    return SecondOrderSystem(
        dim=M.shape[0],
        residual=lambda q, v, a: M @ a + C @ v + K @ q,
        jacobians=lambda q, v, a: jac,
        energy=lambda q, v: 0.5 * v @ M @ v + 0.5 * q @ K @ q,
    )


@dataclass(frozen=True)
class BatchSystem:
    """Columnwise independent copies of one system.

    ``residual(Q, V, A)`` maps dim x nb arrays to dim x nb; ``jacobians``
    returns three nb x dim x dim stacks.
    """

    dim: int
    residual: Residual
    jacobians: Jacobians


def _newton_batch(sys, preds, A, cfg, step=None):
    cq = cfg.beta * cfg.dt**2
    cv = cfg.gamma * cfg.dt
    Qp, Vp = preds
    A = A.copy()
    R = sys.residual(Qp + cq * A, Vp + cv * A, A)
    norms = np.linalg.norm(R, axis=0)
    if not np.all(np.isfinite(norms)):
        raise NonConvergence(0, float(np.max(norms)), step)
    tol = cfg.newton_tol * (1.0 + norms)
    active = ~(norms <= tol)
    it = 0
    while np.any(active):
        if it >= cfg.newton_max or not np.all(np.isfinite(norms)):
            raise NonConvergence(it, float(np.max(norms)), step)
        idx = np.flatnonzero(active)
        Qn, Vn = Qp[:, idx] + cq * A[:, idx], Vp[:, idx] + cv * A[:, idx]
        jq, jv, ja = sys.jacobians(Qn, Vn, A[:, idx])
        J = ja + cv * jv + cq * jq
        A[:, idx] -= np.linalg.solve(J, R[:, idx].T[:, :, None])[:, :, 0].T
        Qn, Vn = Qp[:, idx] + cq * A[:, idx], Vp[:, idx] + cv * A[:, idx]
        R[:, idx] = sys.residual(Qn, Vn, A[:, idx])
        norms[idx] = np.linalg.norm(R[:, idx], axis=0)
        active = ~(norms <= tol)
        it += 1
    return Qp + cq * A, Vp + cv * A, A


def simulate_batch(sys: BatchSystem, cfg: NewmarkConfig, Q0, V0, T: float):
    """Integrate nb initial conditions at once; returns dim x nb x K arrays (Q, V)."""
    Q = np.array(Q0, dtype=float, ndmin=2)
    V = np.array(V0, dtype=float, ndmin=2)
    if Q.shape != V.shape or Q.shape[0] != sys.dim:
        raise ValueError(f"initial states must both be ({sys.dim}, nb)")
    nb = Q.shape[1]
    K = n_steps(T, cfg.dt)
    Qs = np.empty((sys.dim, nb, K))
    Vs = np.empty((sys.dim, nb, K))
    # consistent initial accelerations
    A = np.zeros_like(Q)
    R = sys.residual(Q, V, A)
    tol = cfg.newton_tol * (1.0 + np.linalg.norm(R, axis=0))
    for it in range(cfg.newton_max + 1):
        if np.all(np.linalg.norm(R, axis=0) <= tol):
            break
        if it == cfg.newton_max:
            raise NonConvergence(it, float(np.linalg.norm(R, axis=0).max()), 0)
        _, _, ja = sys.jacobians(Q, V, A)
        A = A - np.linalg.solve(ja, R.T[:, :, None])[:, :, 0].T
        R = sys.residual(Q, V, A)
    Qs[:, :, 0], Vs[:, :, 0] = Q, V
    dt = cfg.dt
    for k in range(1, K):
        Qp = Q + dt * V + dt * dt * (0.5 - cfg.beta) * A
        Vp = V + dt * (1.0 - cfg.gamma) * A
        Q, V, A = _newton_batch(sys, (Qp, Vp), A, cfg, step=k)
        Qs[:, :, k], Vs[:, :, k] = Q, V
    return np.arange(K) * dt, Qs, Vs
