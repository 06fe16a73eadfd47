"""Linear Lagrangian operator inference with SPD constraints.

Fits symmetric K (and C) with ``K - eps*I >= 0`` to

    min || Qddot + C Qdot + K Q ||_F

The unconstrained symmetric least-squares solution is computed first. If it
violates the floor, the problem is re-solved over Cholesky-type factors
``K = L_K L_K^T + eps*I`` with L-BFGS, starting from the eigenvalue-clipped
initializer. The returned operators are never worse than that initializer.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .errors import IllConditioned, OptimizerStall
from .reduce import ReducedDataset

COND_LIMIT = 1e12


@dataclass(frozen=True)
class LinearLagrangianRom:
    K: np.ndarray
    C: Optional[np.ndarray] = None
    eps: float = 1e-8
    residual_norm: float = float("nan")

    @property
    def r(self) -> int:
        return self.K.shape[0]

    @property
    def conservative(self) -> bool:
        return self.C is None

    def damping(self) -> np.ndarray:
        return np.zeros_like(self.K) if self.C is None else self.C

    @classmethod
    def zeros(cls, r: int, conservative: bool = True):
        """Zero prior (no linear operators), used for the POD-SpML baseline."""
        return cls(np.zeros((r, r)), None if conservative else np.zeros((r, r)), 0.0, float("nan"))


def nearest_spd(A: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Symmetric part of A with eigenvalues clipped from below at eps."""
    A = np.asarray(A, dtype=float)
    S = 0.5 * (A + A.T)
    w, U = np.linalg.eigh(S)
    if w[0] >= eps:
        return S
    P = (U * np.maximum(w, eps)) @ U.T
    return 0.5 * (P + P.T)


def _sym_basis(r):
    return [(i, j) for i in range(r) for j in range(i, r)]


def _sym_regressor(X):
    """Columns vec(E_ij X) for the symmetric unit matrices E_ij, i <= j."""
    r, N = X.shape
    pairs = _sym_basis(r)
    G = np.zeros((r, N, len(pairs)))
    for p, (i, j) in enumerate(pairs):
        G[i, :, p] += X[j]
        if i != j:
            G[j, :, p] += X[i]
    return G.reshape(r * N, len(pairs))


def _from_vech(theta, r):
    S = np.zeros((r, r))
    for p, (i, j) in enumerate(_sym_basis(r)):
        S[i, j] = S[j, i] = theta[p]
    return S


def symmetric_lstsq(X, Xd, Xdd, conservative=False, tikhonov=0.0):
    """Unconstrained symmetric least squares; returns (K, C or None, cond)."""
    r = X.shape[0]
    blocks = [_sym_regressor(X)] if conservative else [_sym_regressor(X), _sym_regressor(Xd)]
    A = np.hstack(blocks)
    b = -Xdd.reshape(-1)
    if tikhonov > 0:
        A = np.vstack([A, np.sqrt(tikhonov) * np.eye(A.shape[1])])
        b = np.concatenate([b, np.zeros(A.shape[1])])
    theta, _, rank, sv = np.linalg.lstsq(A, b, rcond=None)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    m = r * (r + 1) // 2
    K = _from_vech(theta[:m], r)
    C = None if conservative else _from_vech(theta[m:], r)
    return K, C, cond


def objective(K, C, X, Xd, Xdd, tikhonov=0.0) -> float:
    R = Xdd + K @ X
    if C is not None:
        R = R + C @ Xd
    val = float(np.sum(R * R))
    if tikhonov > 0:
        val += tikhonov * (np.sum(K * K) + (0.0 if C is None else np.sum(C * C)))
    return float(np.sqrt(val))


def _lower_factor(S):
    """Lower-triangular L with L L^T = S for symmetric PSD S (possibly singular)."""
    w, U = np.linalg.eigh(0.5 * (S + S.T))
    root = U * np.sqrt(np.clip(w, 0.0, None))
    R = np.linalg.qr(root.T, mode="r")
    return R.T


def _refine(K0, C0, X, Xd, Xdd, eps, tikhonov, max_iter):
    r = X.shape[0]
    conservative = C0 is None
    blocks = [Xdd, X] if conservative else [Xdd, X, Xd]
    Z = np.vstack(blocks)
    Gram = Z @ Z.T
    tril = np.tril_indices(r)
    nm = len(tril[0])
    I = np.eye(r)

    def unpack(x):
        LK = np.zeros((r, r))
        LK[tril] = x[:nm]
        K = LK @ LK.T + eps * I
        if conservative:
            return LK, None, K, None
        LC = np.zeros((r, r))
        LC[tril] = x[nm:]
        return LK, LC, K, LC @ LC.T + eps * I

    def fun(x, scale):
        LK, LC, K, C = unpack(x)
        P = np.hstack([I, K] if conservative else [I, K, C])
        PG = P @ Gram
        f = 0.5 * np.sum(PG * P)
        gK = PG[:, r : 2 * r]
        if tikhonov > 0:
            f += 0.5 * tikhonov * np.sum(K * K)
            gK = gK + tikhonov * K
        grad = [((gK + gK.T) @ LK)[tril]]
        if not conservative:
            gC = PG[:, 2 * r : 3 * r]
            if tikhonov > 0:
                f += 0.5 * tikhonov * np.sum(C * C)
                gC = gC + tikhonov * C
            grad.append(((gC + gC.T) @ LC)[tril])
        return f / scale, np.concatenate(grad) / scale

    # start slightly inside the cone so factor directions are not dead at zero
    lift = lambda S: nearest_spd(S, eps + 1e-6 * max(np.abs(np.linalg.eigvalsh(S)).max(), 1.0))
    x0 = [_lower_factor(lift(K0) - eps * I)[tril]]
    if not conservative:
        x0.append(_lower_factor(lift(C0) - eps * I)[tril])
    x0 = np.concatenate(x0)
    scale = max(fun(x0, 1.0)[0], 1e-300)
    res = minimize(
        fun,
        x0,
        args=(scale,),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "maxcor": 30, "ftol": 1e-14, "gtol": 1e-12},
    )
    if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
        raise OptimizerStall(float("nan"), "non-finite iterate")
    _, _, K, C = unpack(res.x)
    return K, C, float(np.linalg.norm(res.jac))


def infer_linear(
    data: ReducedDataset,
    conservative: bool = False,
    eps: float = 1e-8,
    part: str = "train",
    tikhonov: float = 0.0,
    max_iter: int = 20000,
) -> LinearLagrangianRom:
    """SPD-constrained least-squares fit of the linear reduced operators."""
    if part in data.split:
        X, Xd, Xdd = data.columns(part)
    else:
        X, Xd, Xdd = (M[:, data.valid_mask] for M in (data.Qhat, data.Qdot, data.Qddot))
    r = data.r
    if X.shape[1] * r < r * (r + 1) // 2 * (1 if conservative else 2):
        raise ValueError(f"{X.shape[1]} columns are too few to determine the operators for r={r}")
    K_ls, C_ls, cond = symmetric_lstsq(X, Xd, Xdd, conservative, tikhonov)
    if cond > COND_LIMIT:
        warnings.warn(f"regressor condition number {cond:.2e} exceeds {COND_LIMIT:.0e}", IllConditioned, stacklevel=2)
    K0 = nearest_spd(K_ls, eps)
    C0 = None if conservative else nearest_spd(C_ls, eps)
    best = (K0, C0, objective(K0, C0, X, Xd, Xdd, tikhonov))
    feasible = np.linalg.eigvalsh(K_ls)[0] >= eps and (conservative or np.linalg.eigvalsh(C_ls)[0] >= eps)
    if not feasible:
        K1, C1, gnorm = _refine(K_ls, C_ls, X, Xd, Xdd, eps, tikhonov, max_iter)
        obj = objective(K1, C1, X, Xd, Xdd, tikhonov)
        if obj <= best[2]:
            best = (K1, C1, obj)
    K, C, obj = best
    K = 0.5 * (K + K.T)
    C = None if C is None else 0.5 * (C + C.T)
    return LinearLagrangianRom(K, C, eps, obj)
