"""Full-order Lagrangian benchmark models: the cubic-spring rod and the membrane.

Both are spring networks, so their nonlinear energies share one form,
``coef/4 * sum((D x)**4)`` with ``D`` an edge-incidence matrix. Edges to a
clamped node keep a single ``+-1`` entry (the clamped end has displacement 0).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .integrate import SecondOrderSystem

Vec = np.ndarray


class EdgeQuartic:
    """Quartic edge energy ``coef/4 * sum((D x)**4)`` with gradient and Hessian."""

    def __init__(self, D: np.ndarray, coef: float):
        self.D = np.asarray(D, dtype=float)
        self.coef = float(coef)

    def value(self, x):
        d = self.D @ x
        return 0.25 * self.coef * float(np.sum(d**4))

    def grad(self, x):
        d = self.D @ x
        return self.D.T @ (self.coef * d**3)

    def hess(self, x):
        d = self.D @ x
        return (self.D.T * (3.0 * self.coef * d**2)) @ self.D


@dataclass(frozen=True)
class MechanicalFom:
    """M a + C v + dF_nl/dv + K q + dU_nl/dq = 0."""

    M: np.ndarray
    C: np.ndarray
    K: np.ndarray
    nl_potential: EdgeQuartic
    nl_dissipation: EdgeQuartic
    name: str = "fom"
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.M.shape[0]

    def nl_potential_grad(self, q):
        return self.nl_potential.grad(q)

    def nl_dissipation_grad(self, v):
        return self.nl_dissipation.grad(v)

    def potential_energy(self, q):
        return 0.5 * q @ self.K @ q + self.nl_potential.value(q)

    def dissipation(self, v):
        return 0.5 * v @ self.C @ v + self.nl_dissipation.value(v)

    def kinetic_energy(self, v):
        return 0.5 * v @ self.M @ v

    @property
    def conservative(self) -> bool:
        return not np.any(self.C) and self.nl_dissipation.coef == 0.0

    def as_system(self) -> SecondOrderSystem:
        M, C, K = self.M, self.C, self.K
        U, F = self.nl_potential, self.nl_dissipation

        def residual(q, v, a):
            return M @ a + C @ v + F.grad(v) + K @ q + U.grad(q)

        def jacobians(q, v, a):
            return K + U.hess(q), C + F.hess(v), M

        return SecondOrderSystem(self.n, residual, jacobians, lambda q, v: total_energy(self, q, v))


@dataclass(frozen=True)
class RodParams:
    n: int = 64
    m: float = 1.56e-2
    kappa: float = 65.0
    rho: float = 2.62e5
    nl_lo: int = 22
    nl_hi: int = 28


@dataclass(frozen=True)
class MembraneParams:
    l_x: float = math.sqrt(2.0)
    l_y: float = 1.0 / math.sqrt(2.0)
    N_x: int = 21
    N_y: int = 13
    damping_ratio: float = 1e-4
    k_nl: Optional[float] = None  # None -> 0.02 * n**1.5
    c_nl: Optional[float] = None
    clamp: str = "xy0"  # "xy0": edges x=0 and y=0 fixed; "all": every boundary node fixed


def _check_vec(x, n, what):
    x = np.asarray(x, dtype=float)
    if x.shape != (n,):
        raise ValueError(f"{what} must have shape ({n},), got {x.shape}")
    return x


def build_rod(params: RodParams = RodParams()) -> MechanicalFom:
    """Fixed-fixed spring chain with quartic energy on edges nl_lo..nl_hi (1-based)."""
    n = params.n
    if n < 2:
        raise ValueError("rod needs at least two masses")
    if not 1 <= params.nl_lo <= params.nl_hi <= n - 1:
        raise ValueError(f"nonlinear edge range {params.nl_lo}..{params.nl_hi} outside 1..{n - 1}")
    if min(params.m, params.kappa, params.rho) <= 0:
        raise ValueError("rod coefficients must be positive")
    k = params.kappa
    K = 2.0 * k * np.eye(n) - k * np.eye(n, k=1) - k * np.eye(n, k=-1)
    edges = np.arange(params.nl_lo, params.nl_hi + 1)
    D = np.zeros((len(edges), n))
    for row, i in enumerate(edges):
        # edge i joins masses i and i+1 (1-based)
        D[row, i - 1] = -1.0
        D[row, i] = 1.0
    return MechanicalFom(
        M=params.m * np.eye(n),
        C=np.zeros((n, n)),
        K=K,
        nl_potential=EdgeQuartic(D, params.rho),
        nl_dissipation=EdgeQuartic(np.zeros((0, n)), 0.0),
        name="rod",
        metadata={"params": params.__dict__.copy()},
    )


def membrane_free_mask(N_x: int, N_y: int, clamp: str = "xy0") -> np.ndarray:
    """Boolean (N_x, N_y) grid, True where the node carries a DOF."""
    free = np.ones((N_x, N_y), dtype=bool)
    if clamp == "xy0":
        free[0, :] = False
        free[:, 0] = False
    elif clamp == "all":
        free[[0, -1], :] = False
        free[:, [0, -1]] = False
    else:
        raise ValueError(f"unknown clamp mode {clamp!r}")
    return free


def build_membrane(params: MembraneParams = MembraneParams()) -> MechanicalFom:
    Nx, Ny = params.N_x, params.N_y
    if Nx < 3 or Ny < 3:
        raise ValueError("membrane needs at least 3 nodes per direction")
    free = membrane_free_mask(Nx, Ny, params.clamp)
    n = int(free.sum())
    index = -np.ones((Nx, Ny), dtype=int)
    index[free] = np.arange(n)  # row-major over (i, j)

    def incidence(pairs):
        rows = []
        for (i0, j0), (i1, j1) in pairs:
            a, b = index[i0, j0], index[i1, j1]
            if a < 0 and b < 0:
                continue
            row = np.zeros(n)
            if a >= 0:
                row[a] = -1.0
            if b >= 0:
                row[b] = 1.0
            rows.append(row)
        return np.array(rows).reshape(-1, n)

    Dx = incidence(((i, j), (i + 1, j)) for i in range(Nx - 1) for j in range(Ny))
    Dy = incidence(((i, j), (i, j + 1)) for i in range(Nx) for j in range(Ny - 1))
    k_x = n * (params.l_x / Nx) ** 2
    k_y = n * (params.l_y / Ny) ** 2
    K = k_x * Dx.T @ Dx + k_y * Dy.T @ Dy
    k_nl = 0.02 * n**1.5 if params.k_nl is None else params.k_nl
    c_nl = 0.02 * n**1.5 if params.c_nl is None else params.c_nl
    if min(k_x, k_y, params.damping_ratio, k_nl, c_nl) <= 0:
        raise ValueError("membrane coefficients must be positive")
    D = np.vstack([Dx, Dy])
    return MechanicalFom(
        M=np.eye(n) / n,
        C=params.damping_ratio * K,
        K=K,
        nl_potential=EdgeQuartic(D, k_nl),
        nl_dissipation=EdgeQuartic(D, c_nl),
        name="membrane",
        metadata={
            "params": params.__dict__.copy(),
            "n": n,
            "k_x": k_x,
            "k_y": k_y,
            "k_nl": k_nl,
            "c_nl": c_nl,
            "clamp": params.clamp,
        },
    )


def modal_basis(fom: MechanicalFom):
    """Mass-normalized modes of K phi = w^2 M phi, ascending w; first nonzero entry positive."""
    try:
        w2, Phi = linalg.eigh(fom.K, fom.M)
    except linalg.LinAlgError as exc:
        raise RuntimeError(f"generalized eigenproblem failed: {exc}") from exc
    tol = 1e-10 * np.abs(Phi).max(axis=0)
    for j in range(Phi.shape[1]):
        first = np.flatnonzero(np.abs(Phi[:, j]) > tol[j])[0]
        if Phi[first, j] < 0:
            Phi[:, j] = -Phi[:, j]
    return np.sqrt(np.clip(w2, 0.0, None)), Phi


def modal_initial_condition(fom: MechanicalFom, nu, normalization: str = "mass"):
    """q0 = 0 and modal initial velocities.

    ``"mass"``: v0 = Phi @ nu with mass-normalized Phi.
    ``"momentum"``: the initial momentum M v0 = Psi @ nu with orthonormal modes
    Psi = M^(1/2) Phi, i.e. v0 = M^(-1/2) Phi_orth @ nu. Only differs from
    ``"mass"`` when M is not the identity.
    """
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if nu.size > fom.n:
        raise ValueError(f"{nu.size} modal coefficients for {fom.n} DOFs")
    if normalization not in ("mass", "momentum"):
        raise ValueError(f"unknown normalization {normalization!r}")
    coeffs = np.zeros(fom.n)
    coeffs[: nu.size] = nu
    if not np.any(coeffs):
        return np.zeros(fom.n), np.zeros(fom.n)
    _, Phi = modal_basis(fom)
    v0 = Phi @ coeffs
    if normalization == "momentum":
        # M^(1/2) Phi is orthonormal, so M v0 = M^(1/2) Phi nu -> v0 = M^(-1/2) Phi nu
        w, U = np.linalg.eigh(fom.M)
        v0 = (U / np.sqrt(w)) @ (U.T @ v0)
    return np.zeros(fom.n), v0


def fom_residual(fom: MechanicalFom, q, v, a):
    q, v, a = (_check_vec(x, fom.n, name) for x, name in ((q, "q"), (v, "v"), (a, "a")))
    return fom.M @ a + fom.C @ v + fom.nl_dissipation_grad(v) + fom.K @ q + fom.nl_potential_grad(q)


def total_energy(fom: MechanicalFom, q, v) -> float:
    q = _check_vec(q, fom.n, "q")
    v = _check_vec(v, fom.n, "v")
    return float(fom.kinetic_energy(v) + fom.potential_energy(q))
