"""POD basis, projection, eighth-order finite differences and time splits."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

# Central stencils, offsets 1..4 (first derivative is antisymmetric).
FIRST = np.array([4 / 5, -1 / 5, 4 / 105, -1 / 280])
SECOND_CENTER = -205 / 72
SECOND = np.array([8 / 5, -1 / 5, 8 / 315, -1 / 560])
HALF_WIDTH = 4

PARTITIONS = ("train", "val", "test")


@dataclass(frozen=True)
class PodBasis:
    Vr: np.ndarray
    singular_values: np.ndarray

    @property
    def r(self) -> int:
        return self.Vr.shape[1]

    @property
    def n(self) -> int:
        return self.Vr.shape[0]


@dataclass
class ReducedDataset:
    Qhat: np.ndarray
    Qdot: np.ndarray
    Qddot: np.ndarray
    dt: float
    valid_mask: np.ndarray
    t0: float = 0.0
    split: dict = field(default_factory=dict)

    @property
    def r(self) -> int:
        return self.Qhat.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.Qhat.shape[1])

    def columns(self, part: str):
        """(Qhat, Qdot, Qddot) restricted to one partition."""
        idx = self.split[part]
        return self.Qhat[:, idx], self.Qdot[:, idx], self.Qddot[:, idx]


def pod_basis(Q: np.ndarray, r: int) -> PodBasis:
    """Leading r left singular vectors of the snapshot matrix.

    Each column is sign-fixed so that its largest-magnitude entry is positive,
    which makes the basis deterministic for a given Q.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2:
        raise ValueError("snapshot matrix must be 2-D")
    if not 1 <= r <= min(Q.shape):
        raise ValueError(f"r={r} outside 1..{min(Q.shape)}")
    U, s, _ = np.linalg.svd(Q, full_matrices=False)
    Vr = U[:, :r].copy()
    pivots = np.argmax(np.abs(Vr), axis=0)
    signs = np.sign(Vr[pivots, np.arange(r)])
    signs[signs == 0] = 1.0
    return PodBasis(Vr * signs, s)


def project(basis: PodBasis, Q: np.ndarray) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.shape[0] != basis.n:
        raise ValueError(f"snapshot rows {Q.shape[0]} != basis rows {basis.n}")
    return basis.Vr.T @ Q


def lift(basis: PodBasis, Qhat: np.ndarray) -> np.ndarray:
    Qhat = np.asarray(Qhat, dtype=float)
    if Qhat.shape[0] != basis.r:
        raise ValueError(f"reduced rows {Qhat.shape[0]} != r={basis.r}")
    return basis.Vr @ Qhat


def pod_error(basis: PodBasis, r: int | None = None) -> float:
    """Relative Eckart-Young reconstruction error sqrt(sum_{i>r} s_i^2)/||Q||_F."""
    s = basis.singular_values
    r = basis.r if r is None else r
    return float(np.sqrt(np.sum(s[r:] ** 2)) / np.sqrt(np.sum(s**2)))


def fd_derivatives(Qhat: np.ndarray, dt: float):
    """Eighth-order central first/second derivatives along axis 1.

    The four columns at each end have no full stencil; they are left as NaN
    and flagged False in the returned mask.
    """
    X = np.atleast_2d(np.asarray(Qhat, dtype=float))
    K = X.shape[1]
    if K < 2 * HALF_WIDTH + 1:
        raise ValueError(f"need at least {2 * HALF_WIDTH + 1} samples, got {K}")
    w = HALF_WIDTH
    mid = slice(w, K - w)
    d1 = np.zeros((X.shape[0], K - 2 * w))
    d2 = SECOND_CENTER * X[:, mid]
    for j in range(1, w + 1):
        plus = X[:, w + j : K - w + j]
        minus = X[:, w - j : K - w - j]
        d1 = d1 + FIRST[j - 1] * (plus - minus)
        d2 = d2 + SECOND[j - 1] * (plus + minus)
    Qdot = np.full_like(X, np.nan)
    Qddot = np.full_like(X, np.nan)
    Qdot[:, mid] = d1 / dt
    Qddot[:, mid] = d2 / (dt * dt)
    valid = np.zeros(K, dtype=bool)
    valid[mid] = True
    return Qdot, Qddot, valid


def reduced_dataset(Qhat: np.ndarray, dt: float, t0: float = 0.0) -> ReducedDataset:
    Qdot, Qddot, valid = fd_derivatives(Qhat, dt)
    return ReducedDataset(np.asarray(Qhat, dtype=float), Qdot, Qddot, dt, valid, t0)


def partition_columns(times: np.ndarray, boundaries, valid=None) -> dict:
    """Column indices of train [t0, b1], val (b1, b2], test (b2, end]."""
    b1, b2 = boundaries
    times = np.asarray(times)
    if not times[0] <= b1 <= b2 <= times[-1]:
        raise ValueError(f"split boundaries {boundaries} outside [{times[0]}, {times[-1]}]")
    eps = 1e-9 * max(abs(times[-1]), 1.0)
    labels = np.where(times <= b1 + eps, 0, np.where(times <= b2 + eps, 1, 2))
    keep = np.ones(len(times), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    return {name: np.flatnonzero((labels == i) & keep) for i, name in enumerate(PARTITIONS)}


def split_dataset(dataset: ReducedDataset, boundaries, require=PARTITIONS) -> ReducedDataset:
    split = partition_columns(dataset.times, boundaries, dataset.valid_mask)
    for name in require:
        if split[name].size == 0:
            raise ValueError(f"empty {name} partition for boundaries {tuple(boundaries)}")
    return replace(dataset, split=split)
