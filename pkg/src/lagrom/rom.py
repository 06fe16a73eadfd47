"""Assembled reduced-order models and their time integration.

A :class:`LagrangianRom` couples a POD basis with reduced operators. Learned
ROMs evaluate forces and Hessians of the neural energies through compiled
:mod:`lagrom.diff` programs; intrusive ROMs project the full-order operators.
Either way the result is a :class:`SecondOrderSystem` for the Newmark engine.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import diff as D
from . import models, spml
from .integrate import BatchSystem, NewmarkConfig, SecondOrderSystem, Trajectory, simulate, simulate_batch
from .lopinf import LinearLagrangianRom
from .reduce import PodBasis, lift, project

KINDS = ("lopinf", "lopinf_spml", "pod_spml", "intrusive")


@dataclass
class LagrangianRom:
    basis: PodBasis
    lin: LinearLagrangianRom
    model: Optional[spml.SpmlModel] = None
    kind: str = "lopinf"
    mass: Optional[np.ndarray] = None  # intrusive only: V^T M V
    fom: Optional[models.MechanicalFom] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown ROM kind {self.kind!r}")
        if self.lin.r != self.basis.r:
            raise ValueError(f"operators are {self.lin.r}x{self.lin.r}, basis has r={self.basis.r}")
        if self.model is not None and self.model.r != self.basis.r:
            raise ValueError("SpML model dimension differs from basis")
        if self.kind == "intrusive" and (self.fom is None or self.mass is None):
            raise ValueError("intrusive ROM needs the full-order model and projected mass")

    @property
    def r(self) -> int:
        return self.basis.r

    def effective_mass(self) -> np.ndarray:
        if self.kind == "intrusive":
            return self.mass
        M = np.eye(self.r)
        if self.model is not None:
            M = M + spml.m_nn(self.model)
        return M


# ------------------------------------------------------------- learned ROM


@lru_cache(maxsize=32)
def _force_program(arch: spml.SpmlArch) -> D.Program:
    """Per point: dU/dq, d2U/dq2, U(q), and the same for F at v."""
    g = spml._graphs(arch)
    Xq, Xv = D.input("Xq"), D.input("Xv")
    Gu, Hu = D.hessian_batched(lambda X: g.energy("U", X), Xq)
    outs = [Gu, Hu, g.energy("U", Xq)]
    if arch.use_FNN:
        Gf, Hf = D.hessian_batched(lambda X: g.energy("F", X), Xv)
        outs += [Gf, Hf, g.energy("F", Xv)]
    return D.compile(outs)


class _ForceCache:
    """Evaluate the force program once per (q, v) point or block of points."""

    def __init__(self, model: spml.SpmlModel):
        self.model = model
        self.prog = _force_program(model.arch)
        self.feed = dict(model.params)
        self.key = None
        self.out = None

    def __call__(self, q, v):
        key = (q.shape, q.tobytes(), v.tobytes())
        if key != self.key:
            r = self.model.r
            Q = q.reshape(r, -1)
            nb = Q.shape[1]
            self.feed["Xq"] = np.repeat(Q, r, axis=1)
            self.feed["Xv"] = np.repeat(v.reshape(r, -1), r, axis=1)
            self.feed["__eye__"] = np.tile(np.eye(r), (1, nb))
            self.out = self.prog(self.feed)
            self.key = key
        return self.out

    def batch(self, Q, V):
        """Gradients (r x nb) and Hessian stacks (nb x r x r) for U and F."""
        out = self(Q, V)
        r, nb = Q.shape
        grad = lambda G: G[:, ::r]
        hess = lambda H: H.reshape(r, nb, r).transpose(1, 0, 2)
        res = [grad(out[0]), hess(out[1])]
        if len(out) > 3:
            res += [grad(out[3]), hess(out[4])]
        return res


def _learned_system(rom: LagrangianRom) -> SecondOrderSystem:
    r = rom.r
    K = rom.lin.K
    C = rom.lin.damping()
    Meff = rom.effective_mass()
    model = rom.model
    if model is None or not np.any(model.theta):
        # zero model: plain linear system, no graph evaluation needed
        return SecondOrderSystem(
            r,
            lambda q, v, a: Meff @ a + C @ v + K @ q,
            lambda q, v, a: (K, C, Meff),
            lambda q, v: 0.5 * v @ Meff @ v + 0.5 * q @ K @ q,
        )
    forces = _ForceCache(model)
    use_F = model.arch.use_FNN
    zero = np.zeros((r, r))

    def residual(q, v, a):
        out = forces(q, v)
        res = Meff @ a + C @ v + K @ q + out[0][:, 0]
        if use_F:
            res = res + out[3][:, 0]
        return res

    def jacobians(q, v, a):
        out = forces(q, v)
        return K + out[1], C + (out[4] if use_F else zero), Meff

    def energy(q, v):
        return float(0.5 * v @ Meff @ v + 0.5 * q @ K @ q + forces(q, v)[2][0, 0])

    return SecondOrderSystem(r, residual, jacobians, energy)


# ----------------------------------------------------------- intrusive ROM


def intrusive_project(fom: models.MechanicalFom, basis: PodBasis, metadata=None) -> LagrangianRom:
    """Galerkin projection of the full-order operators onto span(V_r)."""
    V = basis.Vr
    if V.shape[0] != fom.n:
        raise ValueError(f"basis has {V.shape[0]} rows, FOM has n={fom.n}")
    sym = lambda A: 0.5 * (A + A.T)
    Mr = sym(V.T @ fom.M @ V)
    Kr = sym(V.T @ fom.K @ V)
    Cr = sym(V.T @ fom.C @ V)
    lin = LinearLagrangianRom(Kr, None if fom.conservative else Cr, 0.0)
    return LagrangianRom(basis, lin, None, "intrusive", Mr, fom, dict(metadata or {}))


def _intrusive_system(rom: LagrangianRom) -> SecondOrderSystem:
    V = rom.basis.Vr
    fom = rom.fom
    U, F = fom.nl_potential, fom.nl_dissipation
    Mr, Kr, Cr = rom.mass, rom.lin.K, rom.lin.damping()

    def residual(q, v, a):
        return Mr @ a + Cr @ v + V.T @ F.grad(V @ v) + Kr @ q + V.T @ U.grad(V @ q)

    def jacobians(q, v, a):
        return Kr + V.T @ U.hess(V @ q) @ V, Cr + V.T @ F.hess(V @ v) @ V, Mr

    def energy(q, v):
        return float(0.5 * v @ Mr @ v + 0.5 * q @ Kr @ q + U.value(V @ q))

    return SecondOrderSystem(rom.r, residual, jacobians, energy)


# ------------------------------------------------------------------- API


def as_batch_system(rom: LagrangianRom) -> BatchSystem:
    """Columnwise version of :func:`as_second_order` for many states at once."""
    r = rom.r
    if rom.kind == "intrusive":
        V = rom.basis.Vr
        U, F = rom.fom.nl_potential, rom.fom.nl_dissipation
        Mr, Kr, Cr = rom.mass, rom.lin.K, rom.lin.damping()

        def residual(Q, Vd, A):
            return Mr @ A + Cr @ Vd + V.T @ F.grad(V @ Vd) + Kr @ Q + V.T @ U.grad(V @ Q)

        def jacobians(Q, Vd, A):
            nb = Q.shape[1]
            jq = np.stack([Kr + V.T @ U.hess(V @ Q[:, b]) @ V for b in range(nb)])
            jv = np.stack([Cr + V.T @ F.hess(V @ Vd[:, b]) @ V for b in range(nb)])
            return jq, jv, np.broadcast_to(Mr, (nb, r, r))

        return BatchSystem(r, residual, jacobians)

    K, C, Meff = rom.lin.K, rom.lin.damping(), rom.effective_mass()
    model = rom.model
    if model is None or not np.any(model.theta):
        return BatchSystem(
            r,
            lambda Q, Vd, A: Meff @ A + C @ Vd + K @ Q,
            lambda Q, Vd, A: tuple(np.broadcast_to(X, (Q.shape[1], r, r)) for X in (K, C, Meff)),
        )
    forces = _ForceCache(model)
    use_F = model.arch.use_FNN

    def residual(Q, Vd, A):
        out = forces.batch(Q, Vd)
        R = Meff @ A + C @ Vd + K @ Q + out[0]
        return R + out[2] if use_F else R

    def jacobians(Q, Vd, A):
        out = forces.batch(Q, Vd)
        nb = Q.shape[1]
        jv = C + out[3] if use_F else np.broadcast_to(C, (nb, r, r))
        return K + out[1], jv, np.broadcast_to(Meff, (nb, r, r))

    return BatchSystem(r, residual, jacobians)


def simulate_rom_batch(rom: LagrangianRom, Qhat0, Vhat0, cfg: NewmarkConfig, T: float):
    """Integrate several reduced initial conditions (columns) together."""
    return simulate_batch(as_batch_system(rom), cfg, Qhat0, Vhat0, T)


def as_second_order(rom: LagrangianRom) -> SecondOrderSystem:
    if rom.kind == "intrusive":
        return _intrusive_system(rom)
    return _learned_system(rom)


def simulate_rom(rom: LagrangianRom, qhat0, vhat0, cfg: NewmarkConfig, T: float) -> Trajectory:
    return simulate(as_second_order(rom), cfg, qhat0, vhat0, T)


def rom_energy(rom: LagrangianRom, q, v) -> float:
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    if q.shape != (rom.r,) or v.shape != (rom.r,):
        raise ValueError(f"reduced state must have shape ({rom.r},)")
    return as_second_order(rom).energy(q, v)


def reduced_initial_condition(rom: LagrangianRom, q0, v0):
    return project(rom.basis, q0), project(rom.basis, v0)


__all__ = [
    "KINDS",
    "LagrangianRom",
    "as_second_order",
    "simulate_rom",
    "simulate_rom_batch",
    "as_batch_system",
    "lift",
    "intrusive_project",
    "rom_energy",
    "save_rom",
    "load_rom",
]


# --------------------------------------------------------------- archive

ARCHIVE_FORMAT = "lagrom-rom"
ARCHIVE_VERSION = 1


def save_rom(rom: LagrangianRom, path) -> None:
    """Single .npz container: basis, operators, SpML checkpoint, JSON metadata."""
    meta = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "kind": rom.kind,
        "eps": rom.lin.eps,
        "residual_norm": rom.lin.residual_norm,
        "conservative": rom.lin.conservative,
        "metadata": rom.metadata,
    }
    arrays = {
        "Vr": rom.basis.Vr,
        "singular_values": rom.basis.singular_values,
        "K": rom.lin.K,
    }
    if rom.lin.C is not None:
        arrays["C"] = rom.lin.C
    if rom.model is not None:
        arrays["spml"] = np.frombuffer(spml.checkpoint_bytes(rom.model), dtype=np.uint8)
    if rom.kind == "intrusive":
        arrays["mass"] = rom.mass
        meta["fom"] = {"name": rom.fom.name, "params": rom.fom.metadata.get("params", {})}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True, default=float).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_rom(path) -> LagrangianRom:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("format") != ARCHIVE_FORMAT:
            raise ValueError(f"{path} is not a ROM archive")
        if meta["version"] != ARCHIVE_VERSION:
            raise ValueError(f"unsupported ROM archive version {meta['version']}")
        basis = PodBasis(z["Vr"].copy(), z["singular_values"].copy())
        C = z["C"].copy() if "C" in z else None
        lin = LinearLagrangianRom(z["K"].copy(), C, meta["eps"], meta["residual_norm"])
        model = spml.model_from_bytes(bytes(z["spml"])) if "spml" in z else None
        mass = z["mass"].copy() if "mass" in z else None
    fom = None
    if meta["kind"] == "intrusive":
        fom = _rebuild_fom(meta["fom"])
    return LagrangianRom(basis, lin, model, meta["kind"], mass, fom, meta.get("metadata", {}))


def _rebuild_fom(info) -> models.MechanicalFom:
    if info["name"] == "rod":
        return models.build_rod(models.RodParams(**info["params"]))
    if info["name"] == "membrane":
        return models.build_membrane(models.MembraneParams(**info["params"]))
    raise ValueError(f"cannot rebuild full-order model {info['name']!r}")
