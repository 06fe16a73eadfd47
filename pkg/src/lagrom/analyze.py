"""Evaluation: state and energy errors, spectra, ringdown curves, IC sweeps."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy.signal import find_peaks

from . import models
from .errors import InsufficientCycles, NumericalError
from .integrate import NewmarkConfig, SecondOrderSystem, simulate
from .reduce import PodBasis, lift

# Unseen-IC grid for the rod: 3 values per modal coefficient
SWEEP_NU1 = (5.0e-2, 8.75e-2, 1.25e-1)
SWEEP_NU2 = (1.0e-2, 3.0e-2, 5.0e-2)
SWEEP_NU3 = (4.0e-2, 5.75e-2, 1.25e-1)


def ic_grid(nu1=SWEEP_NU1, nu2=SWEEP_NU2, nu3=SWEEP_NU3):
    return [tuple(c) for c in itertools.product(nu1, nu2, nu3)]


@dataclass
class ErrorReport:
    errors: Dict[str, float]
    energy_error: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)


def relative_state_error(Q, basis: PodBasis, Qhat_rom) -> float:
    """||Q - V_r Qhat||_F / ||Q||_F."""
    Q = np.asarray(Q, dtype=float)
    Qhat_rom = np.asarray(Qhat_rom, dtype=float)
    if Q.shape[1] != Qhat_rom.shape[1]:
        raise ValueError(f"reference has {Q.shape[1]} columns, ROM has {Qhat_rom.shape[1]}")
    ref = np.linalg.norm(Q)
    if ref == 0.0:
        raise ValueError("reference snapshots have zero norm")
    return float(np.linalg.norm(Q - lift(basis, Qhat_rom)) / ref)


def error_report(Q, basis, Qhat_rom, partitions: Dict[str, np.ndarray], energy_error=None, **metadata) -> ErrorReport:
    """Relative state error restricted to each partition's columns, plus the full horizon."""
    errs = {}
    for name, idx in partitions.items():
        if len(idx):
            errs[name] = relative_state_error(Q[:, idx], basis, Qhat_rom[:, idx])
    errs["all"] = relative_state_error(Q, basis, Qhat_rom)
    return ErrorReport(errs, energy_error, dict(metadata))


def _energy_fn(system) -> Callable:
    if isinstance(system, models.MechanicalFom):
        return lambda q, v: models.total_energy(system, q, v)
    if isinstance(system, SecondOrderSystem):
        if system.energy is None:
            raise ValueError("system has no energy function")
        return system.energy
    if hasattr(system, "basis") and hasattr(system, "lin"):  # LagrangianRom
        from .rom import as_second_order

        return as_second_order(system).energy
    if callable(system):
        return system
    raise TypeError(f"cannot get an energy function from {type(system).__name__}")


def energy_series(system, Q, V) -> np.ndarray:
    E = _energy_fn(system)
    return np.array([E(Q[:, k], V[:, k]) for k in range(Q.shape[1])])


def energy_error_series(system, Q, V) -> np.ndarray:
    """|E(t_k) - E(t_0)| using the system's own energy."""
    E = energy_series(system, Q, V)
    return np.abs(E - E[0])


def amplitude_spectrum(signal, fs: float, window: Optional[str] = None):
    """One-sided amplitude spectrum; a sinusoid of amplitude A on a bin peaks at A."""
    x = np.asarray(signal, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("empty signal")
    if not fs > 0:
        raise ValueError("sampling frequency must be positive")
    n = x.size
    if window is None:
        w = np.ones(n)
    elif window == "hann":
        w = np.hanning(n) if n > 1 else np.ones(1)
    else:
        raise ValueError(f"unknown window {window!r}")
    X = np.fft.rfft(x * w)
    amp = np.abs(X) / w.sum()
    # fold negative frequencies, except DC and (even n) Nyquist
    if n % 2 == 0:
        amp[1:-1] *= 2.0
    else:
        amp[1:] *= 2.0
    return np.fft.rfftfreq(n, 1.0 / fs), amp


def spectrum_power(amplitudes, n: int) -> float:
    """Mean-square signal power implied by a one-sided amplitude spectrum."""
    a = np.asarray(amplitudes, dtype=float)
    p = a[0] ** 2 + 0.5 * np.sum(a[1:] ** 2)
    if n % 2 == 0 and a.size > 1:
        p += 0.5 * a[-1] ** 2  # Nyquist bin was not doubled
    return float(p)


def dominant_peaks(freqs, amps, count: int = 3, min_rel: float = 1e-3):
    """Frequencies of the largest local maxima of a spectrum (DC excluded)."""
    amps = np.asarray(amps)
    idx, _ = find_peaks(amps[1:], height=min_rel * amps[1:].max())
    idx = idx + 1
    top = idx[np.argsort(amps[idx])[::-1][:count]]
    return np.sort(np.asarray(freqs)[top])


@dataclass
class RingdownCurve:
    time: np.ndarray
    amplitude: np.ndarray
    frequency: np.ndarray
    damping_ratio: np.ndarray
    energy: np.ndarray

    def __len__(self):
        return len(self.time)


def _refine_peak(y, i):
    """Vertex of the parabola through samples i-1, i, i+1: (offset, value)."""
    a, b, c = y[i - 1], y[i], y[i + 1]
    den = a - 2.0 * b + c
    if den == 0.0:
        return 0.0, b
    off = 0.5 * (a - c) / den
    return off, b - 0.25 * (a - c) * off


def ringdown_analysis(signal, fs: float, min_height: float = 0.0) -> RingdownCurve:
    """Per-cycle amplitude, frequency and log-decrement damping of a free decay.

    Positive peaks are located on the samples, refined by three-point parabolic
    interpolation, and consecutive peak pairs give
    f = fs / (peak spacing in samples) and zeta = delta / sqrt(4 pi^2 + delta^2)
    with delta = ln(A_k / A_{k+1}). The energy column is left as NaN.
    """
    y = np.asarray(signal, dtype=float).reshape(-1)
    if y.size < 3:
        raise InsufficientCycles("signal shorter than three samples")
    idx, _ = find_peaks(y, height=max(min_height, 0.0) or None)
    idx = idx[(idx > 0) & (idx < y.size - 1) & (y[idx] > 0)]
    if idx.size < 3:
        raise InsufficientCycles(f"found {idx.size} positive peaks, need at least 3")
    refined = np.array([_refine_peak(y, i) for i in idx])
    pos = idx + refined[:, 0]
    amp = refined[:, 1]
    spacing = np.diff(pos)
    delta = np.log(amp[:-1] / amp[1:])
    zeta = delta / np.sqrt(4.0 * np.pi**2 + delta**2)
    return RingdownCurve(
        time=pos[:-1] / fs,
        amplitude=amp[:-1],
        frequency=fs / spacing,
        damping_ratio=zeta,
        energy=np.full(spacing.size, np.nan),
    )


def kinetic_energy_proxy(V, total_mass: float) -> np.ndarray:
    """Per-column 1/2 (M/n) sum v_i^2 for n equal lumped masses of total M."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    n = V.shape[0]
    return 0.5 * (total_mass / n) * np.sum(V * V, axis=0)


@dataclass
class SweepCell:
    nu: tuple
    error: float
    status: str = "ok"


def generalization_sweep(
    fom: models.MechanicalFom,
    rom,
    grid: Sequence[tuple],
    cfg: NewmarkConfig,
    T: float,
    normalization: str = "mass",
) -> list:
    """Relative state error of the ROM against the FOM for each modal IC.

    A failing cell (FOM or ROM non-convergence) is recorded with error NaN
    and a status message instead of aborting the sweep.
    """
    from .rom import simulate_rom, simulate_rom_batch

    V = rom.basis.Vr
    cells = []
    refs = {}
    for nu in grid:
        try:
            q0, v0 = models.modal_initial_condition(fom, nu, normalization)
            refs[nu] = (q0, v0, simulate(fom.as_system(), cfg, q0, v0, T).Q)
        except NumericalError as exc:
            refs[nu] = None
            cells.append(SweepCell(tuple(nu), float("nan"), f"fom failed: {exc}"))
    good = [nu for nu in grid if refs[nu] is not None]
    if good:
        Q0 = np.stack([V.T @ refs[nu][0] for nu in good], axis=1)
        V0 = np.stack([V.T @ refs[nu][1] for nu in good], axis=1)
        try:
            _, Qh, _ = simulate_rom_batch(rom, Q0, V0, cfg, T)
            rom_Q = {nu: Qh[:, j, :] for j, nu in enumerate(good)}
        except NumericalError:
            rom_Q = {}
            for j, nu in enumerate(good):  # isolate the failing cells
                try:
                    rom_Q[nu] = simulate_rom(rom, Q0[:, j], V0[:, j], cfg, T).Q
                except NumericalError as exc:
                    cells.append(SweepCell(tuple(nu), float("nan"), f"rom failed: {exc}"))
        for nu in good:
            if nu in rom_Q:
                try:
                    err = relative_state_error(refs[nu][2], rom.basis, rom_Q[nu])
                    cells.append(SweepCell(tuple(nu), err))
                except ValueError as exc:
                    cells.append(SweepCell(tuple(nu), float("nan"), f"error: {exc}"))
    order = {tuple(nu): i for i, nu in enumerate(grid)}
    cells.sort(key=lambda c: order[c.nu])
    return cells
