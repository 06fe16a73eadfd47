"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (also echoed in
the pytest terminal summary) and then asserts the same condition. The rod and
membrane runs are expensive and shared through a module-level cache.
"""
import math
import time

import numpy as np
import pytest
from scipy.linalg import expm

from lagrom import analyze as A
from lagrom import cli
from lagrom import rom as R
from lagrom import spml
from lagrom.diff import check_gradient
from lagrom.integrate import NewmarkConfig, simulate
from lagrom.lopinf import LinearLagrangianRom, infer_linear, objective
from lagrom.models import modal_initial_condition
from lagrom.reduce import (
    ReducedDataset,
    fd_derivatives,
    lift,
    partition_columns,
    pod_basis,
    pod_error,
    project,
    reduced_dataset,
    split_dataset,
)

LINES = []
_CACHE = {}


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    LINES.append(line)
    assert ok, line


def within(x, ref, rel):
    return abs(x - ref) <= rel * ref


def rom_errors(rom, Q, V, dt, split, T):
    b = rom.basis
    tr = R.simulate_rom(rom, project(b, Q[:, 0]), project(b, V[:, 0]), NewmarkConfig(dt), T)
    parts = partition_columns(tr.times, split)
    errs = {p: A.relative_state_error(Q[:, i], b, tr.Q[:, i]) for p, i in parts.items()}
    return errs, tr


def fmt(d):
    return "{" + ", ".join(f"{k}={v:.3g}" for k, v in d.items()) + "}"


# ------------------------------------------------------- shared FOM runs


def rod_case():
    if "rod" not in _CACHE:
        cfg = cli.resolve_config({})
        fom = cli.build_fom(cfg)
        q0, v0 = modal_initial_condition(fom, cfg["ic"]["nu"], cfg["ic"]["normalization"])
        t0 = time.process_time()
        tr = simulate(fom.as_system(), NewmarkConfig(cfg["dt"]), q0, v0, cfg["T"])
        _CACHE["rod"] = (cfg, fom, tr, time.process_time() - t0)
    return _CACHE["rod"]


def membrane_case():
    if "membrane" not in _CACHE:
        cfg = cli.resolve_config({"model": "membrane"})
        fom = cli.build_fom(cfg)
        q0, v0 = modal_initial_condition(fom, cfg["ic"]["nu"], cfg["ic"]["normalization"])
        t0 = time.process_time()
        tr = simulate(fom.as_system(), NewmarkConfig(cfg["dt"]), q0, v0, cfg["T"])
        _CACHE["membrane"] = (cfg, fom, tr, time.process_time() - t0)
    return _CACHE["membrane"]


def learned_rom(cfg, Q, r, kind):
    basis = pod_basis(Q, r)
    ds = split_dataset(reduced_dataset(project(basis, Q), cfg["dt"]), cfg["split"])
    lin = infer_linear(ds, conservative=cfg["lopinf"]["conservative"], eps=cfg["lopinf"]["eps"])
    if kind == "lopinf":
        return R.LagrangianRom(basis, lin, None, "lopinf"), ds
    arch = cli.arch_from(dict(cfg, r=r, arch=dict(cfg["arch"], hidden=list(cfg["arch"]["hidden"][:-1]) + [r])))
    model, _ = spml.train(ds, lin, arch, cli.train_config_from(cfg))
    return R.LagrangianRom(basis, lin, model, "lopinf_spml"), ds


# ---------------------------------------------------------------- 1, 2


def test_criterion_1_fd_stencils():
    t0 = time.process_time()
    dt = 0.1
    t = np.arange(30) * dt + 0.3
    d1, d2, v = fd_derivatives(t[None] ** 8, dt)
    tv = t[v]
    e_poly = max(
        np.max(np.abs(d1[0, v] - 8 * tv**7) / (8 * tv**7)),
        np.max(np.abs(d2[0, v] - 56 * tv**6) / (56 * tv**6)),
    )

    def err(h):
        s = np.arange(0, 8.0 + h / 2, h)
        a1, a2, m = fd_derivatives(np.sin(s)[None], h)
        return np.array([np.max(np.abs(a1[0, m] - np.cos(s[m]))), np.max(np.abs(a2[0, m] + np.sin(s[m])))])

    ratios = np.concatenate([err(h) / err(h / 2) for h in (0.4, 0.2)])
    dt_cpu = time.process_time() - t0
    ok = e_poly <= 1e-10 and np.all(np.abs(ratios / 2**8 - 1) <= 0.25) and dt_cpu < 1.0
    report(1, ok, f"poly rel err {e_poly:.2e}; halving ratios {np.round(ratios, 1)} (target 256 +-25%); {dt_cpu:.2f}s")


def test_criterion_2_pod():
    t0 = time.process_time()
    rng = np.random.default_rng(2)
    worst_orth = worst_rec = 0.0
    for r in (1, 5, 10, 19):
        Q = rng.standard_normal((20, 100))
        b = pod_basis(Q, r)
        worst_orth = max(worst_orth, np.abs(b.Vr.T @ b.Vr - np.eye(r)).max())
        s = np.linalg.svd(Q, compute_uv=False)  # Eckart-Young oracle
        expect = np.sqrt(np.sum(s[r:] ** 2)) / np.linalg.norm(Q)
        got = np.linalg.norm(Q - lift(b, project(b, Q))) / np.linalg.norm(Q)
        worst_rec = max(worst_rec, abs(got - expect) / expect, abs(pod_error(b) - expect) / expect)
    dt_cpu = time.process_time() - t0
    ok = worst_orth <= 1e-12 and worst_rec <= 1e-10 and dt_cpu < 1.0
    report(2, ok, f"max |VtV-I| {worst_orth:.1e}; reconstruction rel dev {worst_rec:.1e}; {dt_cpu:.2f}s")


# ------------------------------------------------------------------- 3


def test_criterion_3_newmark():
    from lagrom.integrate import linear_system

    osc = linear_system(np.eye(1), np.zeros((1, 1)), np.eye(1))
    errs = []
    for h in (0.02, 0.01, 0.005, 0.0025):
        tr = simulate(osc, NewmarkConfig(h), np.array([1.0]), np.array([0.0]), 2.0)
        errs.append(abs(tr.Q[0, -1] - math.cos(2.0)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    cfg, fom, tr, cpu = rod_case()
    E = A.energy_series(fom, tr.Q, tr.V)
    drift = np.abs(E - E[0]).max() / E[0]
    ok = np.all(np.abs(orders - 2) <= 0.2) and drift <= 1e-4 and cpu < 30.0
    report(3, ok, f"observed orders {np.round(orders, 3)}; rod energy drift {drift:.2e} (<=1e-4); FOM run {cpu:.1f}s")


# ------------------------------------------------------------------- 4


def test_criterion_4_lopinf_recovery():
    t0 = time.process_time()
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(3):
        B = rng.standard_normal((3, 3))
        Ks = B @ B.T + 2.0 * np.eye(3)
        B = rng.standard_normal((3, 3))
        Cs = 0.1 * (B @ B.T + 0.5 * np.eye(3))
        # exact trajectory of the first-order form as an independent oracle
        Afo = np.block([[np.zeros((3, 3)), np.eye(3)], [-Ks, -Cs]])
        dt = 1e-2
        step = expm(Afo * dt)
        x = np.empty((6, 801))
        x[:, 0] = rng.standard_normal(6)
        for k in range(800):
            x[:, k + 1] = step @ x[:, k]
        ds = split_dataset(reduced_dataset(x[:3], dt), (8.0, 8.0), require=("train",))
        lin = infer_linear(ds, conservative=False)
        worst = max(worst, np.linalg.norm(lin.K - Ks) / np.linalg.norm(Ks), np.linalg.norm(lin.C - Cs) / np.linalg.norm(Cs))
    # SPD floor on arbitrary (often indefinite) data
    eps = 1e-8
    floor = np.inf
    for k in range(20):
        X, Xd, Xdd = rng.standard_normal((3, 3, 60))
        data = ReducedDataset(X, Xd, Xdd, 1.0, np.ones(60, bool), split={"train": np.arange(60)})
        lin = infer_linear(data, conservative=bool(k % 2), eps=eps)
        floor = min(floor, np.linalg.eigvalsh(lin.K).min())
        if lin.C is not None:
            floor = min(floor, np.linalg.eigvalsh(lin.C).min())
    dt_cpu = time.process_time() - t0
    ok = worst <= 1e-3 and floor >= eps - 1e-10 and dt_cpu < 10.0
    report(4, ok, f"worst operator rel err {worst:.2e}; min eig over 20 fits {floor:.3e}; {dt_cpu:.1f}s")


# ---------------------------------------------------------------- 5, 6


def _random_model(arch, seed):
    rng = np.random.default_rng(seed)
    m = spml.init_model(arch, seed)
    return m.with_theta(m.theta + 0.3 * rng.standard_normal(arch.n_params))


def test_criterion_5_gradient_audit():
    t0 = time.process_time()
    rng = np.random.default_rng(5)
    arch = spml.SpmlArch(3, (5, 4), n_mlp=1, use_TNN=True, use_FNN=True)
    B = rng.standard_normal((3, 3))
    lin = LinearLagrangianRom(B @ B.T + 3 * np.eye(3), 0.1 * np.eye(3))
    batch = tuple(rng.standard_normal((3, 3, 12)))
    base = spml.init_model(arch, 0)
    worst = 0.0
    for k in range(10):
        m = _random_model(arch, 500 + k)
        rep = check_gradient(lambda th: spml.loss_and_grad(base.with_theta(th), lin, batch), m.theta, h=1e-5)
        worst = max(worst, rep.max_relative_error)
    dt_cpu = time.process_time() - t0
    ok = worst <= 1e-5 and dt_cpu < 10.0
    report(5, ok, f"max rel grad err over 10 points {worst:.2e} ({arch.n_params} params, U/F/T paths); {dt_cpu:.1f}s")


def test_criterion_6_prior_consistency():
    rng = np.random.default_rng(6)
    worst = 0.0
    for use_TNN, use_FNN, damped in ((False, False, False), (False, True, True), (True, True, True)):
        B = rng.standard_normal((4, 4))
        lin = LinearLagrangianRom(B @ B.T + 4 * np.eye(4), 0.2 * np.eye(4) if damped else None)
        batch = tuple(rng.standard_normal((3, 4, 300)))
        m = spml.init_model(spml.SpmlArch(4, (8, 6), use_TNN=use_TNN, use_FNN=use_FNN), 3)
        J = spml.loss(m, lin, batch)
        ref = objective(lin.K, lin.C, *batch)
        worst = max(worst, abs(J - ref) / ref)
    report(6, worst <= 1e-12, f"zero-initialized loss vs linear objective, max rel dev {worst:.1e}")


# ------------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_rod_tables():
    cfg, fom, tr, _ = rod_case()
    Q, V, dt, split, T = tr.Q, tr.V, cfg["dt"], cfg["split"], cfg["T"]
    t0 = time.process_time()
    lop, sp, intr = {}, {}, {}
    for r in (4, 6, 8):
        rom, _ = learned_rom(cfg, Q, r, "lopinf")
        lop[r] = rom_errors(rom, Q, V, dt, split, T)[0]
        rom, _ = learned_rom(cfg, Q, r, "lopinf_spml")
        sp[r], trr = rom_errors(rom, Q, V, dt, split, T)
        if r == 6:
            _CACHE["rod_spml_6"] = (rom, trr)
        rom = R.intrusive_project(fom, pod_basis(Q, r))
        intr[r] = rom_errors(rom, Q, V, dt, split, T)[0]
    cpu = time.process_time() - t0
    lop_ok = all(within(lop[r]["train"], 3.1e-2, 0.15) for r in lop)
    sp_ok = sp[6]["train"] <= 5e-2 and sp[6]["test"] <= 1e-1
    in_ok = within(intr[6]["test"], 3.5e-2, 0.15)

    def mono(d):
        return all(d[a][p] >= d[b][p] for a, b in ((4, 6), (6, 8)) for p in ("train", "test"))

    ok = lop_ok and sp_ok and in_ok and mono(sp) and mono(intr) and cpu <= 1800
    detail = (
        f"LOpInf train {[round(lop[r]['train'], 4) for r in lop]} (3.1e-2 +-15%: {lop_ok}); "
        f"SpML r=6 {fmt(sp[6])} ({sp_ok}); intrusive r=6 test {intr[6]['test']:.4f} (3.5e-2 +-15%: {in_ok}); "
        f"monotone SpML {mono(sp)} intrusive {mono(intr)}; {cpu:.0f}s"
    )
    report(7, ok, detail)


# ------------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_8_rod_structure():
    cfg, fom, tr, _ = rod_case()
    if "rod_spml_6" not in _CACHE:
        rom, _ = learned_rom(cfg, tr.Q, 6, "lopinf_spml")
        _CACHE["rod_spml_6"] = (rom, rom_errors(rom, tr.Q, tr.V, cfg["dt"], cfg["split"], cfg["T"])[1])
    rom, trr = _CACHE["rod_spml_6"]
    E = A.energy_series(rom, trr.Q, trr.V)
    eerr = np.abs(E - E[0]).max() / E[0]
    cells = A.generalization_sweep(
        fom, rom, A.ic_grid(), NewmarkConfig(cfg["dt"]), cfg["T"], cfg["ic"]["normalization"]
    )
    errs = np.array([c.error for c in cells])
    med = float(np.median(errs))
    ok = eerr <= 1e-3 and len(cells) == 27 and med <= 3e-2
    report(8, ok, f"ROM energy error {eerr:.2e} (<=1e-3); sweep of {len(cells)} ICs median {med:.3e} (<=3e-2), "
           f"range [{np.nanmin(errs):.3e}, {np.nanmax(errs):.3e}]")


# ------------------------------------------------------------------- 9


@pytest.mark.slow
def test_criterion_9_membrane():
    cfg, fom, tr, _ = membrane_case()
    Q, V, dt, split, T = tr.Q, tr.V, cfg["dt"], cfg["split"], cfg["T"]
    t0 = time.process_time()
    lop = {}
    for r in (10, 12):
        rom, _ = learned_rom(cfg, Q, r, "lopinf")
        lop[r] = rom_errors(rom, Q, V, dt, split, T)[0]
    rom, ds = learned_rom(cfg, Q, 12, "lopinf_spml")
    sp, trr = rom_errors(rom, Q, V, dt, split, T)
    _, F = spml.positivity_values(rom.model, rom.lin, ds.columns("val")[1])
    scale = np.abs(F).max()
    # dominant peaks on the test window at the node of largest motion
    idx = partition_columns(trr.times, split)["test"]
    node = int(np.argmax(np.abs(Q).max(axis=1)))
    f, a_fom = A.amplitude_spectrum(Q[node, idx], 1 / dt)
    _, a_rom = A.amplitude_spectrum((rom.basis.Vr @ trr.Q[:, idx])[node], 1 / dt)
    p_fom, p_rom = A.dominant_peaks(f, a_fom), A.dominant_peaks(f, a_rom)
    df = f[1] - f[0]
    peaks_ok = len(p_fom) == len(p_rom) > 0 and np.all(np.abs(np.sort(p_fom) - np.sort(p_rom)) <= df + 1e-12)
    cpu = time.process_time() - t0
    lop_ok = all(within(lop[r]["train"], 2.6e-1, 0.20) for r in lop)
    sp_ok = sp["train"] <= 1e-1 and sp["test"] <= 4e-1
    pos_ok = F.min() >= -1e-6 * scale
    ok = lop_ok and sp_ok and pos_ok and peaks_ok and cpu <= 3600
    detail = (
        f"LOpInf train r10 {lop[10]['train']:.4f} r12 {lop[12]['train']:.4f} (2.6e-1 +-20%: {lop_ok}); "
        f"SpML r=12 {fmt(sp)} ({sp_ok}); min F on val {F.min():.3e} vs -1e-6*{scale:.3e}; "
        f"peaks FOM {np.round(p_fom, 4)} ROM {np.round(p_rom, 4)} bin {df:.4f}; {cpu:.0f}s"
    )
    report(9, ok, detail)


# ------------------------------------------------------------------ 10


def test_criterion_10_ringdown_and_ingest(tmp_path):
    fs = 5000.0
    worst_f = worst_z = 0.0
    for zeta in np.geomspace(1e-4, 5e-2, 9):
        for f0 in (3.0, 17.0, 41.0):
            wn = 2 * np.pi * f0
            wd = wn * np.sqrt(1 - zeta**2)
            t = np.arange(int(8 * fs / f0)) / fs
            c = A.ringdown_analysis(np.exp(-zeta * wn * t) * np.cos(wd * t), fs)
            worst_f = max(worst_f, np.max(np.abs(c.frequency / (wd / (2 * np.pi)) - 1)))
            worst_z = max(worst_z, np.max(np.abs(c.damping_ratio / zeta - 1)))
    rng = np.random.default_rng(10)
    X = rng.standard_normal((206, 40)) * 10.0 ** rng.integers(-200, 200, (206, 40))
    cli.export_csv(tmp_path / "a.csv", X)
    Y, dt = cli.ingest_csv(tmp_path / "a.csv", 5000.0)
    ident = bool(np.array_equal(X, Y)) and Y.shape == (206, 40) and dt == 1 / 5000
    ok = worst_f <= 2e-3 and worst_z <= 0.05 and ident
    report(10, ok, f"max freq rel err {worst_f:.2e} (<=2e-3); max zeta rel err {worst_z:.2e} (<=5e-2); CSV round trip {ident}")
