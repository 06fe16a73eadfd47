import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lagrom import models
from lagrom.integrate import NewmarkConfig, simulate
from lagrom.models import MembraneParams, RodParams, build_membrane, build_rod

from conftest import fd_grad


@pytest.fixture(scope="module")
def rod():
    return build_rod()


@pytest.fixture(scope="module")
def membrane():
    return build_membrane()


def test_rod_stiffness_tridiagonal(rod):
    K = rod.K
    assert K.shape == (64, 64)
    for i in range(1, 63):
        assert K[i, i - 1] == -65.0 and K[i, i] == 130.0 and K[i, i + 1] == -65.0
    # fixed ends: 2 kappa on the diagonal
    assert K[0, 0] == 130.0 and K[-1, -1] == 130.0
    assert np.array_equal(K, K.T)
    np.testing.assert_array_equal(rod.M, 1.56e-2 * np.eye(64))
    assert not np.any(rod.C)


def test_spd_operators(rod, membrane):
    for fom in (rod, membrane):
        for A in (fom.M, fom.K):
            assert np.max(np.abs(A - A.T)) <= 1e-12 * np.max(np.abs(A))
            assert np.linalg.eigvalsh(A)[0] > 0
        assert np.linalg.eigvalsh(fom.C)[0] >= -1e-12 * np.abs(fom.C).max(initial=1.0)


def test_zero_equilibrium(rod, membrane):
    for fom in (rod, membrane):
        z = np.zeros(fom.n)
        assert not np.any(fom.nl_potential_grad(z))
        assert not np.any(fom.nl_dissipation_grad(z))
        assert fom.potential_energy(z) == 0.0
        assert fom.dissipation(z) == 0.0


def test_three_mass_single_edge_hand_expansion():
    fom = build_rod(RodParams(n=3, m=1.0, kappa=1.0, rho=1.0, nl_lo=1, nl_hi=1))
    q = np.array([0.0, 0.1, 0.0])
    assert fom.nl_potential.value(q) == pytest.approx(2.5e-5, rel=1e-12)
    g = fom.nl_potential_grad(q)
    np.testing.assert_allclose(g, [-1e-3, 1e-3, 0.0], rtol=1e-12, atol=1e-18)
    np.testing.assert_allclose(fd_grad(fom.nl_potential.value, q, 1e-5), g, rtol=1e-6, atol=1e-14)


def test_rod_rejects_bad_params():
    with pytest.raises(ValueError):
        build_rod(RodParams(n=1))
    with pytest.raises(ValueError):
        build_rod(RodParams(nl_lo=0))
    with pytest.raises(ValueError):
        build_rod(RodParams(nl_hi=64))


def test_membrane_dof_counts():
    assert build_membrane().n == 240
    fom = build_membrane(MembraneParams(clamp="all"))
    assert fom.n == 19 * 11
    with pytest.raises(ValueError):
        build_membrane(MembraneParams(N_x=2))


def test_membrane_cubic_coefficient(membrane):
    assert 0.02 * 240**1.5 == pytest.approx(74.361, abs=5e-4)
    assert membrane.metadata["k_nl"] == pytest.approx(74.361, abs=5e-4)
    assert membrane.metadata["clamp"] == "xy0"
    np.testing.assert_allclose(membrane.M, np.eye(240) / 240)
    np.testing.assert_allclose(membrane.C, 1e-4 * membrane.K)


def test_membrane_edge_stiffness():
    # 3x3 grid, clamp all -> one free node with four springs to the walls
    p = MembraneParams(l_x=1.0, l_y=2.0, N_x=3, N_y=3, clamp="all")
    fom = build_membrane(p)
    kx, ky = 1 * (1.0 / 3) ** 2, 1 * (2.0 / 3) ** 2
    np.testing.assert_allclose(fom.K, [[2 * kx + 2 * ky]])


def test_nl_gradients_match_fd(rod, membrane, rng):
    for fom in (rod, membrane):
        for _ in range(100 if fom is rod else 10):
            q = 0.05 * rng.standard_normal(fom.n)
            g = fom.nl_potential_grad(q)
            fd = fd_grad(lambda x: fom.potential_energy(x) - 0.5 * x @ fom.K @ x, q, 1e-6)
            assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)


def test_fom_residual(rod, rng):
    z = np.zeros(rod.n)
    assert not np.any(models.fom_residual(rod, z, z, z))
    q, v, a = (rng.standard_normal(rod.n) * 0.05 for _ in range(3))
    Uq = lambda x: rod.potential_energy(x)
    expect = rod.M @ a + fd_grad(Uq, q, 1e-6)
    res = models.fom_residual(rod, q, v, a)
    assert np.linalg.norm(res - expect) <= 1e-8 * np.linalg.norm(res)
    with pytest.raises(ValueError):
        models.fom_residual(rod, q[:3], v, a)


def test_linear_residual_zero_at_exact_acceleration(membrane, rng):
    lin = models.MechanicalFom(membrane.M, membrane.C, membrane.K, models.EdgeQuartic(np.zeros((0, 240)), 0.0),
                               models.EdgeQuartic(np.zeros((0, 240)), 0.0))
    q, v = rng.standard_normal(240), rng.standard_normal(240)
    a = -np.linalg.solve(lin.M, lin.C @ v + lin.K @ q)
    assert np.linalg.norm(models.fom_residual(lin, q, v, a)) <= 1e-12 * np.linalg.norm(lin.K @ q)


def test_total_energy():
    one = models.MechanicalFom(np.eye(1), np.zeros((1, 1)), np.eye(1), models.EdgeQuartic(np.zeros((0, 1)), 0.0),
                               models.EdgeQuartic(np.zeros((0, 1)), 0.0))
    assert models.total_energy(one, [0.0], [0.0]) == 0.0
    assert models.total_energy(one, [1.0], [0.0]) == 0.5


def test_modal_ic_cases(rod):
    q0, v0 = models.modal_initial_condition(rod, [0.0, 0.0])
    assert not np.any(q0) and not np.any(v0)
    two = models.MechanicalFom(np.eye(2), np.zeros((2, 2)), np.diag([1.0, 4.0]),
                               models.EdgeQuartic(np.zeros((0, 2)), 0.0), models.EdgeQuartic(np.zeros((0, 2)), 0.0))
    _, v = models.modal_initial_condition(two, [1.0, 0.0])
    np.testing.assert_allclose(v, [1.0, 0.0])
    w, Phi = models.modal_basis(rod)
    nu = [0.1, 0.025, 0.05]
    q0, v0 = models.modal_initial_condition(rod, nu)
    np.testing.assert_allclose(v0, Phi[:, :3] @ nu, rtol=1e-12)
    np.testing.assert_allclose(Phi.T @ rod.M @ Phi, np.eye(64), atol=1e-10)
    assert np.all(np.diff(w) > 0)
    E = models.total_energy(rod, q0, v0)
    assert E == pytest.approx(0.5 * v0 @ rod.M @ v0, rel=1e-14)
    with pytest.raises(ValueError):
        models.modal_initial_condition(rod, np.ones(65))


def test_momentum_normalization_scales_by_inverse_sqrt_mass(rod):
    _, vm = models.modal_initial_condition(rod, [0.1, 0.025, 0.05], "mass")
    _, vp = models.modal_initial_condition(rod, [0.1, 0.025, 0.05], "momentum")
    np.testing.assert_allclose(vp, vm / math.sqrt(1.56e-2), rtol=1e-12)


@given(st.lists(st.floats(-1, 1), min_size=64, max_size=64))
def test_dissipation_nonnegative(vals):
    fom = build_membrane(MembraneParams(N_x=5, N_y=4))
    v = np.resize(np.array(vals), fom.n)
    assert fom.dissipation(v) >= 0.0
    assert models.total_energy(fom, v, v) >= 0.0


def test_energy_dissipation_identity():
    fom = build_membrane(MembraneParams(N_x=6, N_y=5, damping_ratio=1e-2))
    _, v0 = models.modal_initial_condition(fom, [0.5, 0.2, 0.3])
    dt = 1e-3
    tr = simulate(fom.as_system(), NewmarkConfig(dt), np.zeros(fom.n), v0, 0.5)
    E = np.array([models.total_energy(fom, q, v) for q, v in zip(tr.Q.T, tr.V.T)])
    P = np.array([v @ (fom.C @ v + fom.nl_dissipation_grad(v)) for v in tr.V.T])
    dE = np.diff(E)
    work = -0.5 * dt * (P[1:] + P[:-1])
    assert np.all(dE <= 1e-12)
    assert np.max(np.abs(dE - work)) <= 10 * dt**2 * np.max(np.abs(P))
