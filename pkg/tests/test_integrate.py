import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from lagrom.errors import NonConvergence
from lagrom.integrate import (
    BatchSystem,
    NewmarkConfig,
    SecondOrderSystem,
    linear_system,
    n_steps,
    newmark_step,
    simulate,
    simulate_batch,
)

osc = linear_system(np.eye(1), np.zeros((1, 1)), np.eye(1))


def newmark_linear_oracle(M, C, K, q, v, a, dt, beta=0.25, gamma=0.5):
    """Closed-form one-step map of average-acceleration Newmark for M a + C v + K q = 0."""
    qp = q + dt * v + dt * dt * (0.5 - beta) * a
    vp = v + dt * (1 - gamma) * a
    A = M + gamma * dt * C + beta * dt * dt * K
    a1 = np.linalg.solve(A, -(C @ vp + K @ qp))
    return qp + beta * dt * dt * a1, vp + gamma * dt * a1, a1


def test_config_validation():
    with pytest.raises(ValueError):
        NewmarkConfig(0.0)
    with pytest.raises(ValueError):
        NewmarkConfig(1e-3, beta=0.6)
    with pytest.warns(UserWarning):
        NewmarkConfig(1e-3, gamma=0.6)


def test_one_step_taylor():
    dt = 0.01
    q, v, a = newmark_step(osc, NewmarkConfig(dt), np.array([1.0]), np.array([0.0]), np.array([-1.0]))
    assert abs(q[0] - math.cos(dt)) < dt**3
    assert abs(v[0] + math.sin(dt)) < dt**3


def test_zero_state_stays_zero():
    z = np.zeros(3)
    sys = linear_system(np.eye(3), 0.1 * np.eye(3), np.diag([1.0, 2.0, 3.0]))
    tr = simulate(sys, NewmarkConfig(0.01), z, z, 1.0)
    assert not np.any(tr.Q) and not np.any(tr.V) and not np.any(tr.A)


def test_step_matches_linear_oracle(rng):
    n = 5
    B = rng.standard_normal((n, n))
    M = B @ B.T + n * np.eye(n)
    K = np.diag(rng.uniform(1, 10, n))
    C = 0.05 * K
    q, v = rng.standard_normal(n), rng.standard_normal(n)
    a = np.linalg.solve(M, -(C @ v + K @ q))
    got = newmark_step(linear_system(M, C, K), NewmarkConfig(0.01), q, v, a)
    for x, y in zip(got, newmark_linear_oracle(M, C, K, q, v, a, 0.01)):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


def test_oscillator_endpoint():
    tr = simulate(osc, NewmarkConfig(1e-3), np.array([1.0]), np.array([0.0]), 1.0)
    assert len(tr) == 1001
    assert abs(tr.Q[0, -1] - math.cos(1.0)) <= 1e-5


def test_second_order_convergence():
    errs = []
    for dt in (0.02, 0.01, 0.005, 0.0025):
        tr = simulate(osc, NewmarkConfig(dt), np.array([1.0]), np.array([0.0]), 2.0)
        errs.append(abs(tr.Q[0, -1] - math.cos(2.0)))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.abs(ratios - 4.0) <= 0.8), ratios


def test_damped_energy_monotone():
    sys = linear_system(np.eye(2), np.diag([0.1, 0.3]), np.diag([1.0, 5.0]))
    tr = simulate(sys, NewmarkConfig(0.01), np.array([1.0, -0.5]), np.array([0.0, 1.0]), 10.0)
    E = np.array([sys.energy(q, v) for q, v in zip(tr.Q.T, tr.V.T)])
    assert np.all(E[1:] <= E[:-1] * (1 + 1e-10))


@given(st.floats(0.5, 5.0), st.floats(-2, 2), st.floats(-2, 2))
def test_linear_energy_conserved(k, q0, v0):
    assume(q0 * q0 + v0 * v0 > 1e-2)  # Newton tolerance is absolute near zero
    sys = linear_system(np.eye(1), np.zeros((1, 1)), np.array([[k]]))
    tr = simulate(sys, NewmarkConfig(0.05), np.array([q0]), np.array([v0]), 5.0)
    E = np.array([sys.energy(q, v) for q, v in zip(tr.Q.T, tr.V.T)])
    assert np.max(np.abs(E - E[0])) <= 1e-10 * E[0]


def test_n_steps_counts():
    assert n_steps(16.0, 1e-3) == 16001
    assert n_steps(35.0, 5e-3) == 7001
    assert n_steps(0.0, 1e-3) == 1


def test_initial_acceleration_is_solved():
    sys = linear_system(2 * np.eye(1), np.zeros((1, 1)), 3 * np.eye(1))
    tr = simulate(sys, NewmarkConfig(0.1), np.array([1.0]), np.array([0.0]), 0.0)
    assert tr.A[0, 0] == pytest.approx(-1.5)


def test_nonconvergence_reports_step():
    # residual with a wrong Jacobian and a steep nonlinearity: Newton cannot converge
    res = lambda q, v, a: a + 50 * np.sinh(10 * q)
    jac = lambda q, v, a: (np.zeros((1, 1)), np.zeros((1, 1)), np.eye(1))
    sys = SecondOrderSystem(1, res, jac)
    with pytest.raises(NonConvergence) as exc:
        simulate(sys, NewmarkConfig(0.5, newton_max=5), np.array([1.0]), np.array([0.0]), 5.0)
    assert exc.value.step is not None


def test_batch_matches_single(rng):
    # Duffing-like batch: a + q + q^3 = 0, columns independent
    res1 = lambda q, v, a: a + q + q**3
    jac1 = lambda q, v, a: (np.diag(1 + 3 * q**2), np.zeros((2, 2)), np.eye(2))
    single = SecondOrderSystem(2, res1, jac1)
    batch = BatchSystem(
        2,
        lambda Q, V, A: A + Q + Q**3,
        lambda Q, V, A: (
            np.stack([np.diag(1 + 3 * Q[:, b] ** 2) for b in range(Q.shape[1])]),
            np.zeros((Q.shape[1], 2, 2)),
            np.broadcast_to(np.eye(2), (Q.shape[1], 2, 2)),
        ),
    )
    Q0, V0 = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    cfg = NewmarkConfig(0.01)
    t, Qs, Vs = simulate_batch(batch, cfg, Q0, V0, 1.0)
    for b in range(4):
        tr = simulate(single, cfg, Q0[:, b], V0[:, b], 1.0)
        np.testing.assert_allclose(Qs[:, b, :], tr.Q, atol=1e-12)
        np.testing.assert_allclose(Vs[:, b, :], tr.V, atol=1e-12)
