from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracecollapse import matcore as mc
from tracecollapse import tracedyn as td


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_phase_point_real_round_trip(rng):
    z = td.random_phase_point(2, 3, rng)
    x = z.to_real()
    assert x.shape == (2 * 2 * 9,)
    back = td.PhasePoint.from_real(x, 2, 3)
    assert np.allclose(back.q, z.q) and np.allclose(back.p, z.p)


def test_phase_point_shape_checks():
    with pytest.raises(mc.InvalidInputError):
        td.PhasePoint(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)))


def test_harmonic_gradients_closed_form(rng):
    h = td.harmonic_hamiltonian(2, mass=2.0, omega=3.0)
    z = td.random_phase_point(2, 3, rng)
    assert np.allclose(h.grad_q(z), 2.0 * 9.0 * z.q)
    assert np.allclose(h.grad_p(z), z.p / 2.0)
    assert h.trace(z) == pytest.approx(
        float(np.real(np.sum(np.trace(z.p @ z.p / 4 + 9.0 * z.q @ z.q, axis1=-2, axis2=-1)))))


def test_quartic_gradient_closed_form(rng):
    g, omega, c = 0.3, 1.2, 0.7
    h = td.quartic_hamiltonian(2, omega=omega, g=g, coupling=c)
    z = td.random_phase_point(2, 2, rng)
    a, b = z.q[0], z.q[1]
    # d/da of -(c/4) Tr [a,b]^2 is -(c/2) [b, [a,b]]
    expected = omega**2 * a + g * a @ a @ a - 0.5 * c * mc.commutator(b, mc.commutator(a, b))
    assert np.allclose(h.grad_q(z)[0], expected, atol=1e-12)


def test_quartic_rejects_bad_parameters():
    with pytest.raises(mc.InvalidInputError):
        td.quartic_hamiltonian(2, g=-1.0)


def test_model_flags():
    assert td.harmonic_hamiltonian().confining
    assert td.quartic_hamiltonian().confining
    assert not td.free_hamiltonian().confining
    assert not td.operator_time_hamiltonian().confining
    assert td.quartic_hamiltonian().separable
    with pytest.raises(mc.InvalidInputError):
        td.build_hamiltonian("nonsense")


def test_non_separable_model_falls_back_to_rk4(rng):
    vars_ = {"q0": "hermitian", "p0": "hermitian"}
    mons = [(0.5, ("p0", "p0")), (0.5, ("q0", "q0")), (0.05, ("q0", "q0", "p0", "p0")),
            (0.05, ("p0", "p0", "q0", "q0"))]
    h = td.TraceHamiltonian(mc.PolynomialModel(vars_, mons), ("q0",), ("p0",), name="mixed")
    assert not h.separable
    z = td.random_phase_point(1, 2, rng, 0.3)
    with pytest.raises(td.UnsupportedModelError):
        td.integrate_leapfrog(h, z, 1e-2, 10, allow_fallback=False)
    traj = td.integrate_leapfrog(h, z, 1e-2, 10)
    assert traj.symplectic is False


def test_rejects_non_self_adjoint_hamiltonian():
    with pytest.raises(mc.InvalidInputError):
        td.TraceHamiltonian(mc.PolynomialModel({"q0": "hermitian", "p0": "hermitian"}, [(1j, ("q0", "p0"))]),
                            ("q0",), ("p0",))


def test_leapfrog_matches_exact_oscillator():
    # scalar-like 1x1 oscillator: exact solution is a rotation
    h = td.harmonic_hamiltonian(1)
    z0 = td.PhasePoint(np.array([[[1.0]]]), np.array([[[0.0]]]))
    dt, steps = 1e-3, 1000
    zf = td.leapfrog_map(h, z0, dt, steps)
    assert zf.q[0, 0, 0].real == pytest.approx(np.cos(1.0), abs=1e-6)
    assert zf.p[0, 0, 0].real == pytest.approx(-np.sin(1.0), abs=1e-6)


def test_leapfrog_time_reversible(rng):
    h = td.quartic_hamiltonian(2)
    z0 = td.random_phase_point(2, 3, rng, 0.5)
    z1 = td.leapfrog_map(h, z0, 5e-3, 200)
    back = td.leapfrog_map(h, z1, -5e-3, 200)
    assert np.allclose(back.q, z0.q, atol=1e-11) and np.allclose(back.p, z0.p, atol=1e-11)


def test_integrate_leapfrog_matches_flow_map(rng):
    h = td.quartic_hamiltonian(2)
    z0 = td.random_phase_point(2, 2, rng, 0.5)
    traj = td.integrate_leapfrog(h, z0, 1e-2, 50, stride=10)
    assert len(traj) == 6
    ref = td.leapfrog_map(h, z0, 1e-2, 50)
    assert np.allclose(traj.final.q, ref.q, atol=1e-13)


def test_charge_vanishes_for_scalar_degrees_of_freedom(rng):
    # 1x1 matrices commute, so point-particle mechanics carries no charge
    z = td.random_phase_point(3, 1, rng)
    assert np.all(td.adler_millard_charge(z) == 0)
    assert np.linalg.norm(td.adler_millard_charge(td.random_phase_point(3, 2, rng))) > 1e-3


def test_leapfrog_conserves_charge_to_roundoff(rng):
    h = td.quartic_hamiltonian(2)
    traj = td.integrate_leapfrog(h, td.random_phase_point(2, 3, rng, 0.5), 1e-2, 500, stride=50)
    rep = td.conservation_report(traj)
    assert rep.max_charge_drift < 1e-12
    assert rep.max_energy_drift < 1e-4


def test_rk4_fourth_order():
    h = td.harmonic_hamiltonian(1)
    z0 = td.PhasePoint(np.array([[[1.0]]]), np.array([[[0.0]]]))
    errs = []
    for dt in (0.1, 0.05):
        n = int(round(1.0 / dt))
        zf = td.integrate_rk4(h, z0, dt, n, stride=n).final
        errs.append(abs(zf.q[0, 0, 0].real - np.cos(1.0)))
    assert np.log2(errs[0] / errs[1]) == pytest.approx(4.0, abs=0.3)


def test_integrator_input_checks(rng):
    h = td.harmonic_hamiltonian(1)
    z = td.random_phase_point(1, 2, rng)
    with pytest.raises(mc.InvalidInputError):
        td.integrate_leapfrog(h, z, 0.0, 10)
    with pytest.raises(mc.InvalidInputError):
        td.integrate_leapfrog(h, z, 1e-2, 10, stride=0)
    with pytest.raises(mc.InvalidInputError):
        h.assignment(td.random_phase_point(2, 2, rng))


def test_operator_time_model_evolves_with_conserved_charge(rng):
    h = td.operator_time_hamiltonian(0.05)
    z0 = td.random_phase_point(2, 2, rng, 0.3)
    traj = td.integrate_leapfrog(h, z0, 1e-3, 200, stride=50)
    rep = td.conservation_report(traj)
    assert rep.max_charge_drift < 1e-10
    assert rep.max_energy_drift < 1e-5


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=10, deadline=None)
def test_divergence_free(seed):
    h = td.quartic_hamiltonian(2)
    z = td.random_phase_point(2, 2, np.random.default_rng(seed), 0.7)
    assert abs(td.phase_flow_divergence(h, z)) < 1e-6


def test_volume_jacobian_identity_for_zero_steps(rng):
    h = td.harmonic_hamiltonian(1)
    assert td.volume_jacobian(h, td.random_phase_point(1, 2, rng), 0.1, 0) == 1.0


def test_volume_jacobian_caps_dimension(rng):
    with pytest.raises(mc.InvalidInputError):
        td.volume_jacobian(td.harmonic_hamiltonian(2), td.random_phase_point(2, 3, rng), 0.1, 1)


def test_trajectory_csv_header(rng):
    traj = td.integrate_leapfrog(td.harmonic_hamiltonian(1), td.random_phase_point(1, 2, rng), 0.1, 3)
    rows = list(td.trajectory_csv_rows(traj))
    assert rows[0] == ("s", "TrH", "charge_drift", "hermiticity_residual")
    assert len(rows) == 5
