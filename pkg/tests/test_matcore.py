from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracecollapse import matcore as mc


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def test_as_matrix_rejects_bad_shapes():
    with pytest.raises(mc.InvalidInputError):
        mc.as_matrix(np.zeros((2, 3)))
    with pytest.raises(mc.InvalidInputError):
        mc.as_matrix(np.zeros((mc.MAX_DIM + 1, mc.MAX_DIM + 1)))


def test_pauli_commutator():
    assert np.allclose(mc.commutator(mc.SIGMA_X, mc.SIGMA_Y), 2j * mc.SIGMA_Z)
    assert np.allclose(mc.anticommutator(mc.SIGMA_X, mc.SIGMA_X), 2 * np.eye(2))


def test_commutator_dim_mismatch():
    with pytest.raises(mc.InvalidInputError):
        mc.commutator(np.eye(2), np.eye(3))


def test_commutator_of_hermitians_is_antihermitian(rng):
    a, b = mc.random_hermitian(4, rng), mc.random_hermitian(4, rng)
    c = mc.commutator(a, b)
    assert mc.check_adjoint_class(c, mc.AdjointClass.ANTI_HERMITIAN, 1e-12)
    assert abs(mc.trace_complex(c)) < 1e-12


def test_trace_real_and_imag_split():
    m = np.diag([1.0 + 2j, 2.0 - 0.5j])
    assert mc.trace_real(m) == pytest.approx(3.0)
    assert mc.trace_imag(m) == pytest.approx(1.5)
    with pytest.raises(mc.InvalidInputError):
        mc.trace_real(np.zeros((2, 3)))
    with pytest.raises(mc.InvalidInputError):
        mc.trace_real(np.full((2, 2), np.nan))


def test_check_adjoint_class():
    assert mc.check_adjoint_class(mc.SIGMA_Y, "hermitian")
    assert not mc.check_adjoint_class(mc.SIGMA_Y, "anti-hermitian")
    assert mc.check_adjoint_class(1j * mc.SIGMA_Y, mc.AdjointClass.ANTI_HERMITIAN)
    assert mc.check_adjoint_class(np.ones((2, 2)) + 1j, "general")


def test_random_unitary_is_unitary(rng):
    u = mc.random_unitary(5, rng)
    assert np.allclose(u @ mc.dagger(u), np.eye(5), atol=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_hermitian_basis_orthonormal(n):
    b = mc.hermitian_basis(n)
    assert b.shape == (n * n, n, n)
    gram = np.einsum("aij,bji->ab", b, b)
    assert np.allclose(gram, np.eye(n * n), atol=1e-14)
    assert all(mc.check_adjoint_class(t, "hermitian") for t in b)


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_real_coordinates_round_trip(n, seed):
    m = mc.random_hermitian(n, np.random.default_rng(seed))
    b = mc.hermitian_basis(n)
    x = mc.hermitian_to_real(m, b)
    assert np.allclose(mc.real_to_hermitian(x, b), m, atol=1e-13)
    # orthonormal coordinates preserve the Frobenius norm
    assert np.linalg.norm(x) == pytest.approx(float(mc.fro(m)), rel=1e-12)


def test_json_round_trip(rng):
    m = mc.random_hermitian(3, rng) + 1j * mc.random_hermitian(3, rng)
    back = mc.from_json(json.loads(json.dumps(mc.to_json(m))))
    assert np.array_equal(back, m)
    with pytest.raises(mc.InvalidInputError):
        mc.from_json({"dim": 3, "re": [[0.0]], "im": [[0.0]]})


def test_polynomial_rejects_undeclared_variable():
    with pytest.raises(mc.InvalidInputError):
        mc.PolynomialModel({"x": "hermitian"}, [(1.0, ("x", "y"))])


def test_self_adjointness():
    herm = {"x": "hermitian", "y": "hermitian"}
    assert mc.PolynomialModel(herm, [(1.0, ("x", "y", "x"))]).is_self_adjoint()
    # Tr(xy) is self-adjoint up to cyclic rotation
    assert mc.PolynomialModel(herm, [(1.0, ("x", "y"))]).is_self_adjoint()
    assert not mc.PolynomialModel(herm, [(1j, ("x", "y"))]).is_self_adjoint()
    assert not mc.PolynomialModel(herm, [(1.0, ("x", "x", "y", "y", "x", "y"))]).is_self_adjoint()
    assert mc.PolynomialModel(herm, [(1.0, ("x", "x", "y", "y", "x", "y")),
                                     (1.0, ("y", "x", "y", "y", "x", "x"))]).is_self_adjoint()


def test_trace_derivative_cyclic_convention(rng):
    a, b, c, z = (mc.random_hermitian(3, rng) + 0.3j * mc.random_hermitian(3, rng) for _ in range(4))
    w = mc.PolynomialModel({"z": "general"}, [(1.0, (a, "z", b, "z", c))])
    expected = b @ z @ c @ a + c @ a @ z @ b
    assert np.allclose(mc.trace_derivative(w, "z", {"z": z}), expected, atol=1e-12)


def test_trace_derivative_first_order_variation(rng):
    x = mc.random_hermitian(3, rng)
    w = mc.PolynomialModel({"x": "hermitian"}, [(0.25, ("x",) * 4), (-1.0, ("x", "x"))])
    g = mc.trace_derivative(w, "x", {"x": x})
    d = 1e-6 * mc.random_hermitian(3, rng)
    lhs = w.trace({"x": x + d}) - w.trace({"x": x})
    assert lhs.real == pytest.approx(np.real(mc.trace_complex(g @ d)), rel=1e-4)


def test_trace_derivative_batched_matches_single(rng):
    xs = mc.random_hermitian(2, rng, size=(4,))
    w = mc.PolynomialModel({"x": "hermitian"}, [(1.0, ("x", "x", "x"))])
    batched = mc.trace_derivative(w, "x", {"x": xs})
    for k in range(4):
        assert np.allclose(batched[k], mc.trace_derivative(w, "x", {"x": xs[k]}))


def test_fd_trace_derivative_validates_step():
    w = mc.PolynomialModel({"x": "hermitian"}, [(1.0, ("x", "x"))])
    for h in (0.0, 1.0, -1e-3):
        with pytest.raises(mc.InvalidInputError):
            mc.fd_trace_derivative(w, "x", {"x": np.eye(2)}, h=h)
    with pytest.raises(mc.InvalidInputError):
        mc.trace_derivative(w, "y", {"x": np.eye(2)})


def test_line_element_pure_time():
    n = 3
    assert mc.trace_line_element(np.eye(n), np.zeros((n, n)), np.zeros((n, n)), np.zeros((n, n))) == pytest.approx(3.0)


def test_line_element_only_polices_hermitian_inputs():
    # (1+i) * identity is not Hermitian, so only Hermitian inputs are policed
    m = (1 + 1j) * np.eye(2)
    z = np.zeros((2, 2))
    assert mc.trace_line_element(m, z, z, z) == pytest.approx(0.0)


def test_boost_and_rotate_validate():
    coords = [np.eye(2)] * 4
    with pytest.raises(mc.InvalidInputError):
        mc.boost(coords, 1.0)
    with pytest.raises(mc.InvalidInputError):
        mc.boost(coords, 0.1, axis=0)
    with pytest.raises(mc.InvalidInputError):
        mc.rotate(coords, 0.1, 1, 1)


@given(st.integers(0, 2**32 - 1), st.floats(-0.95, 0.95), st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_line_element_boost_invariant(seed, beta, axis):
    r = np.random.default_rng(seed)
    coords = [mc.random_hermitian(3, r) for _ in range(4)]
    s0 = mc.trace_line_element(*coords)
    s1 = mc.trace_line_element(*mc.boost(coords, beta, axis))
    assert abs(s1 - s0) <= 1e-10 * max(1.0, abs(s0)) * (1.0 / (1 - beta * beta))
