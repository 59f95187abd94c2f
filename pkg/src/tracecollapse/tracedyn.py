"""Hamiltonian dynamics of Hermitian matrix degrees of freedom.

Phase points hold ``q`` and ``p`` as arrays of shape ``(..., R, N, N)``.
Hamilton's equations read ``dq_r/ds = dTrH/dp_r`` and ``dp_r/ds = -dTrH/dq_r``
with trace derivatives from :mod:`tracecollapse.matcore`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import matcore as mc
from .matcore import AdjointClass, Monomial, PolynomialModel

log = logging.getLogger(__name__)

MAX_JACOBIAN_DIM = 32


class UnsupportedModelError(ValueError):
    pass


@dataclass
class PhasePoint:
    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=complex)
        self.p = np.asarray(self.p, dtype=complex)
        if self.q.ndim == 2:
            self.q = self.q[None]
        if self.p.ndim == 2:
            self.p = self.p[None]
        if self.q.shape != self.p.shape:
            raise mc.InvalidInputError(f"q and p shapes differ: {self.q.shape} vs {self.p.shape}")
        if self.q.shape[-1] != self.q.shape[-2]:
            raise mc.InvalidInputError("q, p must be square matrices")

    @property
    def n_dof(self) -> int:
        return self.q.shape[-3]

    @property
    def dim(self) -> int:
        return self.q.shape[-1]

    def copy(self) -> "PhasePoint":
        return PhasePoint(self.q.copy(), self.p.copy())

    def hermiticity_residual(self) -> float:
        return float(max(np.max(mc.hermiticity_residual(self.q)), np.max(mc.hermiticity_residual(self.p))))

    def to_real(self) -> np.ndarray:
        """Flatten to the ``2 R N^2`` real coordinates (q block first)."""
        b = mc.hermitian_basis(self.dim)
        xq = mc.hermitian_to_real(self.q, b)
        xp = mc.hermitian_to_real(self.p, b)
        return np.concatenate([xq.reshape(xq.shape[:-2] + (-1,)), xp.reshape(xp.shape[:-2] + (-1,))], axis=-1)

    @classmethod
    def from_real(cls, x: np.ndarray, n_dof: int, dim: int) -> "PhasePoint":
        b = mc.hermitian_basis(dim)
        x = np.asarray(x, dtype=float)
        half = n_dof * dim * dim
        xq = x[..., :half].reshape(x.shape[:-1] + (n_dof, dim * dim))
        xp = x[..., half:].reshape(x.shape[:-1] + (n_dof, dim * dim))
        return cls(mc.real_to_hermitian(xq, b), mc.real_to_hermitian(xp, b))

    def to_json(self) -> dict:
        return {
            "q": [mc.to_json(m) for m in self.q],
            "p": [mc.to_json(m) for m in self.p],
        }


def random_phase_point(n_dof: int, dim: int, rng: np.random.Generator, scale: float = 1.0) -> PhasePoint:
    return PhasePoint(
        mc.random_hermitian(dim, rng, scale, size=(n_dof,)),
        mc.random_hermitian(dim, rng, scale, size=(n_dof,)),
    )


@dataclass(frozen=True)
class TraceHamiltonian:
    """A trace Hamiltonian over named coordinate / momentum slots.

    ``q_names[r]`` and ``p_names[r]`` label the r-th canonical pair. The
    ``confining`` flag is a declaration by the model builder that ``exp(-TrH)``
    is normalisable; the sampler refuses models without it.
    """

    model: PolynomialModel
    q_names: tuple
    p_names: tuple
    name: str = "custom"
    params: dict = field(default_factory=dict)
    confining: bool = False

    def __post_init__(self):
        if len(self.q_names) != len(self.p_names):
            raise mc.InvalidInputError("q_names and p_names must pair up")
        for v in tuple(self.q_names) + tuple(self.p_names):
            if v not in self.model.variables:
                raise mc.InvalidInputError(f"variable {v!r} not declared in the model")
            if self.model.variables[v] is not AdjointClass.HERMITIAN:
                raise mc.InvalidInputError(f"phase-space variable {v!r} must be Hermitian")
        if not self.model.is_self_adjoint():
            raise mc.InvalidInputError("Hamiltonian model is not self-adjoint, Tr H would not be real")

    @property
    def n_dof(self) -> int:
        return len(self.q_names)

    @property
    def separable(self) -> bool:
        """Every monomial involves only coordinates or only momenta."""
        qs, ps = set(self.q_names), set(self.p_names)
        for m in self.model.monomials:
            names = set(m.names())
            if names & qs and names & ps:
                return False
        return True

    def assignment(self, z: PhasePoint) -> dict:
        if z.n_dof != self.n_dof:
            raise mc.InvalidInputError(f"phase point has {z.n_dof} dof, Hamiltonian expects {self.n_dof}")
        at = {}
        for r, (qn, pn) in enumerate(zip(self.q_names, self.p_names)):
            at[qn] = z.q[..., r, :, :]
            at[pn] = z.p[..., r, :, :]
        return at

    def trace(self, z: PhasePoint) -> np.ndarray:
        """Real ``Tr H``; the imaginary part is checked against ``1e-10`` relative."""
        val = self.model.trace(self.assignment(z))
        scale = np.maximum(1.0, np.abs(val))
        if np.any(np.abs(val.imag) > 1e-10 * scale):
            raise mc.InvalidInputError("Tr H acquired an imaginary part")
        return np.real(val)

    def grad_q(self, z: PhasePoint) -> np.ndarray:
        at = self.assignment(z)
        return np.stack([mc.trace_derivative(self.model, n, at) for n in self.q_names], axis=-3)

    def grad_p(self, z: PhasePoint) -> np.ndarray:
        at = self.assignment(z)
        return np.stack([mc.trace_derivative(self.model, n, at) for n in self.p_names], axis=-3)


def _names(n_dof: int, prefix: str) -> tuple:
    return tuple(f"{prefix}{r}" for r in range(n_dof))


def _variables(n_dof: int) -> dict:
    return {n: AdjointClass.HERMITIAN for n in _names(n_dof, "q") + _names(n_dof, "p")}


def free_hamiltonian(n_dof: int = 1, mass: float = 1.0) -> TraceHamiltonian:
    ps = _names(n_dof, "p")
    mons = [Monomial(0.5 / mass, (p, p)) for p in ps]
    return TraceHamiltonian(PolynomialModel(_variables(n_dof), tuple(mons)), _names(n_dof, "q"), ps,
                            name="free", params={"mass": mass})


def harmonic_hamiltonian(n_dof: int = 1, mass: float = 1.0, omega: float = 1.0) -> TraceHamiltonian:
    qs, ps = _names(n_dof, "q"), _names(n_dof, "p")
    mons = [Monomial(0.5 / mass, (p, p)) for p in ps]
    mons += [Monomial(0.5 * mass * omega**2, (q, q)) for q in qs]
    return TraceHamiltonian(PolynomialModel(_variables(n_dof), tuple(mons)), qs, ps,
                            name="harmonic", params={"mass": mass, "omega": omega}, confining=True)


def quartic_hamiltonian(n_dof: int = 2, mass: float = 1.0, omega: float = 1.0,
                        g: float = 0.1, coupling: float = 0.05) -> TraceHamiltonian:
    """``sum_r Tr[p_r^2/2m + m w^2 q_r^2/2 + g q_r^4/4] - (c/4) sum_{r<s} Tr [q_r, q_s]^2``.

    ``-Tr [A,B]^2 >= 0`` for Hermitian ``A, B``, so the model is confining for
    ``g > 0, c >= 0``.
    """
    if g <= 0 or coupling < 0:
        raise mc.InvalidInputError("quartic model needs g > 0 and coupling >= 0")
    qs, ps = _names(n_dof, "q"), _names(n_dof, "p")
    mons = [Monomial(0.5 / mass, (p, p)) for p in ps]
    mons += [Monomial(0.5 * mass * omega**2, (q, q)) for q in qs]
    mons += [Monomial(0.25 * g, (q, q, q, q)) for q in qs]
    for r in range(n_dof):
        for s in range(r + 1, n_dof):
            a, b = qs[r], qs[s]
            # -Tr[a,b]^2 = -2 Tr(abab) + 2 Tr(aabb)
            mons.append(Monomial(-0.5 * coupling, (a, b, a, b)))
            mons.append(Monomial(0.5 * coupling, (a, a, b, b)))
    return TraceHamiltonian(PolynomialModel(_variables(n_dof), tuple(mons)), qs, ps, name="quartic",
                            params={"mass": mass, "omega": omega, "g": g, "coupling": coupling},
                            confining=True)


def operator_time_hamiltonian(coupling: float = 0.05) -> TraceHamiltonian:
    """One matter pair plus an operator-time pair ``(t, E)`` in the last slot.

    ``H = Tr[p^2/2 + q^2/2 - E^2/2 - t^2/2] + (c/4)(-Tr[q, t]^2)``; the minus
    signs mirror the time-like slot of the line element. Not confining, so
    it is only used for evolution.
    """
    names = {"q": AdjointClass.HERMITIAN, "t": AdjointClass.HERMITIAN,
             "p": AdjointClass.HERMITIAN, "E": AdjointClass.HERMITIAN}
    mons = (
        Monomial(0.5, ("p", "p")),
        Monomial(0.5, ("q", "q")),
        Monomial(-0.5, ("E", "E")),
        Monomial(-0.5, ("t", "t")),
        Monomial(-0.5 * coupling, ("q", "t", "q", "t")),
        Monomial(0.5 * coupling, ("q", "q", "t", "t")),
    )
    return TraceHamiltonian(PolynomialModel(names, mons), ("q", "t"), ("p", "E"), name="operator_time",
                            params={"coupling": coupling})


def build_hamiltonian(name: str, n_dof: int = 1, **params) -> TraceHamiltonian:
    if name == "free":
        return free_hamiltonian(n_dof, **params)
    if name == "harmonic":
        return harmonic_hamiltonian(n_dof, **params)
    if name == "quartic":
        return quartic_hamiltonian(n_dof, **params)
    if name == "operator_time":
        return operator_time_hamiltonian(**params)
    raise mc.InvalidInputError(f"unknown model {name!r}")


def equations_of_motion(h: TraceHamiltonian, z: PhasePoint) -> PhasePoint:
    """Tangent vector ``(dq/ds, dp/ds)`` at ``z``."""
    return PhasePoint(h.grad_p(z), -h.grad_q(z))


def adler_millard_charge(z: PhasePoint) -> np.ndarray:
    """Bosonic charge ``sum_r [q_r, p_r]``."""
    return np.sum(mc.commutator(z.q, z.p), axis=-3)


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: list
    trace_h: np.ndarray
    charges: np.ndarray
    hermiticity: np.ndarray
    symplectic: bool = True

    def __len__(self) -> int:
        return len(self.times)

    @property
    def final(self) -> PhasePoint:
        return self.states[-1]


def _record(h: TraceHamiltonian, z: PhasePoint, s: float, acc: dict) -> None:
    acc["times"].append(s)
    acc["states"].append(z.copy())
    acc["trace_h"].append(float(h.trace(z)))
    acc["charges"].append(adler_millard_charge(z))
    acc["herm"].append(z.hermiticity_residual())


def _finish(acc: dict, symplectic: bool) -> TrajectoryRecord:
    return TrajectoryRecord(
        times=np.array(acc["times"]),
        states=acc["states"],
        trace_h=np.array(acc["trace_h"]),
        charges=np.array(acc["charges"]),
        hermiticity=np.array(acc["herm"]),
        symplectic=symplectic,
    )


def _kinetic_grad(h: TraceHamiltonian, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return h.grad_p(PhasePoint(q, p))


def _potential_grad(h: TraceHamiltonian, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return h.grad_q(PhasePoint(q, p))


def _check_herm(z: PhasePoint, step: int, tol: float = 1e-10) -> None:
    r = z.hermiticity_residual()
    if r > tol:
        raise FloatingPointError(f"Hermiticity lost at step {step}: residual {r:.3e}")


def leapfrog_map(h: TraceHamiltonian, z: PhasePoint, dt: float, steps: int) -> PhasePoint:
    """Kick-drift-kick flow map without bookkeeping; ``dt`` may be negative."""
    q, p = z.q.copy(), z.p.copy()
    if steps == 0:
        return PhasePoint(q, p)
    p = p - 0.5 * dt * _potential_grad(h, q, p)
    for k in range(steps):
        q = q + dt * _kinetic_grad(h, q, p)
        f = _potential_grad(h, q, p)
        p = p - (dt if k < steps - 1 else 0.5 * dt) * f
    return PhasePoint(q, p)


def rk4_step(h: TraceHamiltonian, z: PhasePoint, dt: float) -> PhasePoint:
    def f(q, p):
        t = equations_of_motion(h, PhasePoint(q, p))
        return t.q, t.p

    q, p = z.q, z.p
    k1q, k1p = f(q, p)
    k2q, k2p = f(q + 0.5 * dt * k1q, p + 0.5 * dt * k1p)
    k3q, k3p = f(q + 0.5 * dt * k2q, p + 0.5 * dt * k2p)
    k4q, k4p = f(q + dt * k3q, p + dt * k3p)
    return PhasePoint(q + dt / 6 * (k1q + 2 * k2q + 2 * k3q + k4q),
                      p + dt / 6 * (k1p + 2 * k2p + 2 * k3p + k4p))


def integrate_rk4(h: TraceHamiltonian, z0: PhasePoint, dt: float, steps: int, stride: int = 1) -> TrajectoryRecord:
    """Classical RK4; not symplectic, the record is flagged accordingly."""
    if dt <= 0:
        raise mc.InvalidInputError("dt must be positive")
    acc = {"times": [], "states": [], "trace_h": [], "charges": [], "herm": []}
    z = z0.copy()
    _record(h, z, 0.0, acc)
    for k in range(1, steps + 1):
        z = rk4_step(h, z, dt)
        if k % stride == 0 or k == steps:
            _check_herm(z, k)
            _record(h, z, k * dt, acc)
    return _finish(acc, symplectic=False)


def integrate_leapfrog(h: TraceHamiltonian, z0: PhasePoint, dt: float, steps: int, stride: int = 1,
                       allow_fallback: bool = True) -> TrajectoryRecord:
    """Kick-drift-kick leapfrog, recording diagnostics every ``stride`` steps.

    Non-separable Hamiltonians raise :class:`UnsupportedModelError` unless
    ``allow_fallback`` is set, in which case RK4 runs and the record carries
    ``symplectic=False``.
    """
    if dt <= 0:
        raise mc.InvalidInputError("dt must be positive")
    if steps < 0 or stride < 1:
        raise mc.InvalidInputError("steps must be >= 0 and stride >= 1")
    if not h.separable:
        if not allow_fallback:
            raise UnsupportedModelError(f"model {h.name!r} is not separable")
        log.warning("model %s is not separable; falling back to non-symplectic RK4", h.name)
        return integrate_rk4(h, z0, dt, steps, stride)
    acc = {"times": [], "states": [], "trace_h": [], "charges": [], "herm": []}
    q, p = z0.q.copy(), z0.p.copy()
    _record(h, PhasePoint(q, p), 0.0, acc)
    f = _potential_grad(h, q, p)
    for k in range(1, steps + 1):
        p = p - 0.5 * dt * f
        q = q + dt * _kinetic_grad(h, q, p)
        f = _potential_grad(h, q, p)
        p = p - 0.5 * dt * f
        if k % stride == 0 or k == steps:
            z = PhasePoint(q, p)
            _check_herm(z, k)
            _record(h, z, k * dt, acc)
    return _finish(acc, symplectic=True)


@dataclass
class ConservationReport:
    times: np.ndarray
    energy_drift: np.ndarray
    charge_drift: np.ndarray
    hermiticity: np.ndarray
    max_energy_drift: float
    max_charge_drift: float

    def rows(self):
        for s, e, c, hr in zip(self.times, self.energy_drift, self.charge_drift, self.hermiticity):
            yield float(s), float(e), float(c), float(hr)


def conservation_report(traj: TrajectoryRecord) -> ConservationReport:
    """Relative drifts of ``Tr H`` and of the charge (Frobenius) against the first snapshot.

    A vanishing initial value falls back to absolute drift.
    """
    if len(traj) < 2:
        raise mc.InvalidInputError("conservation report needs at least two snapshots")
    e0 = traj.trace_h[0]
    de = np.abs(traj.trace_h - e0)
    if abs(e0) > 0:
        de = de / abs(e0)
    c0 = traj.charges[0]
    dc = mc.fro(traj.charges - c0)
    n0 = float(mc.fro(c0))
    if n0 > 0:
        dc = dc / n0
    return ConservationReport(traj.times, de, dc, traj.hermiticity, float(de.max()), float(dc.max()))


def hamiltonian_field_real(h: TraceHamiltonian, n_dof: int, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    """Hamiltonian vector field in the orthonormal real coordinates of Hermitian (q, p)."""
    b = mc.hermitian_basis(dim)

    def field_(x: np.ndarray) -> np.ndarray:
        z = PhasePoint.from_real(x, n_dof, dim)
        t = equations_of_motion(h, z)
        xq = mc.hermitian_to_real(t.q, b)
        xp = mc.hermitian_to_real(t.p, b)
        return np.concatenate([xq.reshape(xq.shape[:-2] + (-1,)), xp.reshape(xp.shape[:-2] + (-1,))], axis=-1)

    return field_


def phase_flow_divergence(h: TraceHamiltonian, z: PhasePoint, h_step: float = 1e-4) -> float:
    """Central-difference divergence of the Hamiltonian field over all ``2 R N^2`` real coordinates."""
    if not (0.0 < h_step < 1.0):
        raise mc.InvalidInputError("h must lie in (0, 1)")
    x0 = z.to_real()
    n = x0.size
    f = hamiltonian_field_real(h, z.n_dof, z.dim)
    # all 2n displaced points evaluated as one batch
    eye = np.eye(n)
    xs = np.concatenate([x0 + h_step * eye, x0 - h_step * eye])
    vals = f(xs)
    fp, fm = vals[:n], vals[n:]
    return float(np.sum((np.diag(fp) - np.diag(fm)) / (2.0 * h_step)))


def volume_jacobian(h: TraceHamiltonian, z: PhasePoint, dt: float, steps: int, h_step: float = 1e-5) -> float:
    """Determinant of the finite-difference Jacobian of the leapfrog flow map."""
    x0 = z.to_real()
    n = x0.size
    if n > MAX_JACOBIAN_DIM:
        raise mc.InvalidInputError(f"phase space dimension {n} exceeds cap {MAX_JACOBIAN_DIM}")
    if steps == 0:
        return 1.0
    eye = np.eye(n)
    xs = np.concatenate([x0 + h_step * eye, x0 - h_step * eye])
    zs = PhasePoint.from_real(xs, z.n_dof, z.dim)
    if h.separable:
        out = leapfrog_map(h, zs, dt, steps)
    else:
        out = zs
        for _ in range(steps):
            out = rk4_step(h, out, dt)
    y = out.to_real()
    jac = (y[:n] - y[n:]).T / (2.0 * h_step)
    return float(np.linalg.det(jac))


def trajectory_csv_rows(traj: TrajectoryRecord):
    rep = conservation_report(traj)
    yield ("s", "TrH", "charge_drift", "hermiticity_residual")
    for s, th, c, hr in zip(traj.times, traj.trace_h, rep.charge_drift, traj.hermiticity):
        yield (repr(float(s)), repr(float(th)), repr(float(c)), repr(float(hr)))
