"""Dense complex matrix algebra and trace calculus.

Matrices are plain ``numpy`` complex arrays. Every operation here accepts a
leading batch shape ``(..., N, N)`` so the same code serves single states and
vectorised ensembles; validators only run on explicit request.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

MAX_DIM = 64


class InvalidInputError(ValueError):
    """Raised for malformed matrices, dimension mismatches or unknown names."""


class AdjointClass(str, enum.Enum):
    HERMITIAN = "hermitian"
    ANTI_HERMITIAN = "anti-hermitian"
    GENERAL = "general"


def as_matrix(m, dim: int | None = None) -> np.ndarray:
    """Validate and return ``m`` as a square complex matrix."""
    a = np.asarray(m, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[0] > MAX_DIM:
        raise InvalidInputError(f"matrix dim {a.shape[0]} outside [1, {MAX_DIM}]")
    if dim is not None and a.shape[0] != dim:
        raise InvalidInputError(f"expected dim {dim}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix has non-finite entries")
    return a


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def fro(m: np.ndarray) -> np.ndarray:
    return np.linalg.norm(m, axis=(-2, -1))


def hermiticity_residual(m: np.ndarray) -> np.ndarray:
    """``||M - M^dag||_F / ||M||_F`` (0 for the zero matrix)."""
    num = fro(m - dagger(m))
    den = fro(m)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), num)


def anti_hermiticity_residual(m: np.ndarray) -> np.ndarray:
    num = fro(m + dagger(m))
    den = fro(m)
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), num)


def check_adjoint_class(m: np.ndarray, tag: AdjointClass | str, tol: float = 1e-12) -> bool:
    tag = AdjointClass(tag)
    if tag is AdjointClass.HERMITIAN:
        return bool(np.all(hermiticity_residual(m) <= tol))
    if tag is AdjointClass.ANTI_HERMITIAN:
        return bool(np.all(anti_hermiticity_residual(m) <= tol))
    return True


def hermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + dagger(m))


def anti_hermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m - dagger(m))


def trace_complex(m: np.ndarray) -> np.ndarray:
    return np.trace(m, axis1=-2, axis2=-1)


def trace_real(m, validate: bool = True):
    """Real part of the trace.

    The imaginary part is available through :func:`trace_imag` for validators.
    """
    if validate:
        m = np.asarray(m, dtype=complex)
        if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
            raise InvalidInputError(f"expected square matrices, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("matrix has non-finite entries")
    return np.real(trace_complex(m))


def trace_imag(m) -> np.ndarray:
    return np.imag(trace_complex(np.asarray(m, dtype=complex)))


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-2:] != b.shape[-2:]:
        raise InvalidInputError(f"dimension mismatch: {a.shape[-2:]} vs {b.shape[-2:]}")


def commutator(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    _check_pair(a, b)
    return a @ b - b @ a


def anticommutator(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    _check_pair(a, b)
    return a @ b + b @ a


# Pauli matrices, handy in tests and model builders.
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def random_hermitian(n: int, rng: np.random.Generator, scale: float = 1.0, size: tuple = ()) -> np.ndarray:
    """GUE-style draw: entries of ``(G + G^dag)/2`` with ``G`` complex Gaussian.

    Off-diagonal real and imaginary parts have variance ``scale**2/4``,
    diagonal entries variance ``scale**2/2``.
    """
    g = rng.standard_normal(size + (n, n)) + 1j * rng.standard_normal(size + (n, n))
    return scale * 0.5 * (g + dagger(g)) / np.sqrt(2.0)


def random_unitary(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar unitary via QR with phase correction."""
    z = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / np.sqrt(2.0)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def hermitian_basis(n: int) -> np.ndarray:
    """Orthonormal basis of N x N Hermitian matrices under ``Tr(A B)``.

    Order: diagonal units, then for each i<j the symmetric and the
    antisymmetric (imaginary) combination. Shape ``(n*n, n, n)``.
    """
    basis = []
    for i in range(n):
        e = np.zeros((n, n), dtype=complex)
        e[i, i] = 1.0
        basis.append(e)
    s = 1.0 / np.sqrt(2.0)
    for i in range(n):
        for j in range(i + 1, n):
            e = np.zeros((n, n), dtype=complex)
            e[i, j] = e[j, i] = s
            basis.append(e)
            f = np.zeros((n, n), dtype=complex)
            f[i, j] = 1j * s
            f[j, i] = -1j * s
            basis.append(f)
    return np.array(basis)


def hermitian_to_real(m: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Real coordinates ``x_a = Tr(T_a M)`` of Hermitian matrices, shape ``(..., N*N)``."""
    n = m.shape[-1]
    if basis is None:
        basis = hermitian_basis(n)
    # Tr(T_a M) = sum_ij T_a[i,j] M[j,i]
    return np.real(np.einsum("aij,...ji->...a", basis, m))


def real_to_hermitian(x: np.ndarray, basis: np.ndarray) -> np.ndarray:
    return np.einsum("...a,aij->...ij", np.asarray(x, dtype=float), basis)


def to_json(m) -> dict:
    a = as_matrix(m)
    return {"dim": int(a.shape[0]), "re": a.real.tolist(), "im": a.imag.tolist()}


def from_json(d: Mapping) -> np.ndarray:
    try:
        dim = int(d["dim"])
        re = np.asarray(d["re"], dtype=float)
        im = np.asarray(d["im"], dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"bad matrix JSON: {exc}") from exc
    if re.shape != (dim, dim) or im.shape != (dim, dim):
        raise InvalidInputError(f"matrix JSON shape mismatch for dim {dim}")
    return as_matrix(re + 1j * im)


Factor = Union[str, np.ndarray]


@dataclass(frozen=True)
class Monomial:
    coeff: complex
    factors: tuple  # names (str) or constant matrices

    def names(self) -> list[str]:
        return [f for f in self.factors if isinstance(f, str)]


def _product(mats: Sequence[np.ndarray], like: np.ndarray) -> np.ndarray:
    if not mats:
        n = like.shape[-1]
        return np.broadcast_to(np.eye(n, dtype=complex), like.shape).copy()
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return np.asarray(out, dtype=complex)


@dataclass(frozen=True)
class PolynomialModel:
    """Trace of a sum of coefficient-weighted ordered matrix monomials.

    ``variables`` maps names to their :class:`AdjointClass`. A factor in a
    monomial is either a variable name or a constant matrix.
    """

    variables: dict
    monomials: tuple = field(default_factory=tuple)

    def __post_init__(self):
        vs = {k: AdjointClass(v) for k, v in dict(self.variables).items()}
        object.__setattr__(self, "variables", vs)
        mons = []
        for m in self.monomials:
            if not isinstance(m, Monomial):
                coeff, factors = m
                m = Monomial(complex(coeff), tuple(factors))
            for f in m.factors:
                if isinstance(f, str) and f not in vs:
                    raise InvalidInputError(f"monomial references undeclared variable {f!r}")
            mons.append(m)
        object.__setattr__(self, "monomials", tuple(mons))

    def __add__(self, other: "PolynomialModel") -> "PolynomialModel":
        return PolynomialModel({**self.variables, **other.variables}, self.monomials + other.monomials)

    def scaled(self, c: complex) -> "PolynomialModel":
        return PolynomialModel(self.variables, tuple(Monomial(c * m.coeff, m.factors) for m in self.monomials))

    def _resolve(self, factor: Factor, at: Mapping[str, np.ndarray]) -> np.ndarray:
        if isinstance(factor, str):
            return at[factor]
        return np.asarray(factor, dtype=complex)

    def _check_assignment(self, at: Mapping[str, np.ndarray]) -> np.ndarray:
        missing = [v for v in self.variables if v not in at]
        if missing:
            raise InvalidInputError(f"assignment missing variables {missing}")
        if not self.variables:
            raise InvalidInputError("model has no variables")
        return np.asarray(at[next(iter(self.variables))])

    def evaluate(self, at: Mapping[str, np.ndarray]) -> np.ndarray:
        """The matrix ``W(z)`` (before tracing)."""
        like = self._check_assignment(at)
        out = np.zeros(like.shape, dtype=complex)
        for m in self.monomials:
            out = out + m.coeff * _product([self._resolve(f, at) for f in m.factors], like)
        return out

    def trace(self, at: Mapping[str, np.ndarray]) -> np.ndarray:
        """Complex ``Tr W(z)``; batched over any leading shape."""
        like = self._check_assignment(at)
        out = np.zeros(like.shape[:-2], dtype=complex)
        for m in self.monomials:
            out = out + m.coeff * trace_complex(_product([self._resolve(f, at) for f in m.factors], like))
        return out

    def is_self_adjoint(self, tol: float = 1e-12) -> bool:
        """True if coefficients are real and every monomial's adjoint is in the model.

        Adjoint of ``c * A B C`` is ``conj(c) * C^dag B^dag A^dag``; equality is
        judged up to cyclic rotation since only the trace matters.
        """
        def key(factors):
            out = []
            for f in factors:
                if isinstance(f, str):
                    out.append(("v", f))
                else:
                    out.append(("c", np.round(np.asarray(f, dtype=complex), 12).tobytes()))
            return tuple(out)

        def canon(factors):
            k = key(factors)
            if not k:
                return k
            return min(k[i:] + k[:i] for i in range(len(k)))

        def adj_factors(m: Monomial):
            out = []
            for f in reversed(m.factors):
                if isinstance(f, str):
                    tag = self.variables[f]
                    if tag is AdjointClass.GENERAL:
                        return None
                    out.append((f, -1.0 if tag is AdjointClass.ANTI_HERMITIAN else 1.0))
                else:
                    out.append((dagger(np.asarray(f, dtype=complex)), 1.0))
            return out

        table: dict = {}
        for m in self.monomials:
            if abs(m.coeff.imag) > tol:
                return False
            c = canon(m.factors)
            table[c] = table.get(c, 0.0) + m.coeff.real
        for m in self.monomials:
            adj = adj_factors(m)
            if adj is None:
                return False
            sign = float(np.prod([s for _, s in adj])) if adj else 1.0
            c = canon([f for f, _ in adj])
            if abs(table.get(c, 0.0) - sign * table[canon(m.factors)]) > tol * max(1.0, abs(m.coeff)):
                return False
        return True


def trace_derivative(w: PolynomialModel, var: str, at: Mapping[str, np.ndarray]) -> np.ndarray:
    """Matrix gradient ``G`` with ``delta Tr W = Tr(G delta z)``.

    For each occurrence of ``var`` the remaining factors are rotated so those
    following the occurrence come first: ``d Tr(A z B z C)/dz = B z C A + C A z B``.
    """
    if var not in w.variables:
        raise InvalidInputError(f"unknown variable {var!r}")
    like = w._check_assignment(at)
    out = np.zeros(like.shape, dtype=complex)
    for m in w.monomials:
        facs = m.factors
        for k, f in enumerate(facs):
            if not (isinstance(f, str) and f == var):
                continue
            rest = facs[k + 1:] + facs[:k]
            out = out + m.coeff * _product([w._resolve(g, at) for g in rest], like)
    return out


def fd_trace_derivative(w: PolynomialModel, var: str, at: Mapping[str, np.ndarray], h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``Tr W`` in the real and imaginary part of each entry.

    Assembled with the same convention as :func:`trace_derivative`: the
    holomorphic derivative ``(d/dRe z_ij - i d/dIm z_ij)/2`` lands at ``G[j, i]``.
    """
    if not (0.0 < h < 1.0):
        raise InvalidInputError(f"h must lie in (0, 1), got {h}")
    if var not in w.variables:
        raise InvalidInputError(f"unknown variable {var!r}")
    z = np.asarray(at[var], dtype=complex)
    if z.ndim != 2:
        raise InvalidInputError("fd_trace_derivative works on single (unbatched) assignments")
    n = z.shape[0]
    g = np.zeros((n, n), dtype=complex)
    pt = dict(at)
    for i in range(n):
        for j in range(n):
            derivs = []
            for step in (h, 1j * h):
                zp = z.copy()
                zp[i, j] += step
                zm = z.copy()
                zm[i, j] -= step
                pt[var] = zp
                fp = w.trace(pt)
                pt[var] = zm
                fm = w.trace(pt)
                derivs.append((fp - fm) / (2.0 * h))
            g[j, i] = 0.5 * (derivs[0] - 1j * derivs[1])
    return g


def trace_line_element(dt, dx, dy, dz, validate: bool = True) -> float:
    """``Tr[dt^2 - dx^2 - dy^2 - dz^2]`` as a real number."""
    mats = [np.asarray(m, dtype=complex) for m in (dt, dx, dy, dz)]
    for m in mats[1:]:
        _check_pair(mats[0], m)
    s = mats[0] @ mats[0] - mats[1] @ mats[1] - mats[2] @ mats[2] - mats[3] @ mats[3]
    val = trace_complex(s)
    if validate and all(check_adjoint_class(m, AdjointClass.HERMITIAN, 1e-12) for m in mats):
        scale = max(1.0, float(sum(fro(m) ** 2 for m in mats)))
        if abs(val.imag) > 1e-12 * scale:
            raise InvalidInputError(f"line element has imaginary part {val.imag:g} for Hermitian inputs")
    return float(np.real(val))


def boost(coords: Sequence[np.ndarray], beta: float, axis: int = 1) -> list[np.ndarray]:
    """Scalar Lorentz boost of velocity ``beta`` mixing the time slot with ``axis``."""
    if not (abs(beta) < 1.0):
        raise InvalidInputError(f"|beta| must be < 1, got {beta}")
    if axis not in (1, 2, 3):
        raise InvalidInputError(f"axis must be 1, 2 or 3, got {axis}")
    out = [np.asarray(c, dtype=complex) for c in coords]
    g = 1.0 / np.sqrt(1.0 - beta * beta)
    t, x = out[0], out[axis]
    out[0] = g * (t - beta * x)
    out[axis] = g * (x - beta * t)
    return out


def rotate(coords: Sequence[np.ndarray], angle: float, i: int = 1, j: int = 2) -> list[np.ndarray]:
    """Scalar rotation mixing two spatial slots."""
    if i == j or 0 in (i, j):
        raise InvalidInputError("rotate mixes two distinct spatial slots")
    out = [np.asarray(c, dtype=complex) for c in coords]
    c, s = np.cos(angle), np.sin(angle)
    a, b = out[i], out[j]
    out[i] = c * a - s * b
    out[j] = s * a + c * b
    return out
