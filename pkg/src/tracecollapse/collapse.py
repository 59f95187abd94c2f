r"""Stochastic nonlinear Schroedinger dynamics with a single collapse channel.

The state obeys the Ito equation

    d psi = [ -(i/hbar) H dt + sqrt(lam) (q - <q>) dW - (lam/2) (q - <q>)^2 dt ] psi

with ``lam = (m / m0) * lam0``. It is integrated by Euler-Maruyama with
``<q>`` taken at the start of each step, followed by renormalisation.

Master equation for the ensemble mean
-------------------------------------
Write ``A = q - <q>`` and ``rho = |psi><psi|``. Ito's product rule gives

    d rho = d psi psi^dag + psi d psi^dag + d psi d psi^dag

with ``dW^2 = dt``. The drift collects to

    -(i/hbar) [H, rho] + lam (A rho A - (1/2) {A^2, rho})

and the remaining term ``sqrt(lam) {A, rho} dW`` has zero mean. Expanding
``A = q - a`` with the scalar ``a = <q>``,

    A rho A - (1/2){A^2, rho} = q rho q - (1/2){q^2, rho},

because every term containing ``a`` cancels. The drift is therefore linear in
``rho`` and independent of the state-dependent ``<q>``, so averaging over the
noise yields, for ``rho_bar = E[rho]``,

    d rho_bar / dt = -(i/hbar) [H, rho_bar] - (lam/2) [q, [q, rho_bar]].

For ``H = 0`` and ``q = diag(q1, q2)`` the coherence decays as
``rho_12(t) = rho_12(0) exp(-(lam/2)(q1 - q2)^2 t)``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as sps

from . import matcore as mc
from .noise import NoiseStream

log = logging.getLogger(__name__)

MAX_STEPS = 10**8
TRAJ_BLOCK = 1024
_NOISE_BLOCK = 512
COLLAPSE_THRESHOLD = 0.999
TAIL_GUARD = 1e-6


class StepSizeError(FloatingPointError):
    """A step produced a (near) zero norm or a non-PSD density matrix."""


class TruncationError(FloatingPointError):
    pass


class InconclusiveRunError(RuntimeError):
    pass


@dataclass(frozen=True)
class HilbertModel:
    q_op: np.ndarray
    h_op: np.ndarray
    label: str = "custom"
    truncation: int | None = None
    p_op: np.ndarray | None = None

    def __post_init__(self):
        q = mc.as_matrix(self.q_op)
        h = mc.as_matrix(self.h_op, q.shape[0])
        if q.shape[0] < 2:
            raise mc.InvalidInputError("Hilbert model needs dim >= 2")
        for name, m in (("q_op", q), ("h_op", h)):
            if not mc.check_adjoint_class(m, mc.AdjointClass.HERMITIAN, 1e-12):
                raise mc.InvalidInputError(f"{name} must be Hermitian")
        object.__setattr__(self, "q_op", q)
        object.__setattr__(self, "h_op", h)

    @property
    def dim(self) -> int:
        return self.q_op.shape[0]

    @property
    def q_diagonal(self) -> np.ndarray | None:
        q = self.q_op
        if np.all(q == np.diag(np.diag(q))):
            return np.real(np.diag(q))
        return None

    def eigenspaces(self, tol: float = 1e-9) -> tuple[np.ndarray, list[np.ndarray]]:
        """Distinct eigenvalues of ``q`` and the matching orthonormal eigenvector blocks."""
        w, v = np.linalg.eigh(self.q_op)
        values, blocks = [], []
        start = 0
        for k in range(1, len(w) + 1):
            if k == len(w) or w[k] - w[start] > tol:
                values.append(float(np.mean(w[start:k])))
                blocks.append(v[:, start:k])
                start = k
        return np.array(values), blocks


def two_level(q1: float = 1.0, q2: float = -1.0, delta: float = 0.0) -> HilbertModel:
    """Pointer ``q = diag(q1, q2)`` with tunnelling ``H = delta * sigma_x``."""
    return HilbertModel(np.diag([q1, q2]).astype(complex), delta * mc.SIGMA_X, label="two-level")


def lattice_position(n_sites: int = 3, spacing: float = 1.0, hopping: float = 0.0) -> HilbertModel:
    """Sites at ``spacing * (k - (n-1)/2)``; nearest-neighbour hopping ``-J``."""
    x = spacing * (np.arange(n_sites) - 0.5 * (n_sites - 1))
    h = np.zeros((n_sites, n_sites), dtype=complex)
    for k in range(n_sites - 1):
        h[k, k + 1] = h[k + 1, k] = -hopping
    return HilbertModel(np.diag(x).astype(complex), h, label="lattice-position")


def truncated_oscillator(n: int = 32, mass: float = 1.0, omega: float = 1.0, hbar: float = 1.0) -> HilbertModel:
    a = np.diag(np.sqrt(np.arange(1, n)), 1).astype(complex)
    ad = a.conj().T
    x0 = math.sqrt(hbar / (2 * mass * omega))
    p0 = math.sqrt(hbar * mass * omega / 2)
    q = x0 * (a + ad)
    p = 1j * p0 * (ad - a)
    h = hbar * omega * (ad @ a + 0.5 * np.eye(n))
    comm = q @ p - p @ q
    k = n - 2
    if np.max(np.abs(comm[:k, :k] - 1j * hbar * np.eye(k))) > 1e-8:
        raise mc.InvalidInputError("truncated oscillator fails [q, p] = i hbar on the lower levels")
    return HilbertModel(q, h, label="truncated-oscillator", truncation=n, p_op=p)


def coherent_state(n: int, alpha: complex) -> np.ndarray:
    k = np.arange(n)
    logfact = np.array([math.lgamma(j + 1) for j in k])
    amp = np.exp(-0.5 * abs(alpha) ** 2 - 0.5 * logfact) * np.power(complex(alpha), k)
    return amp / np.linalg.norm(amp)


@dataclass(frozen=True)
class CollapseParams:
    hbar: float = 1.0
    lambda0: float = 1.0
    mass: float = 1.0
    m0: float = 1.0

    def __post_init__(self):
        if self.hbar <= 0 or self.m0 <= 0:
            raise mc.InvalidInputError("hbar and m0 must be positive")
        if self.lambda0 < 0 or self.mass < 0:
            raise mc.InvalidInputError("lambda0 and mass must be non-negative")

    @property
    def lam(self) -> float:
        return self.mass / self.m0 * self.lambda0

    def with_mass(self, mass: float) -> "CollapseParams":
        return CollapseParams(self.hbar, self.lambda0, mass, self.m0)


def gamma_theory(model: HilbertModel, params: CollapseParams) -> float:
    """Slowest pointer dephasing rate ``(lam/2) min (q_i - q_j)^2``."""
    vals, _ = model.eigenspaces()
    gaps = np.diff(np.sort(vals))
    return 0.5 * params.lam * float(np.min(gaps)) ** 2


def normalize(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=complex)
    return psi / np.linalg.norm(psi, axis=-1, keepdims=True)


def expectation(psi: np.ndarray, op: np.ndarray) -> np.ndarray:
    return np.real(np.sum(np.conj(psi) * (psi @ op.T), axis=-1))


class _Kernel:
    """Precomputed operator actions for one model."""

    def __init__(self, model: HilbertModel, params: CollapseParams):
        self.qd = model.q_diagonal
        self.qT = model.q_op.T.copy()
        self.hT = model.h_op.T.copy()
        self.h_zero = not np.any(model.h_op)
        self.lam = params.lam
        self.sqlam = math.sqrt(self.lam)
        self.hbar = params.hbar

    def q(self, psi):
        return psi * self.qd if self.qd is not None else psi @ self.qT

    def drift_diff(self, psi, dt, dw):
        """Un-normalised Euler-Maruyama increment of the nonlinear equation."""
        qpsi = self.q(psi)
        mq = np.real(np.sum(np.conj(psi) * qpsi, axis=-1))[..., None]
        a = qpsi - mq * psi
        a2 = self.q(a) - mq * a
        out = psi + (self.sqlam * dw)[..., None] * a - (0.5 * self.lam * dt) * a2
        if not self.h_zero:
            out = out - (1j * dt / self.hbar) * (psi @ self.hT)
        return out

    def linear(self, psi, dt, dw):
        """Euler step of the linear equation ``[-(i/hbar)H dt + sqrt(lam) q dW - (lam/2) q^2 dt] psi``."""
        qpsi = self.q(psi)
        out = psi + (self.sqlam * dw)[..., None] * qpsi - (0.5 * self.lam * dt) * self.q(qpsi)
        if not self.h_zero:
            out = out - (1j * dt / self.hbar) * (psi @ self.hT)
        return out


def _renorm(psi: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(psi, axis=-1, keepdims=True)
    if np.any(~np.isfinite(n)) or np.any(n < 1e-8):
        raise StepSizeError("state norm collapsed to ~0 during a step; reduce dt")
    return psi / n


def qmupl_step(psi, model: HilbertModel, params: CollapseParams, dt: float, dw) -> np.ndarray:
    """One renormalised Euler-Maruyama step; ``psi`` may carry a leading batch axis."""
    psi = np.asarray(psi, dtype=complex)
    if dt <= 0:
        raise mc.InvalidInputError("dt must be positive")
    if np.any(np.abs(np.linalg.norm(psi, axis=-1) - 1.0) > 1e-10):
        raise mc.InvalidInputError("psi must be normalised")
    k = _Kernel(model, params)
    return _renorm(k.drift_diff(psi, dt, np.asarray(dw, dtype=float)))


def linear_step(psi, model: HilbertModel, params: CollapseParams, dt: float, dw) -> np.ndarray:
    return _Kernel(model, params).linear(np.asarray(psi, dtype=complex), dt, np.asarray(dw, dtype=float))


@dataclass
class TrajectoryStats:
    times: np.ndarray
    mean_q: np.ndarray
    var_q: np.ndarray
    norm_residual: np.ndarray
    populations: np.ndarray
    final_state: np.ndarray


def _grid(dt: float, T: float, stride: int) -> tuple[int, np.ndarray]:
    if dt <= 0 or T < 0:
        raise mc.InvalidInputError("need dt > 0 and T >= 0")
    steps = int(round(T / dt))
    if steps > MAX_STEPS:
        raise mc.InvalidInputError(f"T/dt = {steps} exceeds the {MAX_STEPS} step guard")
    rec = [k for k in range(0, steps + 1) if k % stride == 0 or k == steps]
    return steps, np.array(rec)


def _projector_pops(psi: np.ndarray, blocks: list[np.ndarray]) -> np.ndarray:
    return np.stack([np.sum(np.abs(psi @ np.conj(b)) ** 2, axis=-1) for b in blocks], axis=-1)


def _tail_check(model: HilbertModel, psi: np.ndarray) -> None:
    if model.label == "truncated-oscillator":
        tail = np.sum(np.abs(psi[..., -2:]) ** 2, axis=-1)
        if np.any(tail > TAIL_GUARD):
            raise TruncationError(f"population {float(np.max(tail)):.2e} in the top two levels; raise truncation")


@dataclass
class _BlockResult:
    mean_q: np.ndarray
    var_q: np.ndarray
    norm_res: np.ndarray
    pops: np.ndarray
    rho_sum: np.ndarray
    final: np.ndarray


def _evolve_block(model: HilbertModel, params: CollapseParams, psi0: np.ndarray, dt: float, steps: int,
                  rec_steps: np.ndarray, streams: list[NoiseStream]) -> _BlockResult:
    kern = _Kernel(model, params)
    _, blocks = model.eigenspaces()
    b = len(streams)
    psi = np.broadcast_to(psi0, (b, model.dim)).astype(complex)
    nrec = len(rec_steps)
    mean_q = np.empty((b, nrec))
    var_q = np.empty((b, nrec))
    norm_res = np.empty((b, nrec))
    pops = np.empty((b, nrec, len(blocks)))
    rho_sum = np.empty((nrec, model.dim, model.dim), dtype=complex)
    q2 = model.q_op @ model.q_op

    def record(j):
        mq = expectation(psi, model.q_op)
        mean_q[:, j] = mq
        var_q[:, j] = expectation(psi, q2) - mq**2
        norm_res[:, j] = np.abs(np.linalg.norm(psi, axis=-1) - 1.0)
        pops[:, j] = _projector_pops(psi, blocks)
        rho_sum[j] = np.einsum("ti,tj->ij", psi, np.conj(psi))
        _tail_check(model, psi)

    j = 0
    if rec_steps[0] == 0:
        record(0)
        j = 1
    step = 0
    while step < steps:
        nb = min(_NOISE_BLOCK, steps - step)
        dws = np.stack([s.increments(nb, dt) for s in streams], axis=1)
        for k in range(nb):
            psi = _renorm(kern.drift_diff(psi, dt, dws[k]))
            step += 1
            if j < nrec and rec_steps[j] == step:
                record(j)
                j += 1
    return _BlockResult(mean_q, var_q, norm_res, pops, rho_sum, psi)


def simulate_trajectory(model: HilbertModel, params: CollapseParams, psi0, dt: float, T: float,
                        noise: NoiseStream, stride: int = 1) -> TrajectoryStats:
    psi0 = normalize(psi0)
    steps, rec = _grid(dt, T, stride)
    r = _evolve_block(model, params, psi0, dt, steps, rec, [noise])
    return TrajectoryStats(rec * dt, r.mean_q[0], r.var_q[0], r.norm_res[0], r.pops[0], r.final[0])


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean_q_traj: np.ndarray
    var_q_traj: np.ndarray
    norm_residual: np.ndarray
    populations: np.ndarray
    rho_mean: np.ndarray
    final_states: np.ndarray
    eigenvalues: np.ndarray

    @property
    def n_traj(self) -> int:
        return self.mean_q_traj.shape[0]

    @property
    def mean_q(self) -> np.ndarray:
        return self.mean_q_traj.mean(axis=0)

    @property
    def mean_q_se(self) -> np.ndarray:
        if self.n_traj < 2:
            return np.zeros(len(self.times))
        return self.mean_q_traj.std(axis=0, ddof=1) / math.sqrt(self.n_traj)

    @property
    def var_q(self) -> np.ndarray:
        return self.var_q_traj.mean(axis=0)

    @property
    def purity(self) -> np.ndarray:
        return np.real(np.einsum("tij,tji->t", self.rho_mean, self.rho_mean))

    @property
    def offdiag_abs(self) -> np.ndarray:
        return np.abs(self.rho_mean[:, 0, 1])

    def csv_rows(self):
        yield ("t", "mean_q", "var_q", "purity", "offdiag_abs", "norm_residual")
        nr = self.norm_residual.max(axis=0)
        for t, mq, vq, pu, od, n in zip(self.times, self.mean_q, self.var_q, self.purity, self.offdiag_abs, nr):
            yield tuple(repr(float(v)) for v in (t, mq, vq, pu, od, n))


def ensemble_run(model: HilbertModel, params: CollapseParams, psi0, dt: float, T: float, n_traj: int,
                 master_seed: int, stride: int = 1, threads: int = 1) -> EnsembleResult:
    """Independent trajectories, one noise stream per index, reduced in a fixed order.

    Trajectories are processed in fixed blocks of ``TRAJ_BLOCK``; threads only
    decide which block runs where, so the output never depends on them.
    """
    if n_traj < 1:
        raise mc.InvalidInputError("n_traj must be >= 1")
    psi0 = normalize(psi0)
    steps, rec = _grid(dt, T, stride)
    idx = [list(range(i, min(i + TRAJ_BLOCK, n_traj))) for i in range(0, n_traj, TRAJ_BLOCK)]

    def work(ids):
        streams = [NoiseStream(master_seed, i) for i in ids]
        return _evolve_block(model, params, psi0, dt, steps, rec, streams)

    if threads > 1 and len(idx) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, idx))
    else:
        parts = [work(ids) for ids in idx]
    rho = parts[0].rho_sum.copy()
    for p in parts[1:]:
        rho += p.rho_sum
    vals, _ = model.eigenspaces()
    return EnsembleResult(
        times=rec * dt,
        mean_q_traj=np.concatenate([p.mean_q for p in parts]),
        var_q_traj=np.concatenate([p.var_q for p in parts]),
        norm_residual=np.concatenate([p.norm_res for p in parts]),
        populations=np.concatenate([p.pops for p in parts]),
        rho_mean=rho / n_traj,
        final_states=np.concatenate([p.final for p in parts]),
        eigenvalues=vals,
    )


def lindblad_rhs(rho: np.ndarray, model: HilbertModel, params: CollapseParams) -> np.ndarray:
    q, h = model.q_op, model.h_op
    comm_h = h @ rho - rho @ h
    inner = q @ rho - rho @ q
    return (-1j / params.hbar) * comm_h - 0.5 * params.lam * (q @ inner - inner @ q)


@dataclass
class MasterResult:
    times: np.ndarray
    rhos: np.ndarray

    @property
    def purity(self) -> np.ndarray:
        return np.real(np.einsum("tij,tji->t", self.rhos, self.rhos))

    @property
    def offdiag_abs(self) -> np.ndarray:
        return np.abs(self.rhos[:, 0, 1])

    def expectation(self, op: np.ndarray) -> np.ndarray:
        return np.real(np.einsum("tij,ji->t", self.rhos, op))


def _check_density(rho: np.ndarray, tol: float = 1e-10) -> None:
    if mc.hermiticity_residual(rho) > 1e-10:
        raise StepSizeError("density matrix lost Hermiticity")
    if abs(np.trace(rho) - 1.0) > tol:
        raise StepSizeError(f"density matrix trace drifted to {np.trace(rho)}")
    if np.min(np.linalg.eigvalsh(mc.hermitian_part(rho))) < -tol:
        raise StepSizeError("density matrix lost positivity; reduce dt")


def integrate_master(model: HilbertModel, params: CollapseParams, rho0, dt: float, T: float,
                     stride: int = 1) -> MasterResult:
    """RK4 integration of the ensemble master equation."""
    rho = np.asarray(rho0, dtype=complex)
    if rho.ndim == 1:
        v = normalize(rho)
        rho = np.outer(v, np.conj(v))
    _check_density(rho)
    steps, rec = _grid(dt, T, stride)
    out = np.empty((len(rec), model.dim, model.dim), dtype=complex)
    j = 0
    if rec[0] == 0:
        out[0] = rho
        j = 1
    for k in range(1, steps + 1):
        k1 = lindblad_rhs(rho, model, params)
        k2 = lindblad_rhs(rho + 0.5 * dt * k1, model, params)
        k3 = lindblad_rhs(rho + 0.5 * dt * k2, model, params)
        k4 = lindblad_rhs(rho + dt * k3, model, params)
        rho = rho + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if j < len(rec) and rec[j] == k:
            _check_density(rho)
            out[j] = rho
            j += 1
    return MasterResult(rec * dt, out)


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(mc.hermitian_part(a - b)))))


@dataclass
class BornResult:
    eigenvalues: np.ndarray
    counts: np.ndarray
    n_collapsed: int
    n_total: int
    uncollapsed_fraction: float
    z: float = 3.0

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / max(1, self.n_collapsed)

    @property
    def intervals(self) -> np.ndarray:
        """Wilson score intervals at ``z`` sigma, shape ``(k, 2)``."""
        n = max(1, self.n_collapsed)
        p = self.frequencies
        z2 = self.z**2
        centre = (p + z2 / (2 * n)) / (1 + z2 / n)
        half = self.z * np.sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n)
        return np.stack([centre - half, centre + half], axis=1)

    def binomial_band(self, expected: Sequence[float]) -> np.ndarray:
        """``expected +/- z sqrt(p(1-p)/n)``, shape ``(k, 2)``."""
        p = np.asarray(expected, dtype=float)
        half = self.z * np.sqrt(p * (1 - p) / max(1, self.n_collapsed))
        return np.stack([p - half, p + half], axis=1)

    def joint_test(self, expected: Sequence[float]) -> tuple[float, float, bool]:
        """Pearson chi-square against ``expected``; passes at the two-sided ``z``-sigma level."""
        p = np.asarray(expected, dtype=float)
        e = p * self.n_collapsed
        stat = float(np.sum((self.counts - e) ** 2 / e))
        pval = float(sps.chi2.sf(stat, len(p) - 1))
        alpha = 2 * sps.norm.sf(self.z)
        return stat, pval, pval >= alpha

    def to_json(self) -> dict:
        return {
            "eigenvalues": self.eigenvalues.tolist(),
            "counts": self.counts.tolist(),
            "frequencies": self.frequencies.tolist(),
            "ci_low": self.intervals[:, 0].tolist(),
            "ci_high": self.intervals[:, 1].tolist(),
            "ci_sigma": self.z,
            "n_collapsed": self.n_collapsed,
            "n_total": self.n_total,
            "uncollapsed_fraction": self.uncollapsed_fraction,
        }


def born_statistics(final_states: np.ndarray, model: HilbertModel, threshold: float = COLLAPSE_THRESHOLD,
                    max_uncollapsed: float = 0.01, z: float = 3.0) -> BornResult:
    """Outcome frequencies per ``q`` eigenspace.

    A trajectory counts as collapsed onto the eigenspace holding more than
    ``threshold`` of its population. Raises :class:`InconclusiveRunError`
    when more than ``max_uncollapsed`` of the trajectories have not collapsed.
    """
    vals, blocks = model.eigenspaces()
    psi = np.atleast_2d(np.asarray(final_states, dtype=complex))
    pops = _projector_pops(psi, blocks)
    best = np.argmax(pops, axis=1)
    ok = pops[np.arange(len(best)), best] > threshold
    counts = np.bincount(best[ok], minlength=len(blocks)).astype(float)
    frac = 1.0 - ok.mean()
    res = BornResult(vals, counts, int(ok.sum()), len(best), float(frac), z)
    if frac > max_uncollapsed:
        raise InconclusiveRunError(f"{100 * frac:.2f}% of trajectories uncollapsed; extend T")
    return res


@dataclass
class RateFit:
    gamma: float
    se: float
    intercept: float
    max_rel_residual: float
    n_points: int
    warning: str | None = None


def decoherence_rate_fit(times, offdiag_abs, floor: float = 0.05, t_max: float | None = None) -> RateFit:
    """Least-squares slope of ``log |rho_12|`` against ``t``.

    Points with ``|rho_12|`` below ``floor`` times its initial value (or beyond
    ``t_max``) are dropped to keep Monte Carlo noise out of the logarithm.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(offdiag_abs, dtype=float)
    if y[0] <= 0:
        raise mc.InvalidInputError("initial coherence is zero; nothing to fit")
    keep = y > floor * y[0]
    if t_max is not None:
        keep &= t <= t_max
    # stop at the first point that falls below the floor
    cut = np.argmin(keep) if not keep.all() else len(keep)
    t, y = t[:cut], y[:cut]
    if len(t) < 3:
        raise mc.InvalidInputError("fewer than three usable points for the rate fit")
    fit = sps.linregress(t, np.log(y))
    resid = np.log(y) - (fit.intercept + fit.slope * t)
    rel = float(np.max(np.abs(np.expm1(resid))))
    warn = None
    if rel > 0.05:
        warn = f"non-exponential decay: max relative residual {rel:.3f}"
        log.warning(warn)
    return RateFit(-float(fit.slope), float(fit.stderr), float(fit.intercept), rel, len(t), warn)


@dataclass
class ScanResult:
    rows: list
    exponent: float | None
    exponent_se: float | None

    def csv_rows(self):
        yield ("m", "lambda", "gamma_fit", "gamma_se", "gamma_theory", "ratio")
        for r in self.rows:
            yield tuple(repr(float(r[k])) for k in ("m", "lambda", "gamma_fit", "gamma_se", "gamma_theory", "ratio"))


def amplification_scan(masses: Sequence[float], model: HilbertModel, params: CollapseParams, psi0,
                       source: str = "master", dt: float = 1e-3, horizon: float = 1.5, n_traj: int = 10_000,
                       master_seed: int = 0, threads: int = 1) -> ScanResult:
    """Fitted dephasing rate for each mass with ``lam = (m/m0) lam0``.

    Each mass runs to ``horizon / Gamma_theory(m)``; massless entries reuse the
    horizon of the lightest massive one. Ratios are relative to the first row.
    """
    masses = sorted(float(m) for m in masses)
    if not masses:
        raise mc.InvalidInputError("empty mass list")
    positive = [m for m in masses if m > 0]
    t_ref = horizon / gamma_theory(model, params.with_mass(positive[0])) if positive else 1.0
    rows = []
    psi0 = normalize(psi0)
    for m in masses:
        p = params.with_mass(m)
        g_th = gamma_theory(model, p)
        T = horizon / g_th if g_th > 0 else t_ref
        stride = max(1, int(round(T / dt / 100)))
        if source == "master":
            res = integrate_master(model, p, psi0, dt, T, stride)
            fit = decoherence_rate_fit(res.times, res.offdiag_abs)
        elif source == "ensemble":
            res = ensemble_run(model, p, psi0, dt, T, n_traj, master_seed, stride, threads)
            fit = decoherence_rate_fit(res.times, res.offdiag_abs)
        else:
            raise mc.InvalidInputError(f"unknown scan source {source!r}")
        rows.append({"m": m, "lambda": p.lam, "gamma_fit": fit.gamma, "gamma_se": fit.se, "gamma_theory": g_th})
    ref = next((r["gamma_fit"] for r in rows if r["m"] > 0), None)
    for r in rows:
        r["ratio"] = r["gamma_fit"] / ref if ref else float("nan")
    exponent = exponent_se = None
    pos = [r for r in rows if r["m"] > 0 and r["gamma_fit"] > 0]
    if len(pos) >= 3:
        fit = sps.linregress(np.log([r["m"] for r in pos]), np.log([r["gamma_fit"] for r in pos]))
        exponent, exponent_se = float(fit.slope), float(fit.stderr)
    return ScanResult(rows, exponent, exponent_se)


@dataclass
class NormDrift:
    times: np.ndarray
    mean_norm2: np.ndarray
    se_norm2: np.ndarray
    var_norm2: np.ndarray
    normalized_max_residual: float
    linear_norms: np.ndarray = field(repr=False, default=None)


def norm_drift_probe(model: HilbertModel, params: CollapseParams, psi0, dt: float, T: float,
                     n_traj: int = 1000, master_seed: int = 0, stride: int = 1) -> NormDrift:
    """Norm statistics of the linear (never renormalised) equation, plus the
    maximum norm residual of the nonlinear scheme on the same noise."""
    psi0 = normalize(psi0)
    steps, rec = _grid(dt, T, stride)
    kern = _Kernel(model, params)
    streams = [NoiseStream(master_seed, i) for i in range(n_traj)]
    lin = np.broadcast_to(psi0, (n_traj, model.dim)).astype(complex)
    nl = lin.copy()
    norms = np.empty((n_traj, len(rec)))
    max_res = 0.0
    j = 0
    if rec[0] == 0:
        norms[:, 0] = 1.0
        j = 1
    step = 0
    while step < steps:
        nb = min(_NOISE_BLOCK, steps - step)
        dws = np.stack([s.increments(nb, dt) for s in streams], axis=1)
        for k in range(nb):
            lin = kern.linear(lin, dt, dws[k])
            nl = _renorm(kern.drift_diff(nl, dt, dws[k]))
            max_res = max(max_res, float(np.max(np.abs(np.linalg.norm(nl, axis=-1) - 1.0))))
            step += 1
            if j < len(rec) and rec[j] == step:
                norms[:, j] = np.sum(np.abs(lin) ** 2, axis=-1)
                j += 1
    se = norms.std(axis=0, ddof=1) / math.sqrt(n_traj) if n_traj > 1 else np.zeros(len(rec))
    return NormDrift(rec * dt, norms.mean(axis=0), se, norms.var(axis=0), max_res, norms)


@dataclass
class WeakOrder:
    dts: np.ndarray
    errors: np.ndarray
    se: np.ndarray
    exponent: float
    exponent_se: float


def weak_order_sweep(model: HilbertModel, params: CollapseParams, psi0, T: float, dts: Sequence[float],
                     n_traj: int = 20_000, master_seed: int = 0, refine: int = 16) -> WeakOrder:
    """Weak error of ``E[<q>_T^2]`` for each ``dt`` against a reference run at ``min(dts)/refine``.

    All levels share one Brownian path per trajectory (coarse increments are
    sums of reference increments), which keeps the difference estimator's
    variance far below that of the statistic itself.
    """
    dts = np.asarray(sorted(dts, reverse=True), dtype=float)
    fine = dts[-1] / refine
    levels = np.rint(dts / fine).astype(int)
    if np.any(np.abs(levels * fine - dts) > 1e-9 * dts):
        raise mc.InvalidInputError("every dt must be an integer multiple of the reference step")
    n_fine = int(round(T / fine))
    if np.any(n_fine % levels):
        raise mc.InvalidInputError("T must be a multiple of every dt")
    kern = _Kernel(model, params)
    psi0 = normalize(psi0)
    dw = np.stack([NoiseStream(master_seed, i).increments(n_fine, fine) for i in range(n_traj)], axis=1)

    def stat(level):
        dt = fine * level
        inc = dw.reshape(n_fine // level, level, n_traj).sum(axis=1)
        psi = np.broadcast_to(psi0, (n_traj, model.dim)).astype(complex)
        for k in range(inc.shape[0]):
            psi = _renorm(kern.drift_diff(psi, dt, inc[k]))
        return expectation(psi, model.q_op) ** 2

    ref = stat(1)
    errs, ses = [], []
    for lv in levels:
        d = stat(lv) - ref
        errs.append(abs(d.mean()))
        ses.append(d.std(ddof=1) / math.sqrt(n_traj))
    errs, ses = np.array(errs), np.array(ses)
    fit = sps.linregress(np.log(dts), np.log(errs))
    return WeakOrder(dts, errs, ses, float(fit.slope), float(fit.stderr))
