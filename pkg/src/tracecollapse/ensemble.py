"""Canonical-ensemble sampling of matrix phase space.

The target density is ``exp(Tr(lam Q) - TrH / tau)`` where ``Q`` is the
charge ``sum_r [q_r, p_r]`` and ``lam`` is anti-Hermitian, so the exponent is
real. Chains are random-walk Metropolis in the orthonormal real coordinates of
the Hermitian matrices; many chains advance together as one numpy batch, each
with its own counter-based stream.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import matcore as mc
from .matcore import PolynomialModel
from .noise import DOMAIN_CHAIN, stream_generator
from .tracedyn import PhasePoint, TraceHamiltonian, adler_millard_charge

log = logging.getLogger(__name__)

TARGET_ACCEPTANCE = 0.3
# Chains are grouped in fixed-size blocks; threads only distribute blocks.
CHAIN_BLOCK = 128
_NOISE_BLOCK = 512


class InvalidConfigError(ValueError):
    pass


@dataclass
class EnsembleConfig:
    tau: float = 1.0
    lambda_matrix: np.ndarray | None = None
    burn_in: int = 10_000
    n_samples: int = 100_000
    thinning: int = 10
    proposal_scale: float = 0.5
    seed: int = 0
    n_chains: int = 100
    tune: bool = True
    n_batches: int = 20

    def lam(self, dim: int) -> np.ndarray:
        if self.lambda_matrix is None:
            return np.zeros((dim, dim), dtype=complex)
        return np.asarray(self.lambda_matrix, dtype=complex)

    def validate(self, dim: int) -> None:
        errs = []
        if not self.tau > 0:
            errs.append(f"tau must be > 0, got {self.tau}")
        lam = self.lam(dim)
        if lam.shape != (dim, dim):
            errs.append(f"lambda_matrix must be {dim}x{dim}, got {lam.shape}")
        elif not mc.check_adjoint_class(lam, mc.AdjointClass.ANTI_HERMITIAN, 1e-12):
            errs.append("lambda_matrix must be anti-Hermitian")
        if self.n_samples < 100:
            errs.append(f"n_samples must be >= 100, got {self.n_samples}")
        if self.burn_in < 0 or self.thinning < 1 or self.n_chains < 1:
            errs.append("burn_in >= 0, thinning >= 1 and n_chains >= 1 required")
        if self.proposal_scale < 0:
            errs.append("proposal_scale must be >= 0")
        if errs:
            raise InvalidConfigError("; ".join(errs))


def theta_lambda(theta: float, dim: int) -> np.ndarray:
    """``theta * diag(i, -i, i, -i, ...)`` (a zero is appended for odd dims)."""
    d = np.array([1j if k % 2 == 0 else -1j for k in range(dim)])
    if dim % 2:
        d[-1] = 0.0
    return theta * np.diag(d)


def log_weight(z: PhasePoint, h: TraceHamiltonian, cfg: EnsembleConfig, validate: bool = True) -> np.ndarray:
    """``Tr(lam Q(z)) - Tr H(z) / tau``, real."""
    if validate:
        cfg.validate(z.dim)
    lam = cfg.lam(z.dim)
    charge_term = mc.trace_complex(lam @ adler_millard_charge(z))
    val = charge_term - h.model.trace(h.assignment(z)) / cfg.tau
    scale = np.maximum(1.0, np.abs(val))
    if np.any(np.abs(val.imag) > 1e-12 * scale):
        raise mc.InvalidInputError("log weight has an imaginary part")
    return np.real(val)


def log_weight_gradient(z: PhasePoint, h: TraceHamiltonian, cfg: EnsembleConfig) -> PhasePoint:
    """Matrix gradients of the log weight with respect to each q_r and p_r.

    ``d Tr(lam [q, p]) / dq = [p, lam]`` and ``/ dp = [lam, q]``.
    """
    lam = cfg.lam(z.dim)
    gq = mc.commutator(z.p, lam) - h.grad_q(z) / cfg.tau
    gp = mc.commutator(lam, z.q) - h.grad_p(z) / cfg.tau
    return PhasePoint(gq, gp)


@dataclass
class SampleStats:
    mean: np.ndarray
    se: np.ndarray
    n: int
    acceptance_rate: float = float("nan")
    ess: np.ndarray | float = float("nan")

    def to_json(self) -> dict:
        def enc(a):
            a = np.asarray(a)
            if np.iscomplexobj(a):
                return {"re": a.real.tolist(), "im": a.imag.tolist()}
            return a.tolist()
        return {"mean": enc(self.mean), "se": enc(self.se), "n": self.n,
                "acceptance_rate": self.acceptance_rate, "ess": enc(self.ess)}


@dataclass
class ChainSamples:
    """Thinned states, real coordinates of shape ``(n_chains, n_per_chain, 2 R N^2)``."""

    coords: np.ndarray
    n_dof: int
    dim: int
    acceptance: np.ndarray
    proposal_scales: np.ndarray
    warnings: list = field(default_factory=list)

    @property
    def n_chains(self) -> int:
        return self.coords.shape[0]

    @property
    def n_per_chain(self) -> int:
        return self.coords.shape[1]

    @property
    def n(self) -> int:
        return self.n_chains * self.n_per_chain

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.acceptance))

    def points(self, chunk: int = 8192):
        """Yield batched :class:`PhasePoint` objects covering all samples in order."""
        flat = self.coords.reshape(-1, self.coords.shape[-1])
        for i in range(0, flat.shape[0], chunk):
            yield PhasePoint.from_real(flat[i:i + chunk], self.n_dof, self.dim)

    def __iter__(self):
        for batch in self.points():
            for k in range(batch.q.shape[0]):
                yield PhasePoint(batch.q[k], batch.p[k])


def _run_chain_block(h: TraceHamiltonian, cfg: EnsembleConfig, dim: int, chain_ids: Sequence[int],
                     x0: np.ndarray, n_per: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n_dof = h.n_dof
    dcoord = x0.shape[-1]
    gens = [stream_generator(cfg.seed, c, DOMAIN_CHAIN) for c in chain_ids]
    nc = len(chain_ids)
    scale = np.full(nc, float(cfg.proposal_scale))

    def lw(x):
        return log_weight(PhasePoint.from_real(x, n_dof, dim), h, cfg, validate=False)

    x = x0.copy()
    cur = lw(x)
    total = cfg.burn_in + n_per * cfg.thinning
    out = np.empty((nc, n_per, dcoord))
    accepted = np.zeros(nc)
    window_acc = np.zeros(nc)
    window = 100
    kept = 0
    step = 0
    while step < total:
        nb = min(_NOISE_BLOCK, total - step)
        xi = np.stack([g.standard_normal((nb, dcoord)) for g in gens], axis=1)
        lu = np.log(np.stack([g.random(nb) for g in gens], axis=1))
        for k in range(nb):
            prop = x + scale[:, None] * xi[k]
            new = lw(prop)
            acc = lu[k] < new - cur
            x = np.where(acc[:, None], prop, x)
            cur = np.where(acc, new, cur)
            if step < cfg.burn_in:
                window_acc += acc
                if cfg.tune and (step + 1) % window == 0:
                    scale *= np.exp(window_acc / window - TARGET_ACCEPTANCE)
                    window_acc[:] = 0
            else:
                accepted += acc
                j = step - cfg.burn_in + 1
                if j % cfg.thinning == 0:
                    out[:, kept] = x
                    kept += 1
            step += 1
    return out, accepted / max(1, n_per * cfg.thinning), scale


def metropolis_sample(h: TraceHamiltonian, cfg: EnsembleConfig, dim: int,
                      init: PhasePoint | None = None, threads: int = 1) -> ChainSamples:
    """Random-walk Metropolis for ``exp(log_weight)``.

    During burn-in each chain's proposal scale is adapted toward acceptance
    0.3; it is frozen afterwards so the sampling phase has exact detailed
    balance. ``n_samples`` is the total kept over all chains.
    """
    cfg.validate(dim)
    if not h.confining:
        raise InvalidConfigError(f"model {h.name!r} is not declared confining")
    n_per = math.ceil(cfg.n_samples / cfg.n_chains)
    n_dof = h.n_dof
    if init is None:
        x0 = np.zeros((cfg.n_chains, 2 * n_dof * dim * dim))
    else:
        x0 = np.broadcast_to(init.to_real().reshape(-1), (cfg.n_chains, 2 * n_dof * dim * dim)).copy()
    blocks = [list(range(i, min(i + CHAIN_BLOCK, cfg.n_chains))) for i in range(0, cfg.n_chains, CHAIN_BLOCK)]

    def work(ids):
        return _run_chain_block(h, cfg, dim, ids, x0[ids[0]:ids[-1] + 1], n_per)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(b) for b in blocks]
    coords = np.concatenate([r[0] for r in results])
    acc = np.concatenate([r[1] for r in results])
    scales = np.concatenate([r[2] for r in results])
    samples = ChainSamples(coords, n_dof, dim, acc, scales)
    rate = samples.acceptance_rate
    if cfg.proposal_scale > 0 and not (0.1 <= rate <= 0.7):
        msg = f"acceptance rate {rate:.3f} outside [0.1, 0.7] after tuning"
        log.warning(msg)
        samples.warnings.append(msg)
    return samples


def _batch_means_se(values: np.ndarray, n_batches: int) -> np.ndarray:
    """SE from batch means; ``values`` has shape ``(n_chains, n_per, ...)``."""
    n_chains, n_per = values.shape[:2]
    b = max(1, min(n_batches, n_per))
    size = n_per // b
    trimmed = values[:, : b * size]
    bm = trimmed.reshape((n_chains, b, size) + values.shape[2:]).mean(axis=2)
    bm = bm.reshape((n_chains * b,) + values.shape[2:])
    if bm.shape[0] < 2:
        return np.zeros(values.shape[2:])
    return bm.std(axis=0, ddof=1) / np.sqrt(bm.shape[0])


def _se(values: np.ndarray, n_batches: int) -> np.ndarray:
    if np.iscomplexobj(values):
        return _batch_means_se(values.real, n_batches) + 1j * _batch_means_se(values.imag, n_batches)
    return _batch_means_se(values, n_batches)


def evaluate(samples: ChainSamples, observable: Callable[[PhasePoint], np.ndarray]) -> np.ndarray:
    """Observable values reshaped to ``(n_chains, n_per_chain, ...)``.

    ``observable`` receives batched phase points; a result without the batch
    axis (a constant) is broadcast.
    """
    if samples.n == 0:
        raise mc.InvalidInputError("empty sample set")
    parts = []
    for z in samples.points():
        nb = z.q.shape[0]
        v = np.asarray(observable(z))
        if v.shape[:1] != (nb,):
            v = np.broadcast_to(v, (nb,) + v.shape)
        parts.append(v)
    flat = np.concatenate(parts)
    return flat.reshape((samples.n_chains, samples.n_per_chain) + flat.shape[1:])


def canonical_average(samples: ChainSamples, observable: Callable[[PhasePoint], np.ndarray],
                      n_batches: int = 20) -> SampleStats:
    """Mean and batch-means SE of a scalar or matrix observable (entrywise)."""
    vals = evaluate(samples, observable)
    mean = vals.mean(axis=(0, 1))
    se = _se(vals, n_batches)
    var = vals.real.var(axis=(0, 1)) + (vals.imag.var(axis=(0, 1)) if np.iscomplexobj(vals) else 0.0)
    se2 = np.abs(se) ** 2
    ess = np.where(se2 > 0, var / np.where(se2 > 0, se2, 1.0), samples.n)
    return SampleStats(mean, se, samples.n, samples.acceptance_rate, ess)


@dataclass
class WardReport:
    test_function: str
    components: list  # (variable, basis index)
    residual: np.ndarray
    se: np.ndarray
    n_sigma: float = 3.0
    pairing: dict = field(default_factory=dict)

    @property
    def passed_components(self) -> np.ndarray:
        return (self.se > 0) & (np.abs(self.residual) <= self.n_sigma * self.se)

    @property
    def passed(self) -> bool:
        return bool(np.all(self.passed_components))

    def rows(self):
        for (v, a), r, s, ok in zip(self.components, self.residual, self.se, self.passed_components):
            yield self.test_function, v, a, float(r), float(s), bool(ok)


def ward_integrand(z: PhasePoint, h: TraceHamiltonian, cfg: EnsembleConfig, w: PolynomialModel,
                   variables: Sequence[str]) -> np.ndarray:
    """Per-sample ``dTrW/dx_a + TrW * dlog(rho)/dx_a`` for every real coordinate of ``variables``.

    Shift invariance of the measure makes the ensemble mean of each component
    vanish for a normalisable density.
    """
    basis = mc.hermitian_basis(z.dim)
    at = h.assignment(z)
    trw = w.trace(at)
    if np.any(np.abs(trw.imag) > 1e-10 * np.maximum(1.0, np.abs(trw))):
        raise mc.InvalidInputError("test function trace must be real on Hermitian arguments")
    trw = trw.real
    glog = log_weight_gradient(z, h, cfg)
    slots = {n: ("q", r) for r, n in enumerate(h.q_names)}
    slots.update({n: ("p", r) for r, n in enumerate(h.p_names)})
    parts = []
    for v in variables:
        kind, r = slots[v]
        gw = mc.trace_derivative(w, v, at)
        gl = (glog.q if kind == "q" else glog.p)[..., r, :, :]
        dw = mc.hermitian_to_real(gw, basis)
        dl = mc.hermitian_to_real(gl, basis)
        parts.append(dw + trw[..., None] * dl)
    return np.concatenate(parts, axis=-1)


def ward_residual(h: TraceHamiltonian, cfg: EnsembleConfig, w: PolynomialModel, var: str | Sequence[str] | None = None,
                  samples: ChainSamples | None = None, dim: int | None = None, name: str = "W",
                  threads: int = 1) -> WardReport:
    """Ward-identity residual of test function ``w`` over the shift of ``var``.

    ``var=None`` checks every phase-space variable. Components pass when the
    residual lies within ``3 SE`` of zero.
    """
    if not h.confining:
        raise InvalidConfigError(f"model {h.name!r} is not confining; boundary terms do not vanish")
    if samples is None:
        if dim is None:
            raise mc.InvalidInputError("need either samples or dim")
        samples = metropolis_sample(h, cfg, dim, threads=threads)
    names = list(h.q_names) + list(h.p_names)
    if var is None:
        variables = names
    elif isinstance(var, str):
        variables = [var]
    else:
        variables = list(var)
    for v in variables:
        if v not in names:
            raise mc.InvalidInputError(f"unknown phase-space variable {v!r}")
    stats = canonical_average(samples, lambda z: ward_integrand(z, h, cfg, w, variables), cfg.n_batches)
    n2 = samples.dim ** 2
    comps = [(v, a) for v in variables for a in range(n2)]
    pairing = {"omega": "canonical q_r <-> p_r pairing",
               "pairs": [[q, p] for q, p in zip(h.q_names, h.p_names)]}
    return WardReport(name, comps, np.asarray(stats.mean, dtype=float), np.asarray(stats.se, dtype=float),
                      pairing=pairing)


@dataclass
class ChargeDiagnostics:
    mean_charge: np.ndarray
    se: np.ndarray
    eigenvalues: np.ndarray
    trace_residual: float
    pairing_report: dict

    @property
    def max_real_part(self) -> float:
        return float(np.max(np.abs(self.eigenvalues.real)))

    @property
    def eigen_sum(self) -> complex:
        return complex(np.sum(self.eigenvalues))

    def to_json(self) -> dict:
        return {
            "mean_charge": mc.to_json(self.mean_charge),
            "se": {"re": self.se.real.tolist(), "im": self.se.imag.tolist()},
            "eigenvalues": {"re": self.eigenvalues.real.tolist(), "im": self.eigenvalues.imag.tolist()},
            "trace_residual": self.trace_residual,
            "pairing_report": self.pairing_report,
        }


def charge_diagnostics(samples: ChainSamples, min_samples: int = 1000) -> ChargeDiagnostics:
    """Anti-Hermitised ensemble mean of the charge and its spectrum.

    The pairing report describes whether the imaginary eigenvalues come in
    ``+/-`` pairs of similar magnitude; nothing here asserts that they do.
    """
    if samples.n < min_samples:
        raise mc.InvalidInputError(f"charge diagnostics need >= {min_samples} samples, got {samples.n}")
    stats = canonical_average(samples, adler_millard_charge)
    mean = mc.anti_hermitian_part(stats.mean)
    ev = np.linalg.eigvals(mean)
    ev = ev[np.argsort(ev.imag)]
    im = ev.imag
    mags = np.sort(np.abs(im))
    entry_se = float(np.max(np.abs(stats.se.real) + np.abs(stats.se.imag)))
    spread = float(im.max() - im.min())
    mean_mag = float(np.mean(mags))
    report = {
        "imag_eigenvalues": im.tolist(),
        "magnitudes": mags.tolist(),
        "spread": spread,
        "mean_magnitude": mean_mag,
        "relative_magnitude_std": float(np.std(mags) / mean_mag) if mean_mag > 0 else 0.0,
        "max_entry_se": entry_se,
        "consistent_with_zero": bool(np.all(np.abs(stats.mean) <= 3 * (np.abs(stats.se.real) + np.abs(stats.se.imag)) + 1e-300)),
    }
    return ChargeDiagnostics(mean, stats.se, ev, float(abs(mc.trace_complex(mean))), report)


def charge_response(h: TraceHamiltonian, cfg: EnsembleConfig, dim: int, thetas: Sequence[float],
                    threads: int = 1) -> list[dict]:
    """Eigenvalue spread of the mean charge as ``lam = theta diag(i, -i, ...)`` is swept."""
    rows = []
    for th in thetas:
        c = EnsembleConfig(**{**cfg.__dict__, "lambda_matrix": theta_lambda(th, dim)})
        d = charge_diagnostics(metropolis_sample(h, c, dim, threads=threads))
        rows.append({"theta": float(th), "spread": d.pairing_report["spread"],
                     "max_entry_se": d.pairing_report["max_entry_se"]})
    return rows


def gaussian_control(seeds: Sequence[int], tau: float = 1.0, n_samples: int = 20_000,
                     burn_in: int = 2000, thinning: int = 5) -> list[tuple[float, float, bool]]:
    """Scalar harmonic chain per seed: ``(mean q^2, SE, |mean - tau| <= 3 SE)``."""
    from .tracedyn import harmonic_hamiltonian

    h = harmonic_hamiltonian(1)
    out = []
    for s in seeds:
        cfg = EnsembleConfig(tau=tau, burn_in=burn_in, n_samples=n_samples, thinning=thinning,
                             proposal_scale=1.0, seed=s, n_chains=20)
        smp = metropolis_sample(h, cfg, 1)
        st = canonical_average(smp, lambda z: np.real(z.q[..., 0, 0, 0]) ** 2)
        m, se = float(st.mean), float(st.se)
        out.append((m, se, abs(m - tau) <= 3 * se))
    return out
