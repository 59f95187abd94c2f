"""Experiment dispatch, artifact writing and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__
from . import collapse as cl
from . import ensemble as en
from . import matcore as mc
from . import tracedyn as td
from .config import ConfigError, RunConfig, canonical_json
from .noise import DOMAIN_INIT, stream_generator

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INCONCLUSIVE = 3
EXIT_NUMERICAL = 4

MANIFEST = "manifest.json"


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ArtifactWriter:
    """Writes CSV/JSON files under one directory and remembers their checksums."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.files: dict[str, str] = {}

    def _put(self, name: str, data: bytes) -> Path:
        path = self.out_dir / name
        _atomic_write(path, data)
        self.files[name] = hashlib.sha256(data).hexdigest()
        return path

    def csv(self, name: str, rows: Iterable[Iterable]) -> Path:
        buf = io.StringIO(newline="")
        w = csv.writer(buf, lineterminator="\r\n")
        for r in rows:
            w.writerow(r)
        return self._put(name, buf.getvalue().encode())

    def json(self, name: str, obj) -> Path:
        return self._put(name, canonical_json(_jsonable(obj)).encode())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_manifest(writer: ArtifactWriter, cfg: RunConfig, started: str, name: str = MANIFEST) -> Path:
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "code_version": __version__,
        "started": started,
        "finished": _now(),
        "files": [{"name": n, "sha256": h, "bytes": (writer.out_dir / n).stat().st_size}
                  for n, h in sorted(writer.files.items())],
    }
    data = canonical_json(manifest).encode()
    path = writer.out_dir / name
    _atomic_write(path, data)
    return path


def verify_manifest(out_dir: Path, name: str = MANIFEST) -> list[str]:
    """Names of manifest entries whose checksum no longer matches (empty when all verify)."""
    m = json.loads((Path(out_dir) / name).read_text())
    bad = []
    for f in m["files"]:
        p = Path(out_dir) / f["name"]
        if not p.is_file() or hashlib.sha256(p.read_bytes()).hexdigest() != f["sha256"]:
            bad.append(f["name"])
    return bad


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _f(x) -> str:
    return repr(float(x))


# -- model builders -----------------------------------------------------------------

def trace_model(cfg: RunConfig) -> td.TraceHamiltonian:
    m = cfg.section("model")
    kind = m["kind"]
    if kind == "operator_time":
        return td.operator_time_hamiltonian(m["coupling"])
    params = {"mass": m["mass"]}
    if kind != "free":
        params["omega"] = m["omega"]
    if kind == "quartic":
        params.update(g=m["g"], coupling=m["coupling"])
    return td.build_hamiltonian(kind, m["n_dof"], **params)


def hilbert_model(cfg: RunConfig) -> cl.HilbertModel:
    m = cfg.section("model")
    kind = m["kind"]
    if kind == "two-level":
        return cl.two_level(m["q1"], m["q2"], m["delta"])
    if kind == "lattice-position":
        return cl.lattice_position(m["n_sites"], m["spacing"], m["hopping"])
    return cl.truncated_oscillator(m["n"], m["mass"], m["omega"], cfg.section("collapse")["hbar"])


def collapse_params(cfg: RunConfig) -> cl.CollapseParams:
    c = cfg.section("collapse")
    return cl.CollapseParams(c["hbar"], c["lambda0"], c["mass"], c["m0"])


def initial_state(cfg: RunConfig, model: cl.HilbertModel) -> np.ndarray:
    psi0 = cfg.section("psi0")
    if "coherent" in psi0:
        return cl.coherent_state(model.dim, psi0["coherent"])
    w = np.asarray(psi0["weights"], dtype=float)
    return cl.normalize(np.sqrt(w / w.sum()).astype(complex))


def default_horizon(model: cl.HilbertModel, params: cl.CollapseParams, factor: float) -> float:
    g = cl.gamma_theory(model, params)
    return factor / g if g > 0 else 10.0


# -- experiments --------------------------------------------------------------------

def run_evolve(cfg: RunConfig, w: ArtifactWriter) -> int:
    h = trace_model(cfg)
    m, num = cfg.section("model"), cfg.section("numerics")
    rng = stream_generator(cfg.seed, 0, DOMAIN_INIT)
    z0 = td.random_phase_point(h.n_dof, m["dim"], rng, m["init_scale"])
    if num["integrator"] == "rk4":
        traj = td.integrate_rk4(h, z0, num["dt"], num["steps"], num["stride"])
    else:
        traj = td.integrate_leapfrog(h, z0, num["dt"], num["steps"], num["stride"])
    w.csv("trajectory.csv", td.trajectory_csv_rows(traj))
    rep = td.conservation_report(traj)
    q_final = td.adler_millard_charge(traj.final)
    w.json("conservation.json", {
        "model": h.name,
        "symplectic": traj.symplectic,
        "max_energy_drift": rep.max_energy_drift,
        "max_charge_drift": rep.max_charge_drift,
        "max_hermiticity_residual": float(traj.hermiticity.max()),
        "charge_anti_hermiticity": float(mc.anti_hermiticity_residual(q_final)),
        "charge_trace_abs": float(abs(mc.trace_complex(q_final))),
        "snapshots": len(traj),
    })
    if num["snapshots"]:
        w.json("snapshots.json", {"s": traj.times, "states": [z.to_json() for z in traj.states]})
    return EXIT_OK


WARD_TESTS = {
    "q2": lambda q, p: [(1.0, (q, q))],
    "qp_sym": lambda q, p: [(1.0, (q, p)), (1.0, (p, q))],
    "q3": lambda q, p: [(1.0, (q, q, q))],
    "q4": lambda q, p: [(1.0, (q, q, q, q))],
}


def ward_function(h: td.TraceHamiltonian, name: str) -> mc.PolynomialModel:
    """Named test function on the first canonical pair."""
    return mc.PolynomialModel(h.model.variables, WARD_TESTS[name](h.q_names[0], h.p_names[0]))


def run_sample(cfg: RunConfig, w: ArtifactWriter) -> int:
    h = trace_model(cfg)
    m, num, an = cfg.section("model"), cfg.section("numerics"), cfg.section("analysis")
    dim = m["dim"]
    ecfg = en.EnsembleConfig(tau=num["tau"], lambda_matrix=en.theta_lambda(num["lambda_theta"], dim),
                             burn_in=num["burn_in"], n_samples=num["n_samples"], thinning=num["thinning"],
                             proposal_scale=num["proposal_scale"], seed=cfg.seed, n_chains=num["n_chains"])
    samples = en.metropolis_sample(h, ecfg, dim, threads=cfg.threads)
    trh = en.canonical_average(samples, h.trace)
    w.json("stats.json", {
        "acceptance_rate": samples.acceptance_rate,
        "n_samples": samples.n,
        "n_chains": samples.n_chains,
        "trace_h": {"mean": float(trh.mean), "se": float(trh.se), "ess": float(trh.ess)},
        "warnings": samples.warnings,
    })
    rows = [("test_function", "variable", "component", "residual", "se", "pass")]
    summary = {}
    for name in an["ward_tests"]:
        rep = en.ward_residual(h, ecfg, ward_function(h, name), samples=samples, name=name)
        rows += [(t, v, a, _f(r), _f(s), int(ok)) for t, v, a, r, s, ok in rep.rows()]
        summary[name] = {"passed": rep.passed, "n_components": len(rep.components),
                         "max_abs_z": float(np.max(np.abs(rep.residual) / rep.se))}
    w.csv("ward.csv", rows)
    w.json("ward_summary.json", summary)
    if an["charge"]:
        w.json("charge.json", en.charge_diagnostics(samples, min_samples=min(1000, samples.n)).to_json())
    if an["trace_csv"]:
        vals = en.evaluate(samples, h.trace)
        w.csv("trace_h.csv", [("chain", "index", "TrH")] +
              [(c, k, _f(vals[c, k])) for c in range(vals.shape[0]) for k in range(vals.shape[1])])
    return EXIT_OK


def run_collapse(cfg: RunConfig, w: ArtifactWriter) -> int:
    model, params = hilbert_model(cfg), collapse_params(cfg)
    num, an = cfg.section("numerics"), cfg.section("analysis")
    psi0 = initial_state(cfg, model)
    T = num["T"] if num["T"] is not None else default_horizon(model, params, 20.0)
    res = cl.ensemble_run(model, params, psi0, num["dt"], T, num["n_traj"], cfg.seed, num["stride"], cfg.threads)
    w.csv("trajectory.csv", res.csv_rows())
    report = {"lambda": params.lam, "gamma_theory": cl.gamma_theory(model, params), "T": T,
              "n_traj": res.n_traj, "max_norm_residual": float(res.norm_residual.max())}
    code = EXIT_OK
    if an["decoherence"]:
        me = cl.integrate_master(model, params, psi0, num["dt"], T, num["stride"])
        rows = [("series", "t", "offdiag_abs")]
        rows += [("ensemble", _f(t), _f(v)) for t, v in zip(res.times, res.offdiag_abs)]
        rows += [("master", _f(t), _f(v)) for t, v in zip(me.times, me.offdiag_abs)]
        w.csv("decoherence.csv", rows)
        try:
            report["gamma_fit_ensemble"] = cl.decoherence_rate_fit(res.times, res.offdiag_abs).__dict__
            report["gamma_fit_master"] = cl.decoherence_rate_fit(me.times, me.offdiag_abs).__dict__
        except mc.InvalidInputError as exc:
            report["gamma_fit_error"] = str(exc)
        report["trace_distance_final"] = cl.trace_distance(res.rho_mean[-1], me.rhos[-1])
    if an["born"]:
        try:
            born = cl.born_statistics(res.final_states, model)
            out = born.to_json()
            expected = an.get("expected")
            if expected is None:
                _, blocks = model.eigenspaces()
                expected = [float(np.sum(np.abs(psi0 @ np.conj(b)) ** 2)) for b in blocks]
            out["expected"] = list(expected)
            stat, pval, ok = born.joint_test(expected)
            out["joint_test"] = {"chi2": stat, "p_value": pval, "passed": ok}
            w.json("born.json", out)
        except cl.InconclusiveRunError as exc:
            report["born_error"] = str(exc)
            code = EXIT_INCONCLUSIVE
    w.json("report.json", report)
    return code


def run_master(cfg: RunConfig, w: ArtifactWriter) -> int:
    model, params = hilbert_model(cfg), collapse_params(cfg)
    num = cfg.section("numerics")
    psi0 = initial_state(cfg, model)
    T = num["T"] if num["T"] is not None else default_horizon(model, params, 3.0)
    me = cl.integrate_master(model, params, psi0, num["dt"], T, num["stride"])
    rows = [("t", "mean_q", "purity", "offdiag_abs", "trace_residual")]
    mq = me.expectation(model.q_op)
    for t, q, pu, od, r in zip(me.times, mq, me.purity, me.offdiag_abs, me.rhos):
        rows.append((_f(t), _f(q), _f(pu), _f(od), _f(abs(np.trace(r) - 1.0))))
    w.csv("master.csv", rows)
    report = {"lambda": params.lam, "gamma_theory": cl.gamma_theory(model, params), "T": T}
    try:
        report["gamma_fit"] = cl.decoherence_rate_fit(me.times, me.offdiag_abs).__dict__
    except mc.InvalidInputError as exc:
        report["gamma_fit_error"] = str(exc)
    w.json("report.json", report)
    return EXIT_OK


def run_scan(cfg: RunConfig, w: ArtifactWriter) -> int:
    model, params = hilbert_model(cfg), collapse_params(cfg)
    num = cfg.section("numerics")
    psi0 = initial_state(cfg, model)
    res = cl.amplification_scan(cfg.section("masses"), model, params, psi0, source=num["source"], dt=num["dt"],
                                horizon=num["horizon"], n_traj=num["n_traj"], master_seed=cfg.seed,
                                threads=cfg.threads)
    w.csv("scan.csv", res.csv_rows())
    w.json("scan.json", {"rows": res.rows, "exponent": res.exponent, "exponent_se": res.exponent_se,
                         "source": num["source"]})
    return EXIT_OK


EXPERIMENT_RUNNERS = {
    "evolve": run_evolve,
    "sample": run_sample,
    "collapse": run_collapse,
    "master": run_master,
    "scan": run_scan,
}


def run(cfg: RunConfig) -> int:
    """Execute one experiment; returns the documented exit code."""
    started = _now()
    writer = ArtifactWriter(cfg.output_dir)
    try:
        code = EXPERIMENT_RUNNERS[cfg.experiment](cfg, writer)
    except ConfigError:
        raise
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        code = EXIT_NUMERICAL
    except cl.InconclusiveRunError as exc:
        log.error("inconclusive run: %s", exc)
        code = EXIT_INCONCLUSIVE
    write_manifest(writer, cfg, started)
    return code
