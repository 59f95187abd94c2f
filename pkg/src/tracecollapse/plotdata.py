"""Long-format ``(series, t, value)`` tables from run artifacts."""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .runner import ArtifactWriter

PLOT_MANIFEST = "plot_manifest.json"

# artifact -> plot table it feeds
SOURCES = {
    "trajectory.csv": "plot_conservation.csv",
    "ward.csv": "plot_ward.csv",
    "decoherence.csv": "plot_decoherence.csv",
    "born.json": "plot_born.csv",
    "scan.csv": "plot_scan.csv",
    "master.csv": "plot_master.csv",
}
X_COLUMN = {"ward.csv": "component", "decoherence.csv": "t", "born.json": "eigenvalue",
            "scan.csv": "m", "master.csv": "t"}


class MissingArtifactError(FileNotFoundError):
    exit_code = 2


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _conservation(rows: list[dict]) -> list[tuple]:
    out = []
    if rows and "TrH" in rows[0]:
        e0 = float(rows[0]["TrH"])
        for r in rows:
            de = abs(float(r["TrH"]) - e0) / abs(e0) if e0 else abs(float(r["TrH"]) - e0)
            out.append(("energy_drift", r["s"], repr(de)))
        out += [("charge_drift", r["s"], r["charge_drift"]) for r in rows]
    elif rows and "mean_q" in rows[0]:
        for col in ("mean_q", "var_q", "purity", "offdiag_abs", "norm_residual"):
            out += [(col, r["t"], r[col]) for r in rows]
    return out


def _ward(rows: list[dict]) -> list[tuple]:
    out = []
    for r in rows:
        key = f"{r['test_function']}:{r['variable']}"
        out.append((key, r["component"], r["residual"]))
        out.append((key + ":se", r["component"], r["se"]))
    return out


def _decoherence(rows: list[dict]) -> list[tuple]:
    series: dict[str, dict[str, str]] = {}
    for r in rows:
        series.setdefault(r["series"], {})[r["t"]] = r["offdiag_abs"]
    grids = [set(v) for v in series.values()]
    shared = set.intersection(*grids) if grids else set()
    order = sorted(shared, key=float)
    return [(name, t, series[name][t]) for name in sorted(series) for t in order]


def _master(rows: list[dict]) -> list[tuple]:
    out = []
    for col in ("mean_q", "purity", "offdiag_abs", "trace_residual"):
        out += [(col, r["t"], r[col]) for r in rows]
    return out


def _born(report: dict) -> list[tuple]:
    out = []
    for key in ("frequencies", "ci_low", "ci_high", "expected"):
        if key in report:
            out += [(key, repr(float(e)), repr(float(v))) for e, v in zip(report["eigenvalues"], report[key])]
    return out


def _scan(rows: list[dict]) -> list[tuple]:
    rows = sorted(rows, key=lambda r: float(r["m"]))
    out = []
    for col in ("gamma_fit", "gamma_theory", "ratio"):
        out += [(col, r["m"], r[col]) for r in rows]
    return out


def emit_plotdata(artifact_dir: str | Path, out_dir: str | Path | None = None) -> ArtifactWriter:
    """Write one ``plot_*.csv`` per recognised artifact; returns the writer (for the manifest)."""
    src = Path(artifact_dir)
    present = [name for name in SOURCES if (src / name).is_file()]
    if not present:
        raise MissingArtifactError(f"no run artifacts in {src}; expected one of {sorted(SOURCES)}")
    writer = ArtifactWriter(Path(out_dir) if out_dir is not None else src)
    for name in present:
        path = src / name
        x = X_COLUMN.get(name, "t")
        if name == "trajectory.csv":
            raw = _read_csv(path)
            x = "s" if raw and "TrH" in raw[0] else "t"
            rows = _conservation(raw)
        elif name == "ward.csv":
            rows = _ward(_read_csv(path))
        elif name == "decoherence.csv":
            rows = _decoherence(_read_csv(path))
        elif name == "born.json":
            rows = _born(json.loads(path.read_text()))
        elif name == "master.csv":
            rows = _master(_read_csv(path))
        else:
            rows = _scan(_read_csv(path))
        writer.csv(SOURCES[name], [("series", x, "value")] + rows)
    return writer
