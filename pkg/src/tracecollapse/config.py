"""Run configuration: a single strict JSON document per run."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import jsonschema

EXPERIMENTS = ("evolve", "sample", "collapse", "master", "scan")
SEED_ENV = "TRACECOLLAPSE_SEED"
DEFAULT_SEED = 0


class ConfigError(ValueError):
    """Every schema violation found, one message per entry in ``errors``."""

    exit_code = 2

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_int0 = {"type": "integer", "minimum": 0}


def _obj(props: dict, required: tuple = ()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_trace_model = _obj({
    "kind": {"enum": ["free", "harmonic", "quartic", "operator_time"]},
    "n_dof": _int1,
    "dim": {"type": "integer", "minimum": 1, "maximum": 64},
    "mass": _pos,
    "omega": _pos,
    "g": _pos,
    "coupling": _nonneg,
    "init_scale": _pos,
}, ("kind",))

_hilbert_model = _obj({
    "kind": {"enum": ["two-level", "lattice-position", "truncated-oscillator"]},
    "q1": _num, "q2": _num, "delta": _num,
    "n_sites": {"type": "integer", "minimum": 2, "maximum": 64},
    "spacing": _pos, "hopping": _num,
    "n": {"type": "integer", "minimum": 4, "maximum": 64},
    "mass": _pos, "omega": _pos,
}, ("kind",))

_collapse_params = _obj({"hbar": _pos, "lambda0": _nonneg, "mass": _nonneg, "m0": _pos})

_psi0 = _obj({
    "weights": {"type": "array", "items": _nonneg, "minItems": 2},
    "coherent": _num,
})

_common = {
    "experiment": {"enum": list(EXPERIMENTS)},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
    "output_dir": {"type": "string", "minLength": 1},
    "threads": {"anyOf": [_int1, {"const": "auto"}]},
}

SCHEMAS = {
    "evolve": _obj({
        **_common,
        "model": _trace_model,
        "numerics": _obj({"dt": _pos, "steps": _int0, "stride": _int1,
                          "integrator": {"enum": ["leapfrog", "rk4"]}, "snapshots": {"type": "boolean"}}),
    }, ("experiment", "model")),
    "sample": _obj({
        **_common,
        "model": _trace_model,
        "numerics": _obj({"tau": _pos, "lambda_theta": _num, "n_samples": {"type": "integer", "minimum": 100},
                          "burn_in": _int0, "thinning": _int1, "proposal_scale": _nonneg, "n_chains": _int1}),
        "analysis": _obj({"ward_tests": {"type": "array", "items": {"enum": ["q2", "qp_sym", "q3", "q4"]}},
                          "charge": {"type": "boolean"}, "trace_csv": {"type": "boolean"}}),
    }, ("experiment", "model")),
    "collapse": _obj({
        **_common,
        "model": _hilbert_model,
        "collapse": _collapse_params,
        "psi0": _psi0,
        "numerics": _obj({"dt": _pos, "T": {"anyOf": [_pos, {"type": "null"}]}, "n_traj": _int1, "stride": _int1}),
        "analysis": _obj({"born": {"type": "boolean"}, "decoherence": {"type": "boolean"},
                          "expected": {"type": "array", "items": _nonneg}}),
    }, ("experiment", "model")),
    "master": _obj({
        **_common,
        "model": _hilbert_model,
        "collapse": _collapse_params,
        "psi0": _psi0,
        "numerics": _obj({"dt": _pos, "T": {"anyOf": [_pos, {"type": "null"}]}, "stride": _int1}),
    }, ("experiment", "model")),
    "scan": _obj({
        **_common,
        "model": _hilbert_model,
        "collapse": _collapse_params,
        "psi0": _psi0,
        "masses": {"type": "array", "items": _nonneg, "minItems": 1},
        "numerics": _obj({"dt": _pos, "horizon": _pos, "n_traj": _int1,
                          "source": {"enum": ["master", "ensemble"]}}),
    }, ("experiment", "model", "masses")),
}

_TRACE_MODEL_DEFAULTS = {"n_dof": 1, "dim": 2, "mass": 1.0, "omega": 1.0, "init_scale": 0.5}
_QUARTIC_EXTRA = {"g": 0.1, "coupling": 0.05}
_HILBERT_DEFAULTS = {
    "two-level": {"q1": 1.0, "q2": -1.0, "delta": 0.0},
    "lattice-position": {"n_sites": 3, "spacing": 1.0, "hopping": 0.0},
    "truncated-oscillator": {"n": 32, "mass": 1.0, "omega": 1.0},
}
_COLLAPSE_DEFAULTS = {"hbar": 1.0, "lambda0": 1.0, "mass": 1.0, "m0": 1.0}

DEFAULTS = {
    "evolve": {"numerics": {"dt": 1e-3, "steps": 10_000, "stride": 100, "integrator": "leapfrog", "snapshots": False}},
    "sample": {"numerics": {"tau": 1.0, "lambda_theta": 0.0, "n_samples": 100_000, "burn_in": 10_000,
                            "thinning": 10, "proposal_scale": 0.5, "n_chains": 100},
               "analysis": {"ward_tests": ["q2", "qp_sym", "q3"], "charge": True, "trace_csv": False}},
    "collapse": {"numerics": {"dt": 2e-3, "T": None, "n_traj": 1000, "stride": 10},
                 "analysis": {"born": True, "decoherence": True}},
    "master": {"numerics": {"dt": 1e-3, "T": None, "stride": 10}},
    "scan": {"numerics": {"dt": 1e-3, "horizon": 1.5, "n_traj": 2000, "source": "master"}},
}


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @property
    def experiment(self) -> str:
        return self.data["experiment"]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.data["output_dir"])

    @property
    def threads(self) -> int:
        t = self.data["threads"]
        return max(1, os.cpu_count() or 1) if t == "auto" else int(t)

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def to_json(self) -> str:
        return canonical_json(self.data)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def replace(self, **top) -> "RunConfig":
        d = self.to_dict()
        d.update({k: v for k, v in top.items() if v is not None})
        return validate_config(d)


def canonical_json(d: Any) -> str:
    return json.dumps(d, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        parts.append(missing)
    if err.validator == "additionalProperties":
        return ".".join(parts) or "<root>"
    return ".".join(p for p in parts if p) or "<root>"


def _fill(d: dict, defaults: Mapping) -> None:
    for k, v in defaults.items():
        if k not in d:
            d[k] = copy.deepcopy(v)
        elif isinstance(v, Mapping) and isinstance(d[k], dict):
            _fill(d[k], v)


def apply_defaults(raw: Mapping, env: Mapping[str, str] | None = None) -> dict:
    d = copy.deepcopy(dict(raw))
    exp = d["experiment"]
    if "seed" not in d:
        env = os.environ if env is None else env
        s = env.get(SEED_ENV)
        d["seed"] = int(s) if s not in (None, "") else DEFAULT_SEED
    d.setdefault("output_dir", f"runs/{exp}")
    d.setdefault("threads", 1)
    _fill(d, DEFAULTS[exp])
    model = d["model"]
    if exp in ("evolve", "sample"):
        if model["kind"] == "operator_time":
            model.setdefault("n_dof", 2)
        _fill(model, _TRACE_MODEL_DEFAULTS)
        if model["kind"] == "quartic":
            _fill(model, _QUARTIC_EXTRA)
        if model["kind"] == "operator_time":
            model.setdefault("coupling", 0.05)
    else:
        _fill(model, _HILBERT_DEFAULTS[model["kind"]])
        _fill(d.setdefault("collapse", {}), _COLLAPSE_DEFAULTS)
        if "psi0" not in d:
            d["psi0"] = {"coherent": 0.5} if model["kind"] == "truncated-oscillator" else {"weights": [0.5, 0.5]}
    return d


def _semantic_errors(d: dict) -> list[str]:
    errs = []
    exp = d["experiment"]
    model = d["model"]
    if exp in ("collapse", "master", "scan"):
        kind = model["kind"]
        dim = {"two-level": 2, "lattice-position": model.get("n_sites"), "truncated-oscillator": model.get("n")}[kind]
        psi0 = d["psi0"]
        if ("weights" in psi0) == ("coherent" in psi0):
            errs.append("psi0: give exactly one of 'weights' or 'coherent'")
        elif "weights" in psi0:
            if len(psi0["weights"]) != dim:
                errs.append(f"psi0.weights: expected {dim} entries, got {len(psi0['weights'])}")
            elif sum(psi0["weights"]) <= 0:
                errs.append("psi0.weights: must not all be zero")
        elif kind != "truncated-oscillator":
            errs.append("psi0.coherent: only valid for the truncated-oscillator model")
        if kind == "two-level" and model["q1"] == model["q2"]:
            errs.append("model.q2: pointer values must differ")
        exp_w = d.get("analysis", {}).get("expected")
        if exp_w is not None and len(exp_w) != dim:
            errs.append(f"analysis.expected: expected {dim} entries")
    if exp == "sample":
        if model["kind"] not in ("harmonic", "quartic"):
            errs.append(f"model.kind: {model['kind']!r} is not confining and cannot be sampled")
    if exp == "evolve" and model["kind"] == "operator_time" and model["n_dof"] != 2:
        errs.append("model.n_dof: operator_time model has exactly 2 slots")
    return errs


def validate_config(raw: Any, env: Mapping[str, str] | None = None) -> RunConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError(["<root>: config must be a JSON object"])
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError([f"experiment: unknown experiment {exp!r}; expected one of {list(EXPERIMENTS)}"])
    validator = jsonschema.Draft202012Validator(SCHEMAS[exp])
    errs = sorted(validator.iter_errors(raw), key=lambda e: list(map(str, e.absolute_path)))
    if errs:
        raise ConfigError([f"{_path(e)}: {e.message}" for e in errs])
    d = apply_defaults(raw, env)
    post = sorted(validator.iter_errors(d), key=lambda e: list(map(str, e.absolute_path)))
    msgs = [f"{_path(e)}: {e.message}" for e in post] + _semantic_errors(d)
    if msgs:
        raise ConfigError(msgs)
    return RunConfig(d)


def parse_config(path: str | os.PathLike, env: Mapping[str, str] | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"config: file not found: {p}"])
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: invalid JSON ({exc})"]) from exc
    return validate_config(raw, env)
