"""Configuration loading, bit-exact trajectory files and report bundles.

Trajectories are stored as JSON with every float written through
``float.hex`` so that a save/load round trip reproduces the exact bits.  A
sidecar manifest records the SHA-256 of the run configuration and of the
payload file; loading refuses a manifest whose hashes no longer match
unless ``force`` is set.

Report bundles are canonical JSON (sorted keys, fixed separators).  Wall
clock timings go to a separate ``timing.json`` so that two runs with the
same configuration and seed produce byte-identical ``report.json`` files.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .core import Trajectory

SCHEMA_VERSION = 1
REFERENCE_MAP_VERSION = "1"
TRAJECTORY_FORMAT = "envar-trajectory/1"
SEED_ENV = "ENVAR_SEED"

DEFAULTS: dict[str, Any] = {
    "euler_korteweg": {
        "length": 1.0,
        "n_nodes": 64,
        "gamma": 2.0,
        "n_modes": 16,
        "rho_mean": 1.0,
        "rho_amplitude": 0.1,
        "rho_mode": 1,
        "momentum_amplitude": 0.0,
    },
    "binormal": {"n_vertices": 32, "radius": 1.0, "weight_resolution": 24},
    "solver": {"tol": 1e-8, "max_iter": 100_000, "n_samples": 64, "seed": 0, "newton_tol": 1e-11},
    "family": {"size": 16, "seed": 0},
    "verify": {"tol": 1e-6, "mode": "prolongation", "max_pairs": 10_000},
    "restart_times": [],
    "selection": {"functional": "integrated_aux_energy", "candidates": 10},
    "output_dir": "envar-out",
}


class ConfigError(ValueError):
    """Malformed configuration; ``pointer`` names the offending key."""

    def __init__(self, pointer: str, message: str) -> None:
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


class ManifestMismatch(RuntimeError):
    """Stored hashes disagree with the files they describe."""


def load_schema() -> dict:
    return json.loads(resources.files("envar").joinpath("run_config.schema.json").read_text())


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate_config(raw: Any, environ: dict | None = None) -> dict:
    """Schema-check ``raw``, fill defaults, apply the seed override.

    Raises :class:`ConfigError` pointing at the first offending key.
    """
    if not isinstance(raw, dict):
        raise ConfigError("/", "configuration must be a JSON object")
    errors = sorted(jsonschema.Draft202012Validator(load_schema()).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        err = errors[0]
        path = list(err.path)
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            path = path + missing[:1]
        elif err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            path = path + extra[:1]
        raise ConfigError(_pointer(path), err.message)
    cfg = _merge(DEFAULTS, raw)
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV) not in (None, ""):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("/solver/seed", f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        if seed < 0:
            raise ConfigError("/solver/seed", f"{SEED_ENV} must be non-negative")
        cfg["solver"]["seed"] = seed
        cfg["family"]["seed"] = seed
    for t in cfg["restart_times"]:
        if t > cfg["horizon"]:
            raise ConfigError("/restart_times", f"restart time {t} lies beyond the horizon")
    return cfg


def load_config(path: str | Path, environ: dict | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("/", f"invalid JSON: {exc}") from None
    return validate_config(raw, environ)


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def to_jsonable(obj: Any) -> Any:
    """Plain JSON types; non-finite floats become the strings ``inf``/``-inf``/``nan``."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else repr(value)
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def hex_encode(values: np.ndarray) -> list:
    arr = np.asarray(values, float)
    if arr.ndim == 0:
        return float(arr).hex()
    return [hex_encode(v) for v in arr]


def hex_decode(values: Any) -> np.ndarray:
    if isinstance(values, str):
        return np.float64(float.fromhex(values))
    return np.array([hex_decode(v) for v in values], dtype=float)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_trajectory(directory: str | Path, traj: Trajectory, cfg: dict | None = None) -> Path:
    """Write ``trajectory.json`` and ``manifest.json`` into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": TRAJECTORY_FORMAT,
        "times": hex_encode(traj.times),
        "states": hex_encode(traj.states) if len(traj.states[0]) else [[] for _ in traj.times],
        "aux_energy": hex_encode(traj.aux_energy),
        "certificates": hex_encode(traj.certificates) if len(traj.certificates) else [],
        "provenance": to_jsonable(traj.provenance),
    }
    data_path = out / "trajectory.json"
    data_path.write_text(json.dumps(payload, sort_keys=True, indent=1))
    cfg = cfg or {}
    manifest = {
        "format": TRAJECTORY_FORMAT,
        "config": to_jsonable(cfg),
        "config_hash": config_hash(cfg),
        "payload": data_path.name,
        "payload_sha256": _sha256(data_path),
        "n_frames": len(traj),
        "state_dim": int(traj.states.shape[1]),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return out


def load_trajectory(directory: str | Path, force: bool = False, expected_config: dict | None = None) -> tuple[Trajectory, dict]:
    """Read a trajectory saved by :func:`save_trajectory`.

    Returns the trajectory and the stored configuration.  Mismatching hashes
    raise :class:`ManifestMismatch` unless ``force`` is set.
    """
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    problems = []
    if manifest.get("format") != TRAJECTORY_FORMAT:
        problems.append(f"unknown format {manifest.get('format')!r}")
    cfg = manifest.get("config", {})
    if config_hash(cfg) != manifest.get("config_hash"):
        problems.append("config hash does not match the stored configuration")
    if expected_config is not None and config_hash(expected_config) != manifest.get("config_hash"):
        problems.append("trajectory was produced with a different configuration")
    data_path = src / manifest.get("payload", "trajectory.json")
    if _sha256(data_path) != manifest.get("payload_sha256"):
        problems.append("payload hash does not match the manifest")
    if problems and not force:
        raise ManifestMismatch("; ".join(problems))
    payload = json.loads(data_path.read_text())
    states = hex_decode(payload["states"])
    traj = Trajectory(
        hex_decode(payload["times"]),
        states.reshape(len(payload["times"]), -1),
        hex_decode(payload["aux_energy"]),
        payload.get("provenance", {}),
        hex_decode(payload["certificates"]) if payload["certificates"] else np.zeros(0),
    )
    return traj, cfg


def check(value: float, tolerance: float, passed: bool | None = None, relation: str = "<=") -> dict:
    """One numeric outcome with its tolerance and verdict."""
    value = float(value)
    if passed is None:
        passed = value <= tolerance if relation == "<=" else value >= tolerance
    return {"value": value, "tolerance": float(tolerance), "relation": relation, "pass": bool(passed)}


@dataclass
class ReportBundle:
    """Deterministic report with a separate timing record."""

    kind: str
    config_hash: str
    checks: dict[str, dict] = field(default_factory=dict)
    data: dict[str, Any] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks.values())

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "reference_map_version": REFERENCE_MAP_VERSION,
            "kind": self.kind,
            "config_hash": self.config_hash,
            "pass": self.passed,
            "checks": self.checks,
            "data": self.data,
        }

    def dumps(self) -> str:
        return json.dumps(to_jsonable(self.to_dict()), sort_keys=True, indent=1, allow_nan=False) + "\n"

    def write(self, directory: str | Path, name: str = "report") -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"{name}.json"
        path.write_text(self.dumps())
        (out / f"{name}.timing.json").write_text(json.dumps(to_jsonable(self.timing), sort_keys=True, indent=1) + "\n")
        return path


SERIES_COLUMNS = ("t", "E", "energy_of_U", "defect", "mass_or_length")


def write_series_csv(path: str | Path, times, aux, energies, mass_or_length) -> Path:
    """Plot-ready series; floats are written with ``repr`` for exactness."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SERIES_COLUMNS)
        for t, e, en, q in zip(times, aux, energies, mass_or_length):
            writer.writerow([repr(float(t)), repr(float(e)), repr(float(en)), repr(float(e) - float(en)), repr(float(q))])
    return path
