"""
Run configuration for the command-line tool.

A configuration is a JSON document (``"format": "vibroimpact-run"``,
``"version": 1``). Missing keys take the defaults in
:data:`DEFAULTS`; ``--set key.path=value`` overrides any key with a
JSON literal. Excitation levels and clearances are given in units of
``length_scale`` (the beam length for the generated model).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from . import presets
from .model import TwinBeamSpec

__all__ = ["ConfigError", "RunConfig", "DEFAULTS", "load_config", "CONFIG_FORMAT"]

CONFIG_FORMAT = "vibroimpact-run"
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "format": CONFIG_FORMAT,
    "version": CONFIG_VERSION,
    "model": {
        "source": "twin_beam",
        "twin_beam": {},
        "files": None,
        "point_masses": [],
        "elastic_layers": [],
        "length_scale": None,
    },
    "reduction": {"n_modes": presets.N_MODES},
    "damping": {"ratios": list(presets.DAMPING_RATIOS), "overrides": {}},
    "contact": {"mu": presets.MU, "tol_rel": 1e-8, "max_iter": 500, "rho": 0.8},
    "excitation": {
        "tests": [
            {"level": lv, "direction": d, "clearance": c} for lv, d, c in presets.TEST_SEQUENCE
        ],
        "grid": {"start": presets.FREQ_BAND[0], "stop": presets.FREQ_BAND[1],
                 "step": presets.FREQ_STEP},
        "wait_periods": 200,
        "record_periods": 100,
        "max_extensions": 4,
        "settle_tol": 0.02,
        "start": "linear",
        "on_error": "abort",
        "omega_ref": None,
    },
    "integrator": {"steps_per_period": presets.STEPS_PER_PERIOD},
    "convergence": {
        "level": 6e-5,
        "clearance": presets.CLEARANCE,
        "omega_ratio": 1.0,
        "settle_periods": 300,
        "horizon_periods": 5,
        "steps_per_period": [250, 500, 1000, 2000, 4000],
        "n_modes": [],
        "modes_steps_per_period": 2000,
        "modes_record_periods": 4000,
    },
    "analysis": {
        "channels": ["v_tip_upper"],
        "freq_range": [0.5, 10.0],
        "n_freqs": 64,
    },
    "updating": {
        "model": "elastic_root",
        "params0": [7.0, 7.0],
        "bounds": [[6.0, 9.0], [6.0, 9.0]],
        "targets": [],
        "weights": None,
        "n_modes": None,
        "population": 32,
        "generations": 200,
    },
    "outputs": {"directory": "vibroimpact-out", "stride": 10, "series": True,
                "plot_scripts": True},
    "seed": 0,
    "workers": 1,
}


def _merge(base: dict, upd: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in upd.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("overrides",
                                                                           "twin_beam"):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


@dataclass
class RunConfig:
    """Validated configuration; ``data`` holds the merged JSON tree."""

    data: dict
    base_dir: Path = Path(".")

    def __getitem__(self, key):
        return self.data[key]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def twin_beam_spec(self) -> TwinBeamSpec:
        try:
            return TwinBeamSpec(**self.data["model"]["twin_beam"])
        except TypeError as exc:
            raise ConfigError(f"model.twin_beam: {exc}") from None

    @property
    def length_scale(self) -> float:
        ls = self.data["model"]["length_scale"]
        if ls is not None:
            return float(ls)
        if self.data["model"]["source"] == "twin_beam":
            return self.twin_beam_spec().length
        return 1.0

    def validate(self, require_files: bool = True) -> "RunConfig":
        d = self.data
        if d.get("format") != CONFIG_FORMAT:
            raise ConfigError(f"config format must be {CONFIG_FORMAT!r}")
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')!r}")
        m = d["model"]
        if m["source"] == "twin_beam":
            self.twin_beam_spec()
        elif m["source"] == "files":
            files = m["files"] or {}
            for key in ("M", "K", "metadata"):
                if key not in files:
                    raise ConfigError(f"model.files.{key} is required for source 'files'")
            for key in ("M", "K", "metadata"):
                if require_files and not self.path(files[key]).exists():
                    raise ConfigError(f"model file not found: {self.path(files[key])}")
        else:
            raise ConfigError("model.source must be 'twin_beam' or 'files'")
        if m["length_scale"] is not None and not float(m["length_scale"]) > 0:
            raise ConfigError("model.length_scale must be positive")
        n = d["reduction"]["n_modes"]
        if not isinstance(n, int) or n < 1:
            raise ConfigError("reduction.n_modes must be a positive integer")
        if any(float(r) < 0 or float(r) >= 1 for r in d["damping"]["ratios"]):
            raise ConfigError("damping ratios must lie in [0, 1)")
        c = d["contact"]
        if c["mu"] < 0 or not c["tol_rel"] > 0 or c["max_iter"] < 1 or not 0 < c["rho"] <= 1:
            raise ConfigError("contact settings out of range")
        e = d["excitation"]
        for i, t in enumerate(e["tests"]):
            if set(t) - {"level", "direction", "clearance"}:
                raise ConfigError(f"excitation.tests[{i}] has unknown keys")
            if t.get("direction") not in ("up", "down"):
                raise ConfigError(f"excitation.tests[{i}].direction must be 'up' or 'down'")
            if float(t.get("level", -1)) < 0:
                raise ConfigError(f"excitation.tests[{i}].level must be non-negative")
        g = e["grid"]
        if isinstance(g, dict):
            if not (0 < g["start"] < g["stop"] and g["step"] > 0):
                raise ConfigError("excitation.grid needs 0 < start < stop and step > 0")
        elif not (isinstance(g, list) and g and all(float(x) > 0 for x in g)):
            raise ConfigError("excitation.grid must be {start, stop, step} or a list")
        if e["wait_periods"] < 1 or e["record_periods"] < 1:
            raise ConfigError("wait_periods and record_periods must be at least 1")
        if d["integrator"]["steps_per_period"] < 2:
            raise ConfigError("integrator.steps_per_period must be at least 2")
        if d["outputs"]["stride"] < 1:
            raise ConfigError("outputs.stride must be at least 1")
        if not isinstance(d["workers"], int) or d["workers"] < 1:
            raise ConfigError("workers must be a positive integer")
        if not isinstance(d["seed"], int):
            raise ConfigError("seed must be an integer")
        return self

    def frequency_grid(self) -> list[float]:
        g = self.data["excitation"]["grid"]
        if isinstance(g, dict):
            return [float(x) for x in presets.frequency_grid((g["start"], g["stop"]), g["step"])]
        return sorted(float(x) for x in g)


def load_config(path=None, overrides=(), require_files: bool = True) -> RunConfig:
    """Defaults, then the file at ``path`` (optional), then ``overrides``."""
    data = copy.deepcopy(DEFAULTS)
    base_dir = Path(".")
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        data = _merge(data, user)
        base_dir = path.parent
    for item in overrides:
        keys, value = _parse_override(item)
        node = data
        for k in keys[:-1]:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"unknown configuration key {'.'.join(keys)!r}")
            node = node[k]
        if not isinstance(node, dict) or (keys[-1] not in node and keys[-2:-1] != ["twin_beam"]):
            raise ConfigError(f"unknown configuration key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return RunConfig(data, base_dir).validate(require_files)
