"""Experiment configuration: JSON documents with optional named presets."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .lattice_walk import Convention, WalkConfig

SCHEMA_VERSION = 1

_site = {"type": "array", "items": {"type": "integer"}, "minItems": 1, "maxItems": 3}
_sites = {"type": "array", "items": _site, "minItems": 1}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_pos = {"type": "number", "exclusiveMinimum": 0}
_logspace = {
    "type": "object",
    "properties": {
        "start": {"type": "number"},
        "stop": {"type": "number"},
        "num": {"type": "integer", "minimum": 1},
    },
    "required": ["start", "stop", "num"],
    "additionalProperties": False,
}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "description": {"type": "string"},
        "command": {"enum": ["walk", "fit", "concentration", "queue"]},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "walk": {
            "type": "object",
            "properties": {
                "dimension": {"enum": [1, 2, 3]},
                "p": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "delta": _pos,
                "tau": _pos,
            },
            "additionalProperties": False,
        },
        "absorber": {
            "type": "object",
            "properties": {
                "sites": _sites,
                "at_observation": {"type": "boolean"},
                "q": {"type": "array", "items": _prob, "minItems": 1},
                "convention": {"enum": [c.value for c in Convention]},
            },
            "additionalProperties": False,
        },
        "observation": {
            "type": "object",
            "properties": {
                "sites": _sites,
                "n_min": {"type": "integer", "minimum": 0},
                "n_max": {"type": "integer", "minimum": 1},
                "radius": {"type": ["integer", "null"], "minimum": 1},
            },
            "additionalProperties": False,
        },
        "monte_carlo": {
            "type": "object",
            "properties": {"walkers": {"type": "integer", "minimum": 0}},
            "additionalProperties": False,
        },
        "fit": {
            "type": "object",
            "properties": {
                "q_grid": {"type": "array", "items": _prob, "minItems": 1},
                "restarts": {"type": "integer", "minimum": 0},
                "n_max": {"type": ["integer", "null"], "minimum": 1},
            },
            "additionalProperties": False,
        },
        "emission": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["instantaneous", "continuous-constant"]},
                "N": {"type": "number", "minimum": 0},
                "Q": {"type": "number", "minimum": 0},
                "exact_free_endpoint": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "receptor": {
            "type": "object",
            "properties": {
                "sites": _sites,
                "T_trafficking": {"type": "array", "items": _pos, "minItems": 1},
                "kappa": {"type": "number", "minimum": 0},
                "Q": {"oneOf": [{"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1}, _logspace]},
                "tol": _pos,
                "max_iter": {"type": "integer", "minimum": 1},
                "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
            "additionalProperties": False,
        },
        "param_table": {"type": ["string", "null"]},
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string"}, "plot": {"type": "boolean"}},
            "additionalProperties": False,
        },
        "presets": {"type": "object", "additionalProperties": {"type": "object"}},
    },
    "additionalProperties": False,
}

DEFAULTS: dict[str, Any] = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "walk": {"dimension": 1, "p": 0.5, "delta": 1.0, "tau": 1.0},
    "absorber": {"at_observation": False, "q": [0.5], "convention": "exempt-final-arrival"},
    "observation": {"n_min": 0, "n_max": 200, "radius": None},
    "monte_carlo": {"walkers": 0},
    "fit": {"q_grid": [0.0, 0.25, 0.5, 0.75, 1.0], "restarts": 8, "n_max": None},
    "emission": {"mode": "continuous-constant", "N": 1.0, "Q": 1.0, "exact_free_endpoint": True},
    "receptor": {
        "T_trafficking": [1.0],
        "kappa": 1.0,
        "Q": [1.0],
        "tol": 1e-8,
        "max_iter": 500,
        "damping": 0.5,
    },
    "param_table": None,
    "output": {"dir": "absorbmc-out", "plot": False},
}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _validate(doc: dict, where: str):
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = jsonschema.exceptions.best_match(errors)
        path = ".".join(str(p) for p in e.absolute_path)
        raise ConfigError(f"{where}{path}" if path else where.rstrip("."), e.message)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully defaulted configuration."""

    raw: dict
    preset: str | None = None

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def walk(self) -> WalkConfig:
        w = self.raw["walk"]
        return WalkConfig(w["dimension"], w["p"], w["delta"], w["tau"])

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def convention(self) -> Convention:
        return Convention(self.raw["absorber"]["convention"])

    def _sites(self, section: str) -> list[tuple[int, ...]]:
        if "sites" not in self.raw[section]:
            raise ConfigError(f"{section}.sites", "required for this command")
        return [tuple(s) for s in self.raw[section]["sites"]]

    def observation_sites(self) -> list[tuple[int, ...]]:
        return self._sites("observation")

    def absorber_sites(self, x: tuple[int, ...]) -> list[tuple[int, ...]]:
        if self.raw["absorber"]["at_observation"]:
            return [x]
        return self._sites("absorber")

    def fit_cases(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        return [(x, m) for x in self.observation_sites() for m in self.absorber_sites(x)]

    def receptor_sites(self) -> list[tuple[int, ...]]:
        return self._sites("receptor")

    def Q_grid(self) -> list[float]:
        Q = self.raw["receptor"]["Q"]
        if isinstance(Q, dict):
            return [float(v) for v in np.logspace(Q["start"], Q["stop"], Q["num"])]
        return [float(v) for v in Q]

    def to_json(self) -> str:
        doc = {k: v for k, v in self.raw.items() if k != "presets"}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _cross_check(doc: dict):
    d = doc["walk"]["dimension"]
    for sec in ("absorber", "observation", "receptor"):
        name = f"{sec}.sites"
        for i, s in enumerate(doc[sec].get("sites", [])):
            if len(s) != d:
                raise ConfigError(f"{name}.{i}", f"site {s} has {len(s)} coordinates but walk.dimension is {d}")
    for i, s in enumerate(doc["receptor"].get("sites", [])):
        if not any(s):
            raise ConfigError(f"receptor.sites.{i}", "receptor cannot sit at the release point")
    obs = doc["observation"]
    if obs["n_min"] > obs["n_max"]:
        raise ConfigError("observation.n_min", f"n_min={obs['n_min']} exceeds n_max={obs['n_max']}")
    grid = doc["fit"]["q_grid"]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("fit.q_grid", "must be strictly increasing")
    if doc["walk"]["p"] != 0.5 and d > 1:
        raise ConfigError("walk.p", "biased steps are only supported in 1-D")


def load_config(source: str | Path | dict | None = None, preset: str | None = None) -> ExperimentConfig:
    """Load, merge a preset over the base document, default and validate.

    ``source`` may be a path, a parsed document or None for the bundled
    preset collection.
    """
    if source is None:
        text = resources.files("absorbmc").joinpath("data/presets.json").read_text()
        doc = json.loads(text)
    elif isinstance(source, dict):
        doc = copy.deepcopy(source)
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError("", f"cannot read config {source}: {exc.strerror}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"{source} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    _validate(doc, "")
    presets = doc.get("presets", {})
    base = {k: v for k, v in doc.items() if k != "presets"}
    if preset is not None:
        if preset not in presets:
            known = ", ".join(sorted(presets)) or "none"
            raise ConfigError("presets", f"unknown preset {preset!r} (available: {known})")
        _validate(presets[preset], f"presets.{preset}.")
        base = _merge(base, presets[preset])
    full = _merge(DEFAULTS, base)
    _validate(full, "")
    _cross_check(full)
    return ExperimentConfig(full, preset)


def bundled_presets() -> list[str]:
    text = resources.files("absorbmc").joinpath("data/presets.json").read_text()
    return sorted(json.loads(text).get("presets", {}))
