"""Experiment configuration: TOML in, validated dataclass out."""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .data import (PRESETS, covariates_from_config, preset, second_layer_scale, target_from_config)
from .dynamics import FlowSchedule, ProblemSpec
from .kernels import link_from_config

PIPELINES = ("flow", "couple", "reduce", "potential", "diagnose")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str
    pipeline: str
    problem: ProblemSpec
    schedule: FlowSchedule
    widths: list
    M: int | None
    seeds: dict
    repeats: int
    diagnostics: dict
    reduce: dict
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)

    def content_hash(self) -> str:
        """git-style blob hash of the canonical JSON of the raw config."""
        body = canonical_json(self.raw).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    def with_seeds(self, init: int, data: int, batch: int, repeats: int = 1) -> "ExperimentConfig":
        raw = copy.deepcopy(self.raw)
        raw["seeds"] = {"init": init, "data": data, "batch": batch, "repeats": repeats}
        return parse_config(raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _problem(raw: dict, m: int, n_train: int) -> ProblemSpec:
    p = raw.get("problem")
    if not isinstance(p, dict):
        raise ConfigError("missing [problem] table")
    try:
        if "preset" in p:
            if p["preset"] not in PRESETS:
                raise ConfigError(f"unknown preset {p['preset']!r}; choose from {PRESETS}")
            s = preset(p["preset"], p.get("d"), int(p.get("seed", 0)))
            prob = ProblemSpec.from_setting(s, m, n_train)
            if "second_layer" in p:
                prob.second_layer = second_layer_scale(p["second_layer"])
            return prob
        cov = covariates_from_config(p["covariates"])
        tgt = target_from_config(p["target"])
        act = link_from_config(p["activation"])
        return ProblemSpec(cov, tgt, act, m, n_train, second_layer_scale(p.get("second_layer")),
                           raw.get("name", "problem"))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [problem]: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table")
    name = raw.get("name", "experiment")
    pipeline = raw.get("pipeline", "flow")
    if pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {PIPELINES}, got {pipeline!r}")
    sch = raw.get("schedule", {})
    if not isinstance(sch, dict):
        raise ConfigError("[schedule] must be a table")
    cp = raw.get("coupling", {})
    if not isinstance(cp, dict) or not isinstance(raw.get("problem"), dict):
        raise ConfigError("[problem] and [coupling] must be tables")
    try:
        widths = [int(w) for w in cp.get("widths", [])]
        m = int(raw["problem"].get("m", widths[0] if widths else 64))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [coupling] widths or problem.m: {exc}") from exc
    n_train = int(sch.get("n_train", 0))
    problem = _problem(raw, m, n_train)
    try:
        schedule = FlowSchedule(eta=float(sch.get("eta", 0.01)), n_steps=int(sch.get("steps", 100)),
                                record_every=int(sch.get("record_every", 1)),
                                batch_size=int(sch.get("batch_size", 0)), mode=str(sch.get("mode", "population")),
                                store_weights=bool(sch.get("store_weights", pipeline in ("diagnose",))),
                                checkpoint_every=int(sch.get("checkpoint_every", 0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [schedule]: {exc}") from exc
    if schedule.mode == "empirical" and n_train < 1:
        raise ConfigError("empirical mode needs schedule.n_train >= 1")
    if pipeline in ("couple", "potential") and not widths:
        raise ConfigError("[coupling] widths must be a nonempty list")
    M = cp.get("M")
    if M is not None and widths and int(M) <= max(widths):
        raise ConfigError(f"coupling.M={M} must exceed the largest width {max(widths)}")
    seeds = raw.get("seeds", {})
    if not isinstance(seeds, dict) or not all(k in seeds for k in ("init", "data", "batch")):
        raise ConfigError("[seeds] must set init, data and batch explicitly")
    try:
        seeds_i = {k: int(seeds[k]) for k in ("init", "data", "batch")}
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [seeds]: {exc}") from exc
    repeats = int(seeds.get("repeats", 1))
    if repeats < 1:
        raise ConfigError("seeds.repeats must be >= 1")
    diag = {"hessians": True, "j_stats": False, "potential": False, "reduced": False, "tau": 0.2,
            "n_particles": 32}
    diag.update(raw.get("diagnostics", {}))
    red = {"d": [16, 32, 64], "kstar": 4, "delta": 0.3, "eta": 0.01}
    red.update(raw.get("reduce", {}))
    out = raw.get("output", {}).get("dir", f"runs/{name}")
    return ExperimentConfig(name, pipeline, problem, schedule, widths, None if M is None else int(M), seeds_i,
                            repeats, diag, red, out, copy.deepcopy(raw))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad TOML in {path}: {exc}") from exc
    return parse_config(raw)
