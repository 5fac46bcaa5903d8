"""Experiment configuration: flat ``dotted.key = value`` text, one experiment per file.

Values are JSON literals (strings quoted, lists in brackets). Blank lines and
``#`` comments are ignored. Keys under ``<kind>.`` (e.g. ``rate.n_lo``) are
kind-specific options.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Union

from ..analysis import Tolerances
from ..dynamics import RECORD_POLICIES, StepSchedule, admissible
from ..objectives import CATALOG as OBJECTIVES
from ..objectives import Objective, builtin_objective
from ..oracle import CATALOG as NOISES
from ..oracle import NoiseModel, builtin_noise

KINDS = ("rate", "avoidance", "apt", "boundedness", "cooldown", "chung")

_SCHEDULE_KEYS = {
    "kind": "kind",
    "gamma": "gamma",
    "m": "offset_m",
    "p": "exponent_p",
    "switch": "switch_iter",
    "cooldown_gamma": "cooldown_gamma",
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    kind: str
    objective: str = "quadratic"
    objective_params: dict = field(default_factory=dict)
    noise: str = "zero"
    noise_params: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=lambda: {"kind": "power_law", "gamma": 1.0})
    x0: Any = None
    n_iters: int = 1000
    n_runs: int = 1
    base_seed: int = 0
    record_policy: str = "thinned"
    tolerances: Tolerances = field(default_factory=Tolerances)
    output_dir: str = ""
    options: dict = field(default_factory=dict)

    # -- resolution ------------------------------------------------------
    def build_objective(self) -> Objective:
        return builtin_objective(self.objective, self.objective_params)

    def build_noise(self, dim: int) -> NoiseModel:
        params = dict(self.noise_params)
        params.setdefault("dim", dim)
        return builtin_noise(self.noise, params)

    def build_schedule(self) -> StepSchedule:
        kw = {_SCHEDULE_KEYS[k]: v for k, v in self.schedule.items()}
        return StepSchedule(**kw)


def _encode(value) -> str:
    if isinstance(value, float) and math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    return json.dumps(value, sort_keys=True)


def _decode(text: str, key: str, lineno: int):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise ConfigError(f"line {lineno}: value of {key!r} is not a JSON literal: {text!r}") from None


def parse_config_text(text: str) -> ExperimentConfig:
    flat: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = _decode(val.strip(), key, lineno)
    return from_flat(flat)


def from_flat(flat: dict) -> ExperimentConfig:
    flat = dict(flat)
    if "kind" not in flat:
        raise ConfigError("missing 'kind'")
    kind = flat.pop("kind")
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {KINDS}")
    cfg = ExperimentConfig(kind=kind)
    tol_names = {f.name for f in fields(Tolerances)}
    tol_kw, schedule = {}, {}
    for key, val in flat.items():
        head, _, tail = key.partition(".")
        if key == "objective.name":
            cfg.objective = val
        elif key == "noise.name":
            cfg.noise = val
        elif head == "objective" and tail:
            cfg.objective_params[tail] = val
        elif head == "noise" and tail:
            cfg.noise_params[tail] = val
        elif head == "schedule" and tail:
            if tail not in _SCHEDULE_KEYS:
                raise ConfigError(f"unknown schedule key {key!r}")
            schedule[tail] = val
        elif key == "x0":
            cfg.x0 = val
        elif key == "run.n_iters":
            cfg.n_iters = val
        elif key == "run.n_runs":
            cfg.n_runs = val
        elif key == "run.base_seed":
            cfg.base_seed = val
        elif key == "run.record_policy":
            cfg.record_policy = val
        elif key == "output.dir":
            cfg.output_dir = val
        elif head == "tol" and tail:
            if tail not in tol_names:
                raise ConfigError(f"unknown tolerance {key!r}")
            tol_kw[tail] = val
        elif head == kind and tail:
            cfg.options[tail] = val
        else:
            raise ConfigError(f"unknown key {key!r}")
    if schedule:
        cfg.schedule = schedule
    cfg.tolerances = Tolerances(**tol_kw)
    return cfg


def to_flat(cfg: ExperimentConfig) -> dict:
    flat: dict[str, Any] = {"kind": cfg.kind, "objective.name": cfg.objective, "noise.name": cfg.noise}
    flat.update({f"objective.{k}": v for k, v in cfg.objective_params.items()})
    flat.update({f"noise.{k}": v for k, v in cfg.noise_params.items()})
    flat.update({f"schedule.{k}": v for k, v in cfg.schedule.items()})
    if cfg.x0 is not None:
        flat["x0"] = cfg.x0
    flat["run.n_iters"] = cfg.n_iters
    flat["run.n_runs"] = cfg.n_runs
    flat["run.base_seed"] = cfg.base_seed
    flat["run.record_policy"] = cfg.record_policy
    default_tol = Tolerances()
    for k, v in asdict(cfg.tolerances).items():
        if v != getattr(default_tol, k):
            flat[f"tol.{k}"] = v
    if cfg.output_dir:
        flat["output.dir"] = cfg.output_dir
    flat.update({f"{cfg.kind}.{k}": v for k, v in cfg.options.items()})
    return flat


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: sorted keys, one per line."""
    flat = to_flat(cfg)
    return "".join(f"{k} = {_encode(flat[k])}\n" for k in sorted(flat))


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text())


def validate(cfg: ExperimentConfig) -> list[str]:
    """Resolve every name and check ranges. Returns warnings; raises ConfigError."""
    warnings: list[str] = []
    if cfg.kind == "chung":
        return warnings
    if cfg.objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {cfg.objective!r}")
    if cfg.noise not in NOISES:
        raise ConfigError(f"unknown noise model {cfg.noise!r}")
    if not isinstance(cfg.n_runs, int) or cfg.n_runs < 1:
        raise ConfigError("run.n_runs must be a positive integer")
    if not isinstance(cfg.n_iters, int) or cfg.n_iters < 1:
        raise ConfigError("run.n_iters must be a positive integer")
    if cfg.record_policy not in RECORD_POLICIES:
        raise ConfigError(f"run.record_policy must be one of {RECORD_POLICIES}")
    try:
        obj = cfg.build_objective()
        noise = cfg.build_noise(obj.dim)
        sched = cfg.build_schedule()
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    if noise.dim != obj.dim:
        raise ConfigError(f"noise dim {noise.dim} does not match objective dim {obj.dim}")
    if not admissible(sched, noise.moment_order_q):
        warnings.append(
            f"schedule {sched.kind} (p={sched.exponent_p}) is not admissible for q={noise.moment_order_q}"
        )
    return warnings
