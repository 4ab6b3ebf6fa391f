"""Run configuration files (JSON, ``"version": 1``)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .freezectl import PhasePlan
from .schedule import PipelineConfig
from .timing import TimingProfile

SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    pipeline: PipelineConfig
    profile: TimingProfile
    phases: PhasePlan
    r_max: float
    lam: Optional[float] = None
    seed: int = 0
    noise_sigma: float = 0.0
    simulate_monitoring: bool = False
    n_params_per_stage: int = 1000
    budget_scope: str = "freezable"
    source: Optional[str] = None
    raw: dict = field(default_factory=dict)

    @property
    def lambda_mode(self) -> str:
        return "lexicographic" if self.lam is None else f"explicit({self.lam:g})"


def _require(d: dict, key: str, where: str = ""):
    if key not in d:
        raise ConfigError(f"missing key {where + key!r}")
    return d[key]


def parse_config(data: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    version = _require(data, "version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"key 'version': unsupported schema version {version!r}")
    pipe = _require(data, "pipeline")
    if not isinstance(pipe, dict):
        raise ConfigError("key 'pipeline' must be an object")
    pipeline = PipelineConfig.from_dict(pipe)

    timing = _require(data, "timing")
    if not isinstance(timing, dict):
        raise ConfigError("key 'timing' must be an object")
    if "file" in timing:
        path = base_dir / timing["file"]
        if not path.is_file():
            raise ConfigError(f"key 'timing.file': no such file {str(path)!r}")
        try:
            timing = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"key 'timing.file': invalid JSON ({exc.msg} at line {exc.lineno})") from None
    profile = TimingProfile.from_json(timing, pipeline)

    phases = PhasePlan.from_dict(_require(data, "phases"))
    r_max = _require(data, "r_max")
    if not isinstance(r_max, (int, float)) or not 0.0 <= r_max <= 1.0:
        raise ConfigError(f"key 'r_max': must be a number in [0, 1], got {r_max!r}")

    mode = data.get("lambda_mode", "lexicographic")
    if mode == "lexicographic":
        lam = None
    elif isinstance(mode, dict) and "explicit" in mode:
        lam = float(mode["explicit"])
        if not lam > 0:
            raise ConfigError("key 'lambda_mode.explicit': must be positive")
    else:
        raise ConfigError(f"key 'lambda_mode': expected 'lexicographic' or {{'explicit': value}}, got {mode!r}")

    seed = data.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"key 'seed': must be a nonnegative integer, got {seed!r}")
    sigma = data.get("noise_sigma", 0.0)
    if not isinstance(sigma, (int, float)) or sigma < 0:
        raise ConfigError(f"key 'noise_sigma': must be nonnegative, got {sigma!r}")
    n_params = data.get("n_params_per_stage", 1000)
    if not isinstance(n_params, int) or n_params < 1:
        raise ConfigError(f"key 'n_params_per_stage': must be a positive integer, got {n_params!r}")
    scope = data.get("budget_scope", "freezable")
    if scope not in ("freezable", "all"):
        raise ConfigError(f"key 'budget_scope': expected 'freezable' or 'all', got {scope!r}")
    return RunConfig(
        pipeline, profile, phases, float(r_max), lam, seed, float(sigma),
        bool(data.get("simulate_monitoring", False)), n_params, scope, raw=data,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path.name}: {exc.msg} at line {exc.lineno} column {exc.colno}") from None
    cfg = parse_config(data, path.parent)
    cfg.source = str(path)
    return cfg


def fixture_names():
    return sorted(p.name[:-5] for p in resources.files("pipefreeze.fixtures").iterdir() if p.name.endswith(".json"))


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("pipefreeze.fixtures") / f"{name}.json"))


def load_fixture(name: str) -> RunConfig:
    return load_config(fixture_path(name))
