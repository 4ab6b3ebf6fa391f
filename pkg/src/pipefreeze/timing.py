"""Per-action duration bounds, noisy duration sampling and monitoring aggregation.

Durations are in milliseconds. A backward action's duration shrinks linearly
from ``w_max`` (nothing frozen) to ``w_min`` (everything frozen); forward
actions are unaffected by freezing.
"""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, DomainError, InsufficientMonitoringError
from .schedule import ActionId, Kind, PipelineConfig

Number = Union[int, float]


@dataclass(frozen=True)
class StageTiming:
    forward_ms: float
    backward_act_ms: float
    backward_param_ms: float

    def __post_init__(self):
        for name in ("forward_ms", "backward_act_ms", "backward_param_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "forward_ms": self.forward_ms,
            "backward_act_ms": self.backward_act_ms,
            "backward_param_ms": self.backward_param_ms,
        }


@dataclass
class TimingProfile:
    """Per-node execution-time bounds ``(w_min, w_max)``."""

    bounds: Dict[ActionId, Tuple[float, float]]
    stage_defaults: Dict[int, StageTiming] = field(default_factory=dict)

    def __post_init__(self):
        for node, (lo, hi) in self.bounds.items():
            if not 0 <= lo <= hi:
                raise DomainError(f"{node}: need 0 <= w_min <= w_max, got ({lo}, {hi})")
            if node.is_forward and lo != hi:
                raise DomainError(f"{node}: forward actions must have w_min == w_max")

    @classmethod
    def from_stage_defaults(cls, config: PipelineConfig, stages) -> "TimingProfile":
        """``stages`` is one ``StageTiming`` (applied to every stage) or one per stage."""
        S, M = config.num_stages, config.num_microbatches
        if isinstance(stages, StageTiming):
            stages = [stages] * S
        stages = list(stages)
        if len(stages) != S:
            raise ConfigError(f"got timings for {len(stages)} stages, pipeline has {S}")
        bounds = {}
        for s, st in enumerate(stages, start=1):
            for m in range(1, M + 1):
                bounds[ActionId(Kind.FORWARD, s, m)] = (st.forward_ms, st.forward_ms)
                bounds[ActionId(Kind.BACKWARD, s, m)] = (
                    st.backward_act_ms,
                    st.backward_act_ms + st.backward_param_ms,
                )
        return cls(bounds, {s: st for s, st in enumerate(stages, start=1)})

    @classmethod
    def uniform(cls, config: PipelineConfig, forward_ms: float, backward_min: float, backward_max: float):
        return cls.from_stage_defaults(
            config, StageTiming(forward_ms, backward_min, backward_max - backward_min)
        )

    def w_min(self, node: ActionId) -> float:
        return self.bounds[node][0]

    def w_max(self, node: ActionId) -> float:
        return self.bounds[node][1]

    def durations_at(self, ratios: Mapping[ActionId, float] = None, extreme: str = None) -> Dict[ActionId, float]:
        """Durations for given freeze ratios, or at ``extreme`` in {"min", "max"}."""
        if extreme == "min":
            return {n: lo for n, (lo, hi) in self.bounds.items()}
        if extreme == "max":
            return {n: hi for n, (lo, hi) in self.bounds.items()}
        ratios = ratios or {}
        return {
            n: duration_for_ratio(lo, hi, ratios.get(n, 0.0)) for n, (lo, hi) in self.bounds.items()
        }

    def freezable(self) -> List[ActionId]:
        return sorted(n for n, (lo, hi) in self.bounds.items() if hi > lo)

    def check_covers(self, nodes: Iterable[ActionId]) -> None:
        missing = [n for n in nodes if n not in self.bounds]
        if missing:
            raise ConfigError(f"timing profile lacks {len(missing)} nodes, e.g. {missing[:3]}")

    def to_json(self) -> dict:
        return {
            "per_node": [
                {**n.to_dict(), "w_min": lo, "w_max": hi} for n, (lo, hi) in sorted(self.bounds.items())
            ]
        }

    @classmethod
    def from_json(cls, data: dict, config: PipelineConfig = None) -> "TimingProfile":
        if "per_node" in data:
            bounds = {}
            try:
                for row in data["per_node"]:
                    bounds[ActionId.from_dict(row)] = (float(row["w_min"]), float(row["w_max"]))
            except KeyError as exc:
                raise ConfigError(f"timing.per_node: missing key {exc.args[0]!r}") from None
            profile = cls(bounds)
            if config is not None:
                profile.check_covers(config.actions())
            return profile
        if "per_stage" in data:
            if config is None:
                raise ConfigError("timing.per_stage needs the pipeline config")
            raw = data["per_stage"]
            rows = raw if isinstance(raw, list) else [raw]
            try:
                stages = [
                    StageTiming(float(r["forward_ms"]), float(r["backward_act_ms"]), float(r["backward_param_ms"]))
                    for r in rows
                ]
            except KeyError as exc:
                raise ConfigError(f"timing.per_stage: missing key {exc.args[0]!r}") from None
            if len(stages) == 1:
                stages = stages[0]
            return cls.from_stage_defaults(config, stages)
        raise ConfigError("timing: expected 'per_stage' or 'per_node'")


def duration_for_ratio(w_min: float, w_max: float, ratio: float) -> float:
    return w_max - ratio * (w_max - w_min)


def sample_execution(profile: TimingProfile, node: ActionId, ratio: float, sigma: float = 0.0, rng=None) -> float:
    """Duration of ``node`` at freeze ratio ``ratio`` times mean-one lognormal jitter."""
    if not 0.0 <= ratio <= 1.0:
        raise DomainError(f"ratio {ratio} outside [0, 1]")
    lo, hi = profile.bounds[node]
    w = duration_for_ratio(lo, hi, ratio)
    if sigma > 0:
        if rng is None:
            raise DomainError("noisy sampling needs an rng")
        w *= rng.lognormal(-0.5 * sigma * sigma, sigma)
    return w


def freeze_ratio_of(profile: TimingProfile, node: ActionId, w: float, tol: float = 1e-9) -> float:
    lo, hi = profile.bounds[node]
    slack = tol * max(1.0, hi)
    if w < lo - slack or w > hi + slack:
        raise DomainError(f"{node}: duration {w} outside [{lo}, {hi}]")
    if hi <= lo:
        return 0.0
    return min(1.0, max(0.0, 1.0 - (w - lo) / (hi - lo)))


class FreezeState(str, enum.Enum):
    NONE = "none"
    FULL = "full"


@dataclass
class MonitorLog:
    samples: Dict[ActionId, List[Tuple[int, float, FreezeState]]] = field(
        default_factory=lambda: defaultdict(list)
    )

    def record(self, node: ActionId, step: int, sample_ms: float, state: FreezeState) -> None:
        self.samples[node].append((step, float(sample_ms), FreezeState(state)))

    def bucket(self, node: ActionId, state: FreezeState) -> List[float]:
        return [x for _, x, st in sorted(self.samples.get(node, ())) if st is state]


def _trimmed_mean(values: Sequence[float]) -> float:
    # first sample is a warm-up outlier unless it is the only one
    kept = values[1:] if len(values) > 1 else values
    return float(np.mean(kept))


def aggregate_monitoring(log: MonitorLog, nodes: Iterable[ActionId] = None) -> TimingProfile:
    nodes = sorted(nodes if nodes is not None else log.samples)
    bounds = {}
    for node in nodes:
        if node.is_forward:
            values = [x for _, x, _ in sorted(log.samples.get(node, ()))]
            if not values:
                raise InsufficientMonitoringError(f"{node}: no samples")
            w = _trimmed_mean(values)
            bounds[node] = (w, w)
            continue
        upper = log.bucket(node, FreezeState.NONE)
        lower = log.bucket(node, FreezeState.FULL)
        if not upper:
            raise InsufficientMonitoringError(f"{node}: no upper-bound samples")
        if not lower:
            raise InsufficientMonitoringError(f"{node}: no lower-bound samples")
        w_max = _trimmed_mean(upper)
        w_min = min(_trimmed_mean(lower), w_max)
        bounds[node] = (w_min, w_max)
    return TimingProfile(bounds)


def backward_time_curve(profile: TimingProfile, ratios: Sequence[float] = None) -> List[dict]:
    """Rows of (stage, microbatch, freeze ratio, backward ms) for plotting time against ratio."""
    ratios = list(ratios) if ratios is not None else [i / 10 for i in range(11)]
    rows = []
    for node in sorted(n for n in profile.bounds if n.is_backward):
        lo, hi = profile.bounds[node]
        for r in ratios:
            rows.append({"stage": node.stage, "m": node.microbatch, "ratio": r, "backward_ms": duration_for_ratio(lo, hi, r)})
    return rows


def load_profile(path, config: PipelineConfig) -> TimingProfile:
    with open(path) as fh:
        return TimingProfile.from_json(json.load(fh), config)
