"""Step-level freezing control: phase machine, ramped freeze ratios, parameter masks.

Also hosts the two baseline freezing scores (gradient-norm change with prefix
freezing, and the effective-perturbation score) used by the hybrid variants.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DomainError
from .schedule import ActionId
from .timing import FreezeState, MonitorLog, TimingProfile, sample_execution


class Phase(str, enum.Enum):
    WARMUP = "warmup"
    MONITOR_UPPER = "monitor_upper"
    MONITOR_LOWER = "monitor_lower"
    SOLVE = "solve"
    PROGRESSIVE_FREEZE = "progressive_freeze"
    STABLE_FREEZE = "stable_freeze"


@dataclass(frozen=True)
class PhasePlan:
    """Last step of warm-up (``T_w``), monitoring (``T_m``) and the freeze ramp (``T_f``)."""

    T_w: int
    T_m: int
    T_f: int
    T_total: int

    def __post_init__(self):
        if not 0 < self.T_w < self.T_m <= self.T_f <= self.T_total:
            raise ConfigError(f"need 0 < T_w < T_m <= T_f <= T_total, got {self}")
        if self.T_m - self.T_w < 2:
            raise ConfigError("monitoring window needs at least two steps (one per bound)")

    @property
    def T_mid(self) -> int:
        return self.T_w + math.ceil((self.T_m - self.T_w) / 2)

    def to_dict(self) -> dict:
        return {"T_w": self.T_w, "T_m": self.T_m, "T_f": self.T_f, "T_total": self.T_total}

    @classmethod
    def from_dict(cls, d: dict) -> "PhasePlan":
        try:
            return cls(int(d["T_w"]), int(d["T_m"]), int(d["T_f"]), int(d["T_total"]))
        except KeyError as exc:
            raise ConfigError(f"phases: missing key {exc.args[0]!r}") from None


def phase_of(t: int, plan: PhasePlan) -> Phase:
    if not 1 <= t <= plan.T_total:
        raise DomainError(f"step {t} outside [1, {plan.T_total}]")
    if t <= plan.T_w:
        return Phase.WARMUP
    if t == plan.T_m:
        return Phase.SOLVE
    if t <= plan.T_mid:
        return Phase.MONITOR_UPPER
    if t < plan.T_m:
        return Phase.MONITOR_LOWER
    if t <= plan.T_f:
        return Phase.PROGRESSIVE_FREEZE
    return Phase.STABLE_FREEZE


def actual_freeze_ratio(t: int, plan: PhasePlan, r: float) -> float:
    if t <= plan.T_m:
        raise DomainError(f"freeze ramp starts after T_m={plan.T_m}, got t={t}")
    if plan.T_f == plan.T_m:
        return r
    return min(r, r * (t - plan.T_m) / (plan.T_f - plan.T_m))


def step_freeze_ratio(t: int, plan: PhasePlan, r: float) -> float:
    """Freeze ratio applied to a backward action at step ``t``, across all phases.

    Lower-bound monitoring (including the solve step itself) runs fully frozen.
    """
    phase = phase_of(t, plan)
    if phase in (Phase.WARMUP, Phase.MONITOR_UPPER):
        return 0.0
    if phase in (Phase.MONITOR_LOWER, Phase.SOLVE):
        return 1.0
    return actual_freeze_ratio(t, plan, r)


@dataclass
class FreezeMask:
    bits: np.ndarray
    action: Optional[ActionId] = None
    step: Optional[int] = None

    @property
    def n_params(self) -> int:
        return int(self.bits.size)

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)


def sample_mask(n_params: int, ratio: float, rng: np.random.Generator, action=None, step=None) -> FreezeMask:
    """Uniformly random subset of exactly ``floor(ratio * n_params)`` frozen indices."""
    if not 0.0 <= ratio <= 1.0:
        raise DomainError(f"ratio {ratio} outside [0, 1]")
    k = int(math.floor(ratio * n_params + 1e-12))
    bits = np.zeros(n_params, dtype=bool)
    if k:
        bits[rng.choice(n_params, size=k, replace=False)] = True
    return FreezeMask(bits, action, step)


def reconcile_mask(base: FreezeMask, target_count: int, rng: np.random.Generator) -> FreezeMask:
    """Grow or shrink a metric-chosen mask to exactly ``target_count`` frozen indices."""
    if not 0 <= target_count <= base.n_params:
        raise DomainError(f"target {target_count} outside [0, {base.n_params}]")
    have = base.popcount
    bits = base.bits.copy()
    if have < target_count:
        free = np.flatnonzero(~base.bits)
        bits[rng.choice(free, size=target_count - have, replace=False)] = True
    elif have > target_count:
        held = np.flatnonzero(base.bits)
        bits[rng.choice(held, size=have - target_count, replace=False)] = False
    else:
        return base
    return FreezeMask(bits, base.action, base.step)


def hybrid_mask(base: FreezeMask, ratio: float, rng: np.random.Generator) -> FreezeMask:
    return reconcile_mask(base, int(math.floor(ratio * base.n_params + 1e-12)), rng)


# --- baseline scores -----------------------------------------------------------------

def autofreeze_score(norm_prev: float, norm_cur: float) -> float:
    if norm_prev == 0:
        raise DomainError("previous update norm is zero")
    return abs(norm_prev - norm_cur) / norm_prev


def nearest_rank(values: Sequence[float], percentile: float) -> Optional[float]:
    ordered = sorted(values)
    rank = math.ceil(percentile / 100.0 * len(ordered))
    if rank <= 0:
        return None
    return ordered[min(rank, len(ordered)) - 1]


def autofreeze_select(scores: Sequence[float], frozen_prefix_len: int, percentile: float) -> int:
    """Extend the frozen layer prefix while each next layer scores strictly below the percentile."""
    n = len(scores)
    if not 0 <= frozen_prefix_len <= n:
        raise DomainError(f"prefix {frozen_prefix_len} outside [0, {n}]")
    cut = nearest_rank(scores, percentile)
    if cut is None:
        return frozen_prefix_len
    k = frozen_prefix_len
    while k < n and scores[k] < cut:
        k += 1
    return k


@dataclass
class ApfState:
    E: np.ndarray
    E_abs: np.ndarray
    alpha: float = 0.9
    threshold: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha {self.alpha} outside (0, 1)")

    @classmethod
    def fresh(cls, n: int, alpha: float = 0.9, threshold: float = 0.01) -> "ApfState":
        return cls(np.zeros(n), np.zeros(n), alpha, threshold)

    @property
    def scores(self) -> np.ndarray:
        out = np.ones_like(self.E_abs)
        nz = self.E_abs > 0
        out[nz] = np.abs(self.E[nz]) / self.E_abs[nz]
        return out

    def freeze_eligible(self) -> np.ndarray:
        return self.scores < self.threshold


def apf_update(state: ApfState, delta) -> Tuple[np.ndarray, ApfState]:
    delta = np.asarray(delta, dtype=float)
    if delta.shape != state.E.shape:
        raise DomainError(f"update shape {delta.shape} != state shape {state.E.shape}")
    a = state.alpha
    new = ApfState(a * state.E + (1 - a) * delta, a * state.E_abs + (1 - a) * np.abs(delta), a, state.threshold)
    return new.scores, new


# --- monitoring and mask history --------------------------------------------------------

def simulate_monitoring(profile: TimingProfile, plan: PhasePlan, sigma: float = 0.0,
                        rng: np.random.Generator = None, actions: Iterable[ActionId] = None) -> MonitorLog:
    """Record one duration sample per action for every monitoring step.

    Upper-bound steps run unfrozen, lower-bound steps (through ``T_m``) fully frozen.
    """
    log = MonitorLog()
    actions = sorted(actions if actions is not None else profile.bounds)
    for t in range(plan.T_w + 1, plan.T_m + 1):
        ratio = step_freeze_ratio(t, plan, 0.0)
        state = FreezeState.NONE if ratio == 0.0 else FreezeState.FULL
        for a in actions:
            log.record(a, t, sample_execution(profile, a, ratio if a.is_backward else 0.0, sigma, rng), state)
    return log


@dataclass
class MaskHistory:
    rows: List[dict] = field(default_factory=list)
    counts: Dict[int, np.ndarray] = field(default_factory=dict)
    cells: Dict[int, int] = field(default_factory=dict)

    def add(self, stage: int, mask: FreezeMask) -> None:
        self.rows.append({
            "step": mask.step,
            "stage": stage,
            "action": str(mask.action),
            "popcount": mask.popcount,
            "n_params": mask.n_params,
        })
        if stage not in self.counts:
            self.counts[stage] = np.zeros(mask.n_params, dtype=np.int64)
            self.cells[stage] = 0
        self.counts[stage] += mask.bits
        self.cells[stage] += 1

    def frequencies(self, stage: int) -> np.ndarray:
        return self.counts[stage] / max(1, self.cells[stage])

    def to_json(self) -> list:
        return list(self.rows)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def write_frequency_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "param", "freeze_frequency"])
            for s in sorted(self.counts):
                for j, f in enumerate(self.frequencies(s)):
                    w.writerow([s, j, f"{f:.6g}"])


class FreezeController:
    """Drives masks for every backward action of one stage, step by step.

    ``ratios`` are the expected freeze ratios from the LP; set them with
    ``set_ratios`` once the solve step is reached. When ``base_mask_fn`` is given,
    the metric-chosen mask it returns is reconciled to the target count instead
    of sampling uniformly.
    """

    def __init__(self, stage: int, actions: Sequence[ActionId], n_params: int, plan: PhasePlan,
                 rng: np.random.Generator, ratios: Mapping[ActionId, float] = None,
                 history: MaskHistory = None, base_mask_fn=None):
        self.stage = stage
        self.actions = sorted(a for a in actions if a.is_backward and a.stage == stage)
        self.n_params = n_params
        self.plan = plan
        self.rng = rng
        self.ratios = dict(ratios or {})
        self.history = history
        self.base_mask_fn = base_mask_fn

    def set_ratios(self, ratios: Mapping[ActionId, float]) -> None:
        self.ratios = {a: ratios.get(a, 0.0) for a in self.actions}

    def step(self, t: int) -> Dict[ActionId, FreezeMask]:
        masks = {}
        for a in self.actions:
            ratio = step_freeze_ratio(t, self.plan, self.ratios.get(a, 0.0))
            if self.base_mask_fn is not None and t > self.plan.T_m:
                base = self.base_mask_fn(t, a)
                mask = hybrid_mask(FreezeMask(np.asarray(base, dtype=bool), a, t), ratio, self.rng)
            else:
                mask = sample_mask(self.n_params, ratio, self.rng, a, t)
            mask.action, mask.step = a, t
            masks[a] = mask
            if self.history is not None:
                self.history.add(self.stage, mask)
        return masks
