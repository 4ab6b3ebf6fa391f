"""Per-rank action orderings for GPipe, 1F1B, interleaved 1F1B and ZB-V pipelines.

Stages and microbatches are 1-indexed; ranks are 0-indexed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List

from .errors import ConfigError, DomainError


class ScheduleKind(str, enum.Enum):
    GPIPE = "gpipe"
    ONE_F_ONE_B = "1f1b"
    INTERLEAVED_1F1B = "interleaved1f1b"
    ZBV = "zbv"

    @classmethod
    def parse(cls, value) -> "ScheduleKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        aliases = {
            "gpipe": cls.GPIPE,
            "1f1b": cls.ONE_F_ONE_B,
            "onefoneb": cls.ONE_F_ONE_B,
            "interleaved1f1b": cls.INTERLEAVED_1F1B,
            "interleavedonefoneb": cls.INTERLEAVED_1F1B,
            "interleaved": cls.INTERLEAVED_1F1B,
            "zbv": cls.ZBV,
            "zerobubblev": cls.ZBV,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ConfigError(f"unknown schedule kind {value!r}") from None


class Kind(enum.IntEnum):
    FORWARD = 0
    BACKWARD = 1

    @property
    def letter(self) -> str:
        return "f" if self is Kind.FORWARD else "b"


@dataclass(frozen=True, order=True)
class ActionId:
    """One forward or backward action of microbatch ``microbatch`` at ``stage``.

    Field order gives the total ordering (kind, stage, microbatch).
    """

    kind: Kind
    stage: int
    microbatch: int

    @property
    def is_forward(self) -> bool:
        return self.kind is Kind.FORWARD

    @property
    def is_backward(self) -> bool:
        return self.kind is Kind.BACKWARD

    def __str__(self) -> str:
        return f"{self.kind.letter}({self.microbatch},{self.stage})"

    __repr__ = __str__

    def to_dict(self) -> dict:
        return {"kind": self.kind.letter, "m": self.microbatch, "s": self.stage}

    @classmethod
    def from_dict(cls, d: dict) -> "ActionId":
        kind = d["kind"]
        if isinstance(kind, str):
            kind = Kind.FORWARD if kind.lower().startswith("f") else Kind.BACKWARD
        return cls(Kind(kind), int(d["s"]), int(d["m"]))


def fwd(m: int, s: int) -> ActionId:
    return ActionId(Kind.FORWARD, s, m)


def bwd(m: int, s: int) -> ActionId:
    return ActionId(Kind.BACKWARD, s, m)


@dataclass(frozen=True)
class PipelineConfig:
    schedule_kind: ScheduleKind
    num_ranks: int
    stages_per_rank: int
    num_microbatches: int

    def __post_init__(self):
        object.__setattr__(self, "schedule_kind", ScheduleKind.parse(self.schedule_kind))
        for name in ("num_ranks", "stages_per_rank", "num_microbatches"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        kind, c = self.schedule_kind, self.stages_per_rank
        if kind in (ScheduleKind.GPIPE, ScheduleKind.ONE_F_ONE_B) and c != 1:
            raise ConfigError(f"{kind.value} requires stages_per_rank=1, got {c}")
        if kind is ScheduleKind.INTERLEAVED_1F1B:
            if c < 2:
                raise ConfigError(f"interleaved1f1b requires stages_per_rank>=2, got {c}")
            M, R = self.num_microbatches, self.num_ranks
            # the grouped chunk order deadlocks on a partial trailing group
            if M > R and M % R:
                raise ConfigError(f"interleaved1f1b requires num_microbatches divisible by num_ranks when M > R (M={M}, R={R})")
        if kind is ScheduleKind.ZBV and c != 2:
            raise ConfigError(f"zbv requires stages_per_rank=2, got {c}")

    @property
    def num_stages(self) -> int:
        return self.num_ranks * self.stages_per_rank

    def actions(self) -> List[ActionId]:
        M, S = self.num_microbatches, self.num_stages
        return sorted(
            ActionId(k, s, m) for k in Kind for s in range(1, S + 1) for m in range(1, M + 1)
        )

    def to_dict(self) -> dict:
        return {
            "schedule": self.schedule_kind.value,
            "num_ranks": self.num_ranks,
            "stages_per_rank": self.stages_per_rank,
            "num_microbatches": self.num_microbatches,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            kind = d.get("schedule", d.get("schedule_kind"))
            if kind is None:
                raise KeyError("schedule")
            c = d.get("stages_per_rank")
            if c is None:
                c = 2 if ScheduleKind.parse(kind) in (ScheduleKind.ZBV, ScheduleKind.INTERLEAVED_1F1B) else 1
            return cls(kind, d["num_ranks"], c, d["num_microbatches"])
        except KeyError as exc:
            raise ConfigError(f"pipeline: missing key {exc.args[0]!r}") from None


@dataclass
class RankTimeline:
    config: PipelineConfig
    ranks: List[List[ActionId]]
    stage_rank: Dict[int, int] = field(default_factory=dict)

    def rank_of(self, action: ActionId) -> int:
        return self.stage_rank[action.stage]

    def all_actions(self) -> List[ActionId]:
        return [a for lane in self.ranks for a in lane]

    def check(self) -> None:
        """Raise ``ConfigError`` if the timeline breaks completeness or per-rank causality."""
        cfg = self.config
        seen = self.all_actions()
        expected = 2 * cfg.num_microbatches * cfg.num_stages
        if len(seen) != expected or len(set(seen)) != expected:
            raise ConfigError(f"timeline has {len(set(seen))} unique of {len(seen)} actions, expected {expected}")
        for r, lane in enumerate(self.ranks):
            pos = {a: i for i, a in enumerate(lane)}
            for a in lane:
                if self.stage_rank[a.stage] != r:
                    raise ConfigError(f"{a} placed on rank {r}, stage belongs to rank {self.stage_rank[a.stage]}")
                if a.is_backward and pos[a] < pos[fwd(a.microbatch, a.stage)]:
                    raise ConfigError(f"{a} precedes its forward on rank {r}")


def stage_to_rank(config: PipelineConfig, stage: int) -> int:
    S, R = config.num_stages, config.num_ranks
    if not 1 <= stage <= S:
        raise DomainError(f"stage {stage} outside [1, {S}]")
    kind = config.schedule_kind
    if kind is ScheduleKind.INTERLEAVED_1F1B:
        return (stage - 1) % R
    if kind is ScheduleKind.ZBV:
        return stage - 1 if stage <= R else 2 * R - stage
    return stage - 1


def rank_stages(config: PipelineConfig, rank: int) -> List[int]:
    return [s for s in range(1, config.num_stages + 1) if stage_to_rank(config, s) == rank]


def _gpipe_lane(M: int, s: int) -> List[ActionId]:
    return [fwd(m, s) for m in range(1, M + 1)] + [bwd(m, s) for m in range(1, M + 1)]


def _one_f_one_b_lane(R: int, rank: int, M: int, s: int) -> List[ActionId]:
    warmup = min(R - rank, M)
    lane = [fwd(m, s) for m in range(1, warmup + 1)]
    next_f, next_b = warmup + 1, 1
    while next_b <= M:
        lane.append(bwd(next_b, s))
        next_b += 1
        if next_f <= M:
            lane.append(fwd(next_f, s))
            next_f += 1
    return lane


def _interleaved_lane(R: int, C: int, rank: int, M: int) -> List[ActionId]:
    # Megatron order: groups of R microbatches sweep chunk 0..C-1 (backward: C-1..0).
    def stage(chunk):
        return chunk * R + rank + 1

    fwd_seq, bwd_seq = [], []
    for start in range(1, M + 1, R):
        group = range(start, min(start + R, M + 1))
        for c in range(C):
            fwd_seq.extend(fwd(m, stage(c)) for m in group)
        for c in reversed(range(C)):
            bwd_seq.extend(bwd(m, stage(c)) for m in group)
    total = M * C
    warmup = min((R - rank - 1) * 2 + (C - 1) * R, total)
    lane = fwd_seq[:warmup]
    for i in range(total - warmup):
        lane.append(fwd_seq[warmup + i])
        lane.append(bwd_seq[i])
    lane.extend(bwd_seq[total - warmup:])
    return lane


def _zbv_lanes(config: PipelineConfig) -> List[List[ActionId]]:
    """List-schedule a V-shaped pipeline with unit forward and double backward cost.

    Backwards take priority over forwards, deeper stages first; each rank keeps at
    most ``2R`` chunk activations alive, matching 1F1B peak memory.
    """
    R, M = config.num_ranks, config.num_microbatches
    S = config.num_stages
    cost = {Kind.FORWARD: 1, Kind.BACKWARD: 2}
    cap = 2 * R
    finish: Dict[ActionId, int] = {}
    next_mb = {(k, s): 1 for k in Kind for s in range(1, S + 1)}
    free_at = [0] * R
    inflight = [0] * R
    lanes: List[List[ActionId]] = [[] for _ in range(R)]
    hosted = [rank_stages(config, r) for r in range(R)]

    def deps(a: ActionId):
        m, s = a.microbatch, a.stage
        if a.is_forward:
            return [fwd(m, s - 1)] if s > 1 else []
        return [fwd(m, s)] + ([bwd(m, s + 1)] if s < S else [])

    def candidates(r):
        out = []
        for s in hosted[r]:
            for k in Kind:
                m = next_mb[(k, s)]
                if m > M:
                    continue
                a = ActionId(k, s, m)
                if a.is_forward and inflight[r] >= cap:
                    continue
                d = deps(a)
                if all(x in finish for x in d):
                    ready = max([free_at[r]] + [finish[x] for x in d])
                    out.append((ready, a))
        return out

    def priority(a: ActionId):
        return (-int(a.kind), -a.stage, a.microbatch)

    remaining = 2 * M * S
    while remaining:
        best = None
        for r in range(R):
            cands = candidates(r)
            if not cands:
                continue
            start = min(t for t, _ in cands)
            at_start = [a for t, a in cands if t <= max(start, free_at[r])]
            a = min(at_start, key=priority)
            key = (start, r)
            if best is None or key < best[0]:
                best = (key, r, a)
        if best is None:
            raise ConfigError(f"zbv list scheduler stalled for {config}")
        (start, _), r, a = best
        finish[a] = start + cost[a.kind]
        free_at[r] = finish[a]
        inflight[r] += 1 if a.is_forward else -1
        next_mb[(a.kind, a.stage)] += 1
        lanes[r].append(a)
        remaining -= 1
    return lanes


def build_schedule(config: PipelineConfig) -> RankTimeline:
    R, C, M = config.num_ranks, config.stages_per_rank, config.num_microbatches
    kind = config.schedule_kind
    stage_rank = {s: stage_to_rank(config, s) for s in range(1, config.num_stages + 1)}
    if kind is ScheduleKind.GPIPE:
        ranks = [_gpipe_lane(M, r + 1) for r in range(R)]
    elif kind is ScheduleKind.ONE_F_ONE_B:
        ranks = [_one_f_one_b_lane(R, r, M, r + 1) for r in range(R)]
    elif kind is ScheduleKind.INTERLEAVED_1F1B:
        ranks = [_interleaved_lane(R, C, r, M) for r in range(R)]
    elif kind is ScheduleKind.ZBV:
        ranks = _zbv_lanes(config)
    else:  # pragma: no cover
        raise ConfigError(f"unsupported schedule {kind}")
    timeline = RankTimeline(config, ranks, stage_rank)
    timeline.check()
    return timeline
