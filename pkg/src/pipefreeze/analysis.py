"""Derived metrics and reports: time-reduction factor, time-to-accuracy ratio, freeze averages."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .errors import ConsistencyError, DomainError


def kappa(r_max: float, pd_min: float, pd_max: float) -> float:
    """Per-step time ratio interpolated between the makespan envelopes."""
    if not 0.0 <= r_max <= 1.0:
        raise DomainError(f"r_max {r_max} outside [0, 1]")
    if not 0 < pd_min <= pd_max:
        raise DomainError(f"need 0 < pd_min <= pd_max, got {pd_min}, {pd_max}")
    return (1.0 - r_max) + r_max * pd_min / pd_max


def tta_ratio(kappa: float, p_eff: float) -> Tuple[float, bool]:
    """Return ``(kappa / p_eff, kappa < p_eff)``."""
    if not 0.0 < p_eff <= 1.0:
        raise DomainError(f"p_eff {p_eff} outside (0, 1]")
    return kappa / p_eff, kappa < p_eff


def average_freeze_ratio(history: Iterable[Mapping]) -> float:
    rows = list(history)
    if not rows:
        raise DomainError("empty mask history")
    total = sum(int(r["n_params"]) for r in rows)
    return sum(int(r["popcount"]) for r in rows) / total


@dataclass
class ThroughputReport:
    makespan_base: float
    makespan_opt: float
    makespan_floor: float
    reduction_pct: float
    throughput_gain_pct: float
    stage_freeze_ratios: Dict[int, float]
    kappa: float
    predicted_tta_ratio: float
    r_max: float
    p_eff: float
    p_eff_source: str
    avg_freeze_ratio: Optional[float] = None
    sandbox: Optional[dict] = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["stage_freeze_ratios"] = {str(k): v for k, v in sorted(self.stage_freeze_ratios.items())}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ThroughputReport":
        d = dict(d)
        d["stage_freeze_ratios"] = {int(k): v for k, v in d["stage_freeze_ratios"].items()}
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        frz = self.avg_freeze_ratio
        if frz is None:
            frz = sum(self.stage_freeze_ratios.values()) / max(1, len(self.stage_freeze_ratios))
        lines = [
            f"{'Method':<14}{'Avg Frz. Ratio':>16}{'Batch ms':>12}{'Throughput (D%)':>18}",
            f"{'No Freezing':<14}{0.0:>16.2f}{self.makespan_base:>12.3f}{0.0:>18.2f}",
            f"{'Planned':<14}{100 * frz:>16.2f}{self.makespan_opt:>12.3f}{self.throughput_gain_pct:>18.2f}",
            "",
            f"reduction {self.reduction_pct:.2f}%  floor {self.makespan_floor:.3f} ms  "
            f"kappa {self.kappa:.4f}  p_eff {self.p_eff:.4f} ({self.p_eff_source})  "
            f"TTA ratio ~ {self.predicted_tta_ratio:.4f}",
        ]
        for s, r in sorted(self.stage_freeze_ratios.items()):
            lines.append(f"  stage {s}: mean freeze ratio {r:.4f}")
        return "\n".join(lines) + "\n"


def build_report(plan, masks: Optional[Iterable[Mapping]] = None, sandbox: Optional[dict] = None,
                 profile=None) -> ThroughputReport:
    """Assemble a report from a freeze plan, optional mask history rows and sandbox results.

    Without a measured effective update probability, ``1 - mean stage ratio``
    stands in for it (exact for equal-size stages under uniform random freezing
    and isotropic gradient energy).
    """
    base, opt, floor = plan.makespan_base, plan.makespan_opt, plan.makespan_floor
    if not floor <= opt + 1e-9 * base or not opt <= base + 1e-9 * base:
        raise ConsistencyError(f"need floor <= opt <= base, got {floor}, {opt}, {base}")
    stage_ratios = plan.stage_average(profile)
    avg = None
    if masks is not None:
        rows = list(masks)
        stages = {int(r["stage"]) for r in rows}
        if stage_ratios and not stages <= set(stage_ratios):
            raise ConsistencyError(f"mask history covers stages {sorted(stages)}, plan has {sorted(stage_ratios)}")
        avg = average_freeze_ratio(rows) if rows else None
    k = kappa(plan.r_max, floor, base) if base > 0 and floor > 0 else 1.0
    if sandbox and "p_eff_hat" in sandbox:
        p_eff, source = float(sandbox["p_eff_hat"]), "sandbox"
    else:
        mean_r = sum(stage_ratios.values()) / len(stage_ratios) if stage_ratios else 0.0
        p_eff, source = 1.0 - mean_r, "uniform-estimate"
    predicted = tta_ratio(k, p_eff)[0] if p_eff > 0 else float("inf")
    reduction = 100.0 * (1.0 - opt / base)
    gain = 100.0 * (base / opt - 1.0)
    return ThroughputReport(base, opt, floor, reduction, gain, stage_ratios, k, predicted, plan.r_max,
                            p_eff, source, avg, sandbox)
