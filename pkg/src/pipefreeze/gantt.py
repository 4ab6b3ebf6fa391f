"""Per-rank Gantt timelines of one simulated batch, as JSON and self-contained SVG."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Mapping
from xml.sax.saxutils import escape

from .dag import PipelineDag, longest_path_start_times
from .errors import ConsistencyError
from .schedule import ActionId, RankTimeline

FORWARD_FILL = "#4a7bd0"
BACKWARD_FILL = "#3f9e5a"
BACKWARD_FROZEN_FILL = "#9fd4ae"


@dataclass
class GanttTimeline:
    blocks: List[dict]
    makespan: float
    title: str = ""

    def to_json(self) -> dict:
        return {"title": self.title, "makespan": self.makespan, "blocks": self.blocks}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, data: dict) -> "GanttTimeline":
        return cls(list(data["blocks"]), float(data["makespan"]), data.get("title", ""))

    def span(self) -> float:
        if not self.blocks:
            return 0.0
        return max(b["end"] for b in self.blocks) - min(b["start"] for b in self.blocks)

    def check(self, tol: float = 1e-9) -> None:
        lanes: Dict[int, List[dict]] = {}
        for b in self.blocks:
            if not b["end"] > b["start"] - tol:
                raise ConsistencyError(f"block {b} ends before it starts")
            lanes.setdefault(b["rank"], []).append(b)
        for rank, blocks in lanes.items():
            blocks = sorted(blocks, key=lambda b: (b["start"], b["end"]))
            for a, b in zip(blocks, blocks[1:]):
                if b["start"] < a["end"] - tol:
                    raise ConsistencyError(f"rank {rank}: {a} overlaps {b}")


def build_gantt(dag: PipelineDag, timeline: RankTimeline, durations: Mapping[ActionId, float],
                ratios: Mapping[ActionId, float] = None, title: str = "") -> GanttTimeline:
    times = longest_path_start_times(dag, durations)
    ratios = ratios or {}
    blocks = []
    for rank, lane in enumerate(timeline.ranks):
        for a in lane:
            start = times.P[a]
            blocks.append({
                "rank": rank,
                "kind": a.kind.letter,
                "m": a.microbatch,
                "s": a.stage,
                "start": start,
                "end": start + durations[a],
                "ratio": ratios.get(a, 0.0),
            })
    gantt = GanttTimeline(blocks, times.makespan, title)
    gantt.check()
    return gantt


def render_svg(gantt: GanttTimeline, width: int = 960, lane_height: int = 28, margin: int = 60) -> str:
    ranks = sorted({b["rank"] for b in gantt.blocks})
    span = max(gantt.makespan, 1e-12)
    scale = (width - margin - 20) / span
    height = 40 + lane_height * len(ranks) + 40
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<text x="{margin}" y="18" font-size="12">{escape(gantt.title)} '
        f'(makespan {gantt.makespan:.3f} ms)</text>',
    ]
    for i, rank in enumerate(ranks):
        y = 30 + i * lane_height
        out.append(f'<text x="8" y="{y + lane_height / 2 + 4:.1f}">GPU {rank}</text>')
        out.append(f'<line x1="{margin}" y1="{y + lane_height:.1f}" x2="{width - 20}" '
                   f'y2="{y + lane_height:.1f}" stroke="#dddddd"/>')
    for b in sorted(gantt.blocks, key=lambda b: (b["rank"], b["start"])):
        y = 30 + ranks.index(b["rank"]) * lane_height + 3
        x = margin + b["start"] * scale
        w = max((b["end"] - b["start"]) * scale, 0.5)
        if b["kind"] == "f":
            fill = FORWARD_FILL
        else:
            fill = BACKWARD_FROZEN_FILL if b.get("ratio", 0.0) > 0 else BACKWARD_FILL
        label = f'{b["kind"]}{b["m"]}'
        out.append(
            f'<g><title>{b["kind"]}(m={b["m"]}, s={b["s"]}) {b["start"]:.3f}-{b["end"]:.3f} ms</title>'
            f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{lane_height - 6}" fill="{fill}" stroke="#ffffff"/>'
        )
        if w > 14:
            out.append(f'<text x="{x + w / 2:.2f}" y="{y + lane_height / 2 + 1:.1f}" fill="#ffffff" '
                       f'text-anchor="middle">{label}</text>')
        out.append("</g>")
    axis_y = 30 + lane_height * len(ranks) + 16
    for k in range(6):
        t = span * k / 5
        x = margin + t * scale
        out.append(f'<text x="{x:.2f}" y="{axis_y}" text-anchor="middle">{t:.1f}</text>')
    out.append(f'<text x="{width - 20}" y="{axis_y + 14}" text-anchor="end">time (ms)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
