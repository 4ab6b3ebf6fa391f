"""Execution-dependency DAG of one pipeline batch, and its longest-path start times."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Tuple, Union

from .errors import DomainError, ScheduleConsistencyError, StructuralError
from .schedule import ActionId, PipelineConfig, RankTimeline, bwd, fwd


class Sentinel:
    __slots__ = ("name", "_rank")

    def __init__(self, name: str, rank: int):
        self.name = name
        self._rank = rank

    def __repr__(self) -> str:
        return self.name

    __str__ = __repr__

    def __reduce__(self):
        return (_sentinel, (self.name,))


SOURCE = Sentinel("src", 0)
DESTINATION = Sentinel("dst", 2)


def _sentinel(name):
    return SOURCE if name == "src" else DESTINATION


Node = Union[ActionId, Sentinel]
Edge = Tuple[Node, Node]


def node_key(node: Node):
    if isinstance(node, Sentinel):
        return (node._rank, 0, 0, 0)
    return (1, int(node.kind), node.stage, node.microbatch)


def node_label(node: Node) -> str:
    return str(node)


def parse_node(label: str) -> Node:
    if label == "src":
        return SOURCE
    if label == "dst":
        return DESTINATION
    kind, rest = label[0], label[2:-1]
    m, s = (int(x) for x in rest.split(","))
    return fwd(m, s) if kind == "f" else bwd(m, s)


@dataclass(frozen=True)
class PipelineDag:
    nodes: Tuple[Node, ...]
    edges: FrozenSet[Edge]
    node_rank: Mapping[ActionId, int] = field(default_factory=dict)

    @property
    def actions(self) -> List[ActionId]:
        return [n for n in self.nodes if isinstance(n, ActionId)]

    def node_stage(self, node: ActionId) -> int:
        return node.stage

    def successors(self) -> Dict[Node, List[Node]]:
        succ: Dict[Node, List[Node]] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            succ[u].append(v)
        for n in succ:
            succ[n].sort(key=node_key)
        return succ

    def predecessors(self) -> Dict[Node, List[Node]]:
        pred: Dict[Node, List[Node]] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            pred[v].append(u)
        for n in pred:
            pred[n].sort(key=node_key)
        return pred

    def sorted_edges(self) -> List[Edge]:
        return sorted(self.edges, key=lambda e: (node_key(e[0]), node_key(e[1])))

    def with_edges(self, extra: Iterable[Edge] = (), extra_nodes: Iterable[Node] = ()) -> "PipelineDag":
        nodes = tuple(sorted(set(self.nodes) | set(extra_nodes), key=node_key))
        return PipelineDag(nodes, self.edges | frozenset(extra), self.node_rank)

    def to_json(self) -> dict:
        return {
            "nodes": [node_label(n) for n in self.nodes],
            "edges": [[node_label(u), node_label(v)] for u, v in self.sorted_edges()],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, data: dict) -> "PipelineDag":
        nodes = tuple(sorted((parse_node(x) for x in data["nodes"]), key=node_key))
        edges = frozenset((parse_node(u), parse_node(v)) for u, v in data["edges"])
        return cls(nodes, edges)


def topological_order(dag: PipelineDag) -> List[Node]:
    """Kahn's algorithm with ties broken by node ordering.

    Raises ``ScheduleConsistencyError`` listing the nodes left on a cycle.
    """
    succ = dag.successors()
    indeg = {n: 0 for n in dag.nodes}
    for _, v in dag.edges:
        indeg[v] += 1
    heap = [(node_key(n), n) for n in dag.nodes if indeg[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, n = heapq.heappop(heap)
        order.append(n)
        for v in succ[n]:
            indeg[v] -= 1
            if indeg[v] == 0:
                heapq.heappush(heap, (node_key(v), v))
    if len(order) != len(dag.nodes):
        stuck = sorted((n for n in dag.nodes if indeg[n] > 0), key=node_key)
        raise ScheduleConsistencyError(f"cycle through {len(stuck)} nodes, e.g. {stuck[:4]}")
    return order


def dependency_edges(timeline: RankTimeline) -> List[Edge]:
    """Edges from the four construction rules, with duplicates."""
    cfg = timeline.config
    M, S = cfg.num_microbatches, cfg.num_stages
    edges: List[Edge] = [(SOURCE, fwd(1, 1)), (bwd(M, 1), DESTINATION)]
    for s in range(1, S + 1):
        for m in range(1, M + 1):
            if m < M:
                edges.append((fwd(m, s), fwd(m + 1, s)))
                edges.append((bwd(m, s), bwd(m + 1, s)))
            edges.append((fwd(m, s), bwd(m, s)))
            if s < S:
                edges.append((fwd(m, s), fwd(m, s + 1)))
            if s > 1:
                edges.append((bwd(m, s), bwd(m, s - 1)))
    for lane in timeline.ranks:
        edges.extend(zip(lane[:-1], lane[1:]))
    return edges


def build_dag(timeline: RankTimeline, config: PipelineConfig = None) -> PipelineDag:
    cfg = config or timeline.config
    if cfg != timeline.config:
        raise DomainError("timeline was built for a different pipeline config")
    nodes = tuple([SOURCE] + cfg.actions() + [DESTINATION])
    node_rank = {a: timeline.rank_of(a) for a in cfg.actions()}
    dag = PipelineDag(nodes, frozenset(dependency_edges(timeline)), node_rank)
    report = validate_dag(dag)
    if not report.acyclic:
        raise ScheduleConsistencyError(f"schedule {cfg.schedule_kind.value} yields a cyclic DAG: {report.cycle_nodes[:4]}")
    if not report.ok:
        raise StructuralError("; ".join(report.failures))
    return dag


@dataclass
class DagReport:
    acyclic: bool
    source_in_degree: int
    destination_out_degree: int
    unreachable_from_source: List[Node]
    cannot_reach_destination: List[Node]
    cycle_nodes: List[Node] = field(default_factory=list)

    @property
    def failures(self) -> List[str]:
        out = []
        if not self.acyclic:
            out.append(f"cycle through {self.cycle_nodes}")
        if self.source_in_degree:
            out.append(f"source has in-degree {self.source_in_degree}")
        if self.destination_out_degree:
            out.append(f"destination has out-degree {self.destination_out_degree}")
        if self.unreachable_from_source:
            out.append(f"unreachable from source: {self.unreachable_from_source}")
        if self.cannot_reach_destination:
            out.append(f"cannot reach destination: {self.cannot_reach_destination}")
        return out

    @property
    def ok(self) -> bool:
        return not self.failures


def _reach(start: Node, adj: Dict[Node, List[Node]]) -> set:
    seen = {start}
    stack = [start]
    while stack:
        for v in adj[stack.pop()]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def validate_dag(dag: PipelineDag) -> DagReport:
    succ, pred = dag.successors(), dag.predecessors()
    cycle_nodes: List[Node] = []
    try:
        topological_order(dag)
        acyclic = True
    except ScheduleConsistencyError:
        acyclic = False
        indeg = {n: len(pred[n]) for n in dag.nodes}
        queue = [n for n in dag.nodes if indeg[n] == 0]
        while queue:
            n = queue.pop()
            for v in succ[n]:
                indeg[v] -= 1
                if indeg[v] == 0:
                    queue.append(v)
        cycle_nodes = sorted((n for n in dag.nodes if indeg[n] > 0), key=node_key)
    has_src = SOURCE in succ
    has_dst = DESTINATION in succ
    fwd_reach = _reach(SOURCE, succ) if has_src else set()
    bwd_reach = _reach(DESTINATION, pred) if has_dst else set()
    return DagReport(
        acyclic=acyclic,
        source_in_degree=len(pred[SOURCE]) if has_src else 0,
        destination_out_degree=len(succ[DESTINATION]) if has_dst else 0,
        unreachable_from_source=[n for n in dag.nodes if n not in fwd_reach],
        cannot_reach_destination=[n for n in dag.nodes if n not in bwd_reach],
        cycle_nodes=cycle_nodes,
    )


@dataclass
class StartTimes:
    P: Dict[Node, float]
    makespan: float

    def finish(self, node: Node, weights: Mapping[Node, float]) -> float:
        return self.P[node] + weights.get(node, 0.0)


def longest_path_start_times(dag: PipelineDag, weights: Mapping[Node, float]) -> StartTimes:
    for a in dag.actions:
        if a not in weights:
            raise DomainError(f"missing weight for {a}")
        if weights[a] < 0:
            raise DomainError(f"negative weight {weights[a]} for {a}")
    w = dict(weights)
    w[SOURCE] = 0.0
    w[DESTINATION] = 0.0
    pred = dag.predecessors()
    P: Dict[Node, float] = {}
    for n in topological_order(dag):
        P[n] = max((P[u] + w[u] for u in pred[n]), default=0.0)
    return StartTimes(P, P.get(DESTINATION, max((P[n] + w[n] for n in dag.nodes), default=0.0)))
