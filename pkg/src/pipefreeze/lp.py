"""Freeze-ratio linear program over a pipeline DAG.

Decision variables are a start time ``P`` and a duration ``w`` for every node.
The program minimizes the destination start time (batch makespan); ties are
broken toward the least total freezing. All times are divided by the
no-freezing makespan before solving and multiplied back afterwards.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from .dag import DESTINATION, SOURCE, Node, PipelineDag, longest_path_start_times, topological_order
from .errors import ConsistencyError, DomainError, NumericalFailureError
from .schedule import ActionId
from .timing import TimingProfile

log = logging.getLogger(__name__)

LP_TOL = 1e-7


@dataclass
class LpProblem:
    dag: PipelineDag
    nodes: List[Node]
    index: Dict[Node, int]
    scale: float
    w_lo: np.ndarray
    w_hi: np.ndarray
    delta: np.ndarray
    A_prec: np.ndarray
    A_budget: np.ndarray
    b_budget: np.ndarray
    budget_stages: List[int]
    budget_members: Dict[int, List[Node]]
    r_max: float
    budget_scope: str = "freezable"

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_vars(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_precedence(self) -> int:
        return self.A_prec.shape[0]

    @property
    def n_budgets(self) -> int:
        return self.A_budget.shape[0]

    def P(self, node: Node) -> int:
        return self.index[node]

    def w(self, node: Node) -> int:
        return self.n_nodes + self.index[node]

    def bounds(self) -> List[Tuple[float, float]]:
        p_bounds = [(0.0, 0.0) if n is SOURCE else (0.0, None) for n in self.nodes]
        w_bounds = list(zip(self.w_lo.tolist(), self.w_hi.tolist()))
        return p_bounds + w_bounds

    def to_text(self) -> str:
        """Plain-text dump of the normalized program, one row per constraint."""

        def name(k):
            n = self.nodes[k % self.n_nodes]
            return f"{'P' if k < self.n_nodes else 'w'}[{n}]"

        def row(coefs):
            terms = []
            for k in np.flatnonzero(coefs):
                c = coefs[k]
                sign = "-" if c < 0 else "+"
                mag = abs(c)
                terms.append(f"{sign} {name(k)}" if mag == 1 else f"{sign} {mag:.12g} {name(k)}")
            return " ".join(terms).lstrip("+ ")

        lines = [f"\\ freeze-ratio LP, times scaled by 1/{self.scale:.12g}", "Minimize", f" obj: P[{DESTINATION}]"]
        lines.append(f" tiebreak: maximize sum delta_i w_i over {int(np.count_nonzero(self.delta))} nodes")
        lines.append("Subject To")
        for i, coefs in enumerate(self.A_prec):
            lines.append(f" prec{i}: {row(coefs)} <= 0")
        for s, coefs, b in zip(self.budget_stages, self.A_budget, self.b_budget):
            lines.append(f" budget_s{s}: {row(coefs)} <= {b:.12g}")
        lines.append("Bounds")
        for k, (lo, hi) in enumerate(self.bounds()):
            hi_s = "inf" if hi is None else f"{hi:.12g}"
            lines.append(f" {lo:.12g} <= {name(k)} <= {hi_s}")
        lines.append("End")
        return "\n".join(lines) + "\n"


def delta_of(w_min: float, w_max: float) -> float:
    return 1.0 / (w_max - w_min) if w_max > w_min else 0.0


def _envelope(dag: PipelineDag, profile: TimingProfile, which: str) -> float:
    return longest_path_start_times(dag, profile.durations_at(extreme=which)).makespan


def build_lp(dag: PipelineDag, profile: TimingProfile, r_max: float, budget_scope: str = "freezable") -> LpProblem:
    """Assemble the normalized program.

    ``budget_scope`` picks the denominator of each stage budget: "freezable"
    counts backward nodes with a nonzero time range, "all" counts every
    action of the stage.
    """
    if not 0.0 <= r_max <= 1.0:
        raise DomainError(f"r_max {r_max} outside [0, 1]")
    if budget_scope not in ("freezable", "all"):
        raise DomainError(f"unknown budget_scope {budget_scope!r}")
    profile.check_covers(dag.actions)
    nodes = list(dag.nodes)
    index = {n: i for i, n in enumerate(nodes)}
    n = len(nodes)
    scale = _envelope(dag, profile, "max") or 1.0

    w_lo = np.zeros(n)
    w_hi = np.zeros(n)
    delta = np.zeros(n)
    for i, node in enumerate(nodes):
        if isinstance(node, ActionId):
            lo, hi = profile.bounds[node]
            w_lo[i], w_hi[i] = lo / scale, hi / scale
            delta[i] = delta_of(w_lo[i], w_hi[i])

    edges = dag.sorted_edges()
    A_prec = np.zeros((len(edges), 2 * n))
    for row, (u, v) in enumerate(edges):
        A_prec[row, index[u]] += 1.0
        A_prec[row, n + index[u]] += 1.0
        A_prec[row, index[v]] -= 1.0

    stages = sorted({a.stage for a in dag.actions})
    rows, rhs, kept, members = [], [], [], {}
    for s in stages:
        freezable = [a for a in dag.actions if a.stage == s and a.is_backward and delta[index[a]] > 0]
        if not freezable:
            continue
        count = len(freezable) if budget_scope == "freezable" else sum(1 for a in dag.actions if a.stage == s)
        coefs = np.zeros(2 * n)
        const = 0.0
        for a in freezable:
            i = index[a]
            coefs[n + i] = -delta[i]
            const += delta[i] * w_hi[i]
        rows.append(coefs)
        rhs.append(r_max * count - const)
        kept.append(s)
        members[s] = freezable
    A_budget = np.array(rows) if rows else np.zeros((0, 2 * n))
    return LpProblem(
        dag, nodes, index, scale, w_lo, w_hi, delta, A_prec, A_budget, np.array(rhs), kept, members, r_max, budget_scope
    )


@dataclass
class LpSolution:
    problem: LpProblem
    x: np.ndarray
    makespan: float
    passes: int
    mode: str

    def start(self, node: Node) -> float:
        return float(self.x[self.problem.P(node)]) * self.problem.scale

    def duration(self, node: Node) -> float:
        return float(self.x[self.problem.w(node)]) * self.problem.scale


_HIGHS_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


def _run(c, problem: LpProblem, A_extra=None, b_extra=None):
    A = np.vstack([problem.A_prec, problem.A_budget])
    b = np.concatenate([np.zeros(problem.n_precedence), problem.b_budget])
    if A_extra is not None:
        A = np.vstack([A, A_extra])
        b = np.concatenate([b, b_extra])
    res = linprog(c, A_ub=A, b_ub=b, bounds=problem.bounds(), method="highs", options=_HIGHS_OPTIONS)
    if res.status != 0:
        raise NumericalFailureError(
            f"LP solver failed: {res.message}",
            {"status": res.status, "nit": getattr(res, "nit", None), "n_vars": problem.n_vars,
             "n_constraints": A.shape[0]},
        )
    return res


def _check_feasible(problem: LpProblem, x: np.ndarray, tol: float) -> None:
    worst = 0.0
    if problem.n_precedence:
        worst = max(worst, float((problem.A_prec @ x).max()))
    if problem.n_budgets:
        worst = max(worst, float((problem.A_budget @ x - problem.b_budget).max()))
    n = problem.n_nodes
    worst = max(worst, float((problem.w_lo - x[n:]).max()), float((x[n:] - problem.w_hi).max()))
    if worst > tol:
        raise NumericalFailureError(f"LP solution violates constraints by {worst:.3e}", {"violation": worst})


def solve_lp(problem: LpProblem, tol: float = LP_TOL, lam: Optional[float] = None) -> LpSolution:
    """Lexicographic two-pass solve, or one weighted pass when ``lam`` is given.

    The second pass caps the makespan at the first-pass optimum and maximizes
    ``sum(delta_i * w_i)``, i.e. freezes as little as possible. ``tol`` bounds
    the constraint violation accepted from the solver, in normalized units.
    """
    n = problem.n_nodes
    dst = problem.P(DESTINATION)
    tiebreak = np.zeros(2 * n)
    tiebreak[n:] = -problem.delta

    if lam is not None:
        c = tiebreak * lam
        c[dst] += 1.0
        res = _run(c, problem)
        _check_feasible(problem, res.x, tol)
        return LpSolution(problem, res.x, float(res.x[dst]) * problem.scale, 1, f"explicit({lam:g})")

    c1 = np.zeros(2 * n)
    c1[dst] = 1.0
    res1 = _run(c1, problem)
    best = float(res1.x[dst])
    _check_feasible(problem, res1.x, tol)
    if not np.any(problem.delta):
        return LpSolution(problem, res1.x, best * problem.scale, 1, "lexicographic")
    cap = np.zeros((1, 2 * n))
    cap[0, dst] = 1.0
    res2 = _run(tiebreak, problem, cap, np.array([best]))
    _check_feasible(problem, res2.x, tol)
    log.debug("pass1 makespan %.12g, pass2 makespan %.12g", best, res2.x[dst])
    return LpSolution(problem, res2.x, float(res2.x[dst]) * problem.scale, 2, "lexicographic")


@dataclass
class FreezePlan:
    ratios: Dict[ActionId, float]
    durations: Dict[ActionId, float]
    makespan_opt: float
    makespan_base: float
    makespan_floor: float
    r_max: float
    lp_makespan: float = float("nan")

    def stage_average(self, profile: TimingProfile = None) -> Dict[int, float]:
        """Mean ratio over freezable backward nodes of each stage."""
        groups: Dict[int, List[float]] = {}
        for node, r in sorted(self.ratios.items()):
            if profile is not None and node not in profile.freezable():
                continue
            groups.setdefault(node.stage, []).append(r)
        return {s: float(np.mean(v)) for s, v in groups.items()}

    def to_json(self) -> dict:
        return {
            "makespan_opt": self.makespan_opt,
            "makespan_base": self.makespan_base,
            "makespan_floor": self.makespan_floor,
            "r_max": self.r_max,
            "ratios": [
                {"m": n.microbatch, "s": n.stage, "r": r} for n, r in sorted(self.ratios.items())
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "FreezePlan":
        from .schedule import bwd

        ratios = {bwd(int(row["m"]), int(row["s"])): float(row["r"]) for row in data["ratios"]}
        return cls(
            ratios,
            {},
            float(data["makespan_opt"]),
            float(data["makespan_base"]),
            float(data["makespan_floor"]),
            float(data.get("r_max", float("nan"))),
        )


def extract_freeze_plan(solution: LpSolution, profile: TimingProfile, tol: float = LP_TOL) -> FreezePlan:
    problem = solution.problem
    dag = problem.dag
    ratios, durations = {}, {}
    for node in dag.actions:
        lo, hi = profile.bounds[node]
        w = solution.duration(node)
        slack = tol * problem.scale
        if w < lo - slack or w > hi + slack:
            raise ConsistencyError(f"{node}: solved duration {w} outside [{lo}, {hi}]")
        w = min(max(w, lo), hi)
        if node.is_backward:
            r = min(1.0, max(0.0, delta_of(lo, hi) * (hi - w)))
            # snap solver noise to the interval ends
            if r < tol:
                r = 0.0
            elif r > 1.0 - tol:
                r = 1.0
            ratios[node] = r
            w = hi - r * (hi - lo)
        durations[node] = w
    makespan = longest_path_start_times(dag, durations).makespan
    return FreezePlan(
        ratios,
        durations,
        makespan,
        _envelope(dag, profile, "max"),
        _envelope(dag, profile, "min"),
        problem.r_max,
        solution.makespan,
    )


def optimize_freeze_plan(dag: PipelineDag, profile: TimingProfile, r_max: float, lam: Optional[float] = None,
                         budget_scope: str = "freezable") -> FreezePlan:
    problem = build_lp(dag, profile, r_max, budget_scope)
    return extract_freeze_plan(solve_lp(problem, lam=lam), profile)


# --- grid oracle ---------------------------------------------------------------------

def _subset_path_lengths(dag: PipelineDag, profile: TimingProfile, free: Sequence[ActionId]) -> Dict[int, float]:
    """Longest unfrozen-length of a source-destination path for each set of freezable nodes it visits.

    The makespan at ratios ``r`` is then ``max_mask L[mask] - sum_{i in mask} range_i * r_i``.
    """
    bit = {node: 1 << k for k, node in enumerate(free)}
    pred = dag.predecessors()
    best: Dict[Node, Dict[int, float]] = {}
    for node in topological_order(dag):
        w = profile.bounds[node][1] if isinstance(node, ActionId) else 0.0
        b = bit.get(node, 0)
        table: Dict[int, float] = {}
        if not pred[node]:
            table[b] = w
        for u in pred[node]:
            for mask, length in best[u].items():
                key = mask | b
                if length + w > table.get(key, -np.inf):
                    table[key] = length + w
        best[node] = table
    return best[DESTINATION]


@dataclass
class GridResult:
    makespan: float
    ratios: Dict[ActionId, float]
    total_ratio: float
    points: int


def grid_search(dag: PipelineDag, profile: TimingProfile, r_max: float, resolution: float = 0.05,
                tol: float = 1e-9, chunk: int = 1 << 20) -> GridResult:
    """Exhaustive search over freeze ratios on a regular grid under the stage budgets.

    Among makespan-optimal points the one with the smallest total ratio wins.
    Intended for a handful of freezable nodes.
    """
    free = profile.freezable()
    free = [a for a in free if a in set(dag.actions)]
    lengths = _subset_path_lengths(dag, profile, free)
    masks = np.array(list(lengths.keys()), dtype=np.int64)
    consts = np.array(list(lengths.values()))
    span = np.array([profile.w_max(a) - profile.w_min(a) for a in free])
    # path-by-node coefficient matrix
    member = ((masks[:, None] >> np.arange(len(free))[None, :]) & 1).astype(float) * span[None, :]

    steps = int(round(1.0 / resolution))
    levels = np.linspace(0.0, 1.0, steps + 1)
    n_free = len(free)
    if n_free == 0:
        return GridResult(float(consts.max()), {}, 0.0, 1)

    by_stage: Dict[int, List[int]] = {}
    for k, a in enumerate(free):
        by_stage.setdefault(a.stage, []).append(k)
    # per stage: feasible ratio combos and their reduction of every path length
    blocks = []
    for s, ks in sorted(by_stage.items()):
        combos = np.array(list(itertools.product(levels, repeat=len(ks))))
        combos = combos[combos.sum(axis=1) <= r_max * len(ks) + 1e-12]
        blocks.append((ks, combos, combos @ member[:, ks].T))

    # fold all stages but the last into one table, then broadcast against the last
    head_idx = np.zeros((1, 0), dtype=np.int64)
    head_cut = np.zeros((1, len(consts)))
    for _, combos, cut in blocks[:-1]:
        n_h, n_b = len(head_cut), len(combos)
        head_idx = np.hstack([np.repeat(head_idx, n_b, axis=0), np.tile(np.arange(n_b), n_h)[:, None]])
        head_cut = (head_cut[:, None, :] + cut[None, :, :]).reshape(-1, len(consts))
    last_ks, last_combos, last_cut = blocks[-1]
    head_sum = np.zeros(len(head_cut))
    for j, (_, combos, _) in enumerate(blocks[:-1]):
        head_sum += combos[head_idx[:, j]].sum(axis=1)
    last_sum = last_combos.sum(axis=1)

    rows = max(1, chunk // max(1, len(last_combos) * len(consts)))
    best_val, best_sum, best_at = np.inf, np.inf, None
    for start in range(0, len(head_cut), rows):
        block = head_cut[start:start + rows]
        ms = (consts[None, None, :] - block[:, None, :] - last_cut[None, :, :]).max(axis=2)
        lo = float(ms.min())
        if lo < best_val - tol:
            best_val, best_sum, best_at = lo, np.inf, None
        if lo <= best_val + tol:
            ii, jj = np.nonzero(ms <= best_val + tol)
            sums = head_sum[start + ii] + last_sum[jj]
            k = int(np.argmin(sums))
            if sums[k] < best_sum:
                best_sum, best_at = float(sums[k]), (start + int(ii[k]), int(jj[k]))
    r = np.zeros(n_free)
    for j, (ks, combos, _) in enumerate(blocks[:-1]):
        r[ks] = combos[head_idx[best_at[0], j]]
    r[last_ks] = last_combos[best_at[1]]
    ratios = {a: float(r[k]) for k, a in enumerate(free)}
    return GridResult(best_val, ratios, best_sum, len(head_cut) * len(last_combos))


@dataclass
class PlanVerification:
    makespan_recomputed: float
    makespan_ok: bool
    stage_averages: Dict[int, float]
    budget_ok: bool
    grid: Optional[GridResult] = None
    grid_ok: Optional[bool] = None
    grid_slack: float = 0.0
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_solution(dag: PipelineDag, profile: TimingProfile, plan: FreezePlan, r_max: float,
                    tol: float = LP_TOL, resolution: float = 0.05, max_grid_nodes: int = 4) -> PlanVerification:
    durations = profile.durations_at(plan.ratios)
    recomputed = longest_path_start_times(dag, durations).makespan
    scale = plan.makespan_base or 1.0
    failures = []
    makespan_ok = abs(recomputed - plan.makespan_opt) <= tol * scale
    if not makespan_ok:
        failures.append(f"makespan {recomputed} != plan {plan.makespan_opt}")
    if not np.isnan(plan.lp_makespan) and abs(recomputed - plan.lp_makespan) > tol * scale:
        makespan_ok = False
        failures.append(f"makespan {recomputed} != LP objective {plan.lp_makespan}")
    averages = plan.stage_average(profile)
    budget_ok = all(v <= r_max + tol for v in averages.values())
    if not budget_ok:
        failures.append(f"stage budget exceeded: {averages}")
    report = PlanVerification(recomputed, makespan_ok, averages, budget_ok, failures=failures)
    free = profile.freezable()
    if len(free) <= max_grid_nodes:
        grid = grid_search(dag, profile, r_max, resolution)
        slack = resolution * sum(profile.w_max(a) - profile.w_min(a) for a in free)
        report.grid, report.grid_slack = grid, slack
        report.grid_ok = recomputed <= grid.makespan + slack + tol * scale
        if not report.grid_ok:
            failures.append(f"LP makespan {recomputed} worse than grid {grid.makespan} + {slack}")
    return report
