"""Independent reference computations used by the tests."""

from __future__ import annotations

from typing import Dict, Iterator, List

import numpy as np

from pipefreeze.dag import DESTINATION, SOURCE, PipelineDag
from pipefreeze.schedule import ActionId


def all_paths(dag: PipelineDag) -> Iterator[List]:
    succ: Dict = {}
    for u, v in dag.edges:
        succ.setdefault(u, []).append(v)
    stack = [(SOURCE, [SOURCE])]
    while stack:
        node, path = stack.pop()
        if node is DESTINATION or node == DESTINATION:
            yield path
            continue
        for v in succ.get(node, ()):
            stack.append((v, path + [v]))


def brute_force_makespan(dag: PipelineDag, weights) -> float:
    """Length of the longest source-to-destination path, by enumerating every path."""
    best = 0.0
    for path in all_paths(dag):
        length = 0.0
        for n in path:
            if isinstance(n, ActionId):
                length += weights[n]
        best = max(best, length)
    return best


def path_budget_lower_bound(dag: PipelineDag, profile, r_max: float) -> float:
    """Lower bound on any budget-feasible makespan.

    For each path, the stage-``s`` nodes on it can shed at most
    ``span * min(count, r_max * |B_s|)`` (equal spans per stage assumed), so the
    longest such reduced path bounds every plan from below.
    """
    free = [a for a in dag.actions if a.is_backward]
    stages = sorted({a.stage for a in free})
    size = {s: sum(1 for a in free if a.stage == s) for s in stages}
    span = {}
    for a in free:
        sp = profile.w_max(a) - profile.w_min(a)
        assert np.isclose(span.setdefault(a.stage, sp), sp), "stage spans must be uniform"
    best = -np.inf
    for path in all_paths(dag):
        counts = {s: 0 for s in stages}
        length = 0.0
        for n in path:
            if isinstance(n, ActionId):
                length += profile.w_max(n)
                if n.is_backward:
                    counts[n.stage] += 1
        cut = sum(span[s] * min(counts[s], r_max * size[s]) for s in stages)
        best = max(best, length - cut)
    return best


def gpipe_closed_form(M: int, S: int, f: float, b: float) -> float:
    return (M + S - 1) * (f + b)


def naive_sgd(diag, theta0, eta, M, p, T, seed) -> List[np.ndarray]:
    """Straight-line masked SGD for a noiseless diagonal quadratic, same draw order as the library."""
    rng = np.random.default_rng(seed)
    d = len(diag)
    if theta0 is None:
        v = rng.standard_normal(d)
        theta = v / np.sqrt((v * v).sum())
    else:
        theta = np.array(theta0, dtype=float)
    out = [theta.copy()]
    for _ in range(T):
        g = np.asarray(diag) * theta
        U = rng.random((M, d)) < p
        step = np.zeros(d)
        for m in range(M):
            step += U[m] * g
        theta = theta - eta * step / M
        out.append(theta.copy())
    return out
