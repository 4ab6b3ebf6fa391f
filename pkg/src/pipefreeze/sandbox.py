"""Masked SGD on synthetic smooth objectives.

Each step draws ``M`` microbatch gradients (exact gradient plus Gaussian
noise), one update mask per microbatch, and applies the average of the masked
gradients. Used to measure how freezing stretches the number of steps needed
to reach an epsilon-stationary point.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .analysis import kappa as kappa_of
from .analysis import tta_ratio
from .errors import ConfigError, DivergenceError, DomainError
from .freezectl import PhasePlan, step_freeze_ratio
from .lp import FreezePlan
from .schedule import bwd

log = logging.getLogger(__name__)

OVERFLOW_GUARD = 1e100


class SyntheticObjective:
    kind = "abstract"
    sigma: float = 0.0

    @property
    def dim(self) -> int:
        raise NotImplementedError

    @property
    def L(self) -> float:
        raise NotImplementedError

    def value(self, theta: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Quadratic(SyntheticObjective):
    """``F(theta) = 0.5 * sum(a_j * theta_j**2)`` with diagonal curvature ``a``."""

    kind = "quadratic"

    def __init__(self, diag, sigma: float = 0.0):
        self.diag = np.asarray(diag, dtype=float)
        if self.diag.ndim != 1 or np.any(self.diag <= 0):
            raise DomainError("quadratic curvature must be a vector of positive entries")
        self.sigma = float(sigma)

    @classmethod
    def isotropic(cls, dim: int, sigma: float = 0.0) -> "Quadratic":
        return cls(np.ones(dim), sigma)

    @property
    def dim(self) -> int:
        return self.diag.size

    @property
    def L(self) -> float:
        return float(self.diag.max())

    def value(self, theta):
        return 0.5 * float(np.dot(self.diag, theta * theta))

    def grad(self, theta):
        return self.diag * theta


class LogisticToy(SyntheticObjective):
    """L2-regularized logistic regression on a fixed Gaussian dataset drawn from ``seed``."""

    kind = "logistic"

    def __init__(self, n_samples: int = 200, dim: int = 20, seed: int = 0, reg: float = 0.1, sigma: float = 0.0):
        rng = np.random.default_rng(seed)
        self.X = rng.standard_normal((n_samples, dim)) / math.sqrt(dim)
        w_true = rng.standard_normal(dim)
        self.y = np.where(self.X @ w_true + 0.5 * rng.standard_normal(n_samples) > 0, 1.0, -1.0)
        self.reg = float(reg)
        self.sigma = float(sigma)
        self.n_samples, self._dim, self.seed = n_samples, dim, seed
        self._L = float(np.linalg.eigvalsh(self.X.T @ self.X).max()) / (4 * n_samples) + self.reg

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def L(self) -> float:
        return self._L

    def value(self, theta):
        z = self.y * (self.X @ theta)
        return float(np.mean(np.logaddexp(0.0, -z))) + 0.5 * self.reg * float(theta @ theta)

    def grad(self, theta):
        z = self.y * (self.X @ theta)
        s = -self.y * 0.5 * (1.0 - np.tanh(0.5 * z))  # -y * sigmoid(-z), overflow-safe
        return self.X.T @ s / self.n_samples + self.reg * theta


# --- mask policies ----------------------------------------------------------------------

class MaskPolicy:
    """Source of per-microbatch update masks (1 = coordinate updated)."""

    def update_prob(self, t: int, M: int, d: int) -> np.ndarray:
        raise NotImplementedError

    def draw(self, t: int, M: int, d: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random((M, d)) < self.update_prob(t, M, d)


class NoMask(MaskPolicy):
    def update_prob(self, t, M, d):
        return np.ones((M, d))

    def draw(self, t, M, d, rng):
        return np.ones((M, d), dtype=bool)


@dataclass
class UniformBernoulli(MaskPolicy):
    """Each coordinate updated independently with probability ``p``."""

    p: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f"update probability {self.p} outside [0, 1]")

    def update_prob(self, t, M, d):
        return np.full((M, d), self.p)


@dataclass
class UniformExactCount(MaskPolicy):
    """Exactly ``floor(r * d)`` coordinates frozen per microbatch."""

    r: float

    def __post_init__(self):
        if not 0.0 <= self.r <= 1.0:
            raise DomainError(f"freeze ratio {self.r} outside [0, 1]")

    def update_prob(self, t, M, d):
        k = math.floor(self.r * d + 1e-12)
        return np.full((M, d), 1.0 - k / d)

    def draw(self, t, M, d, rng):
        k = math.floor(self.r * d + 1e-12)
        out = np.ones((M, d), dtype=bool)
        for m in range(M):
            if k:
                out[m, rng.choice(d, size=k, replace=False)] = False
        return out


class PlanDriven(MaskPolicy):
    """Per-coordinate Bernoulli freezing following a freeze plan.

    Coordinates are split into ``S`` contiguous blocks, one per stage; microbatch
    ``m`` of block ``s`` freezes with the ramped ratio of backward action
    ``(m, s)``. Without ``phases`` the stable ratios apply from the first step.
    """

    def __init__(self, plan: FreezePlan, phases: Optional[PhasePlan] = None):
        self.plan = plan
        self.phases = phases
        self.stages = sorted({a.stage for a in plan.ratios})
        self.microbatches = sorted({a.microbatch for a in plan.ratios})
        self._cache: Dict[tuple, np.ndarray] = {}

    def stage_blocks(self, d: int) -> List[np.ndarray]:
        return np.array_split(np.arange(d), len(self.stages))

    def freeze_ratios(self, t: int, M: int) -> np.ndarray:
        if M != len(self.microbatches):
            raise ConfigError(f"plan has {len(self.microbatches)} microbatches, run uses M={M}")
        out = np.zeros((M, len(self.stages)))
        for i, m in enumerate(self.microbatches):
            for k, s in enumerate(self.stages):
                r = self.plan.ratios.get(bwd(m, s), 0.0)
                if self.phases is not None:
                    r = step_freeze_ratio(min(t, self.phases.T_total), self.phases, r)
                out[i, k] = r
        return out

    def update_prob(self, t, M, d):
        t_eff = 0 if self.phases is None else min(t, self.phases.T_total)
        key = (t_eff, M, d)
        if key not in self._cache:
            ratios = self.freeze_ratios(t, M)
            p = np.empty((M, d))
            for k, block in enumerate(self.stage_blocks(d)):
                p[:, block] = 1.0 - ratios[:, k:k + 1]
            self._cache[key] = p
        return self._cache[key]


# --- runs -------------------------------------------------------------------------------

@dataclass
class SgdHyper:
    eta: float
    M: int = 4
    T_total: int = 1000
    stop_eps: Optional[float] = None
    init_norm: float = 1.0
    theta0: Optional[np.ndarray] = None
    check_stepsize: bool = False
    p_min: float = 1.0
    keep_trajectory: bool = False


@dataclass
class SgdRun:
    grad_sq: np.ndarray
    p_eff: np.ndarray
    values: np.ndarray
    theta_final: np.ndarray
    hyper: SgdHyper
    policy: str
    seed: Optional[int] = None
    trajectory: Optional[np.ndarray] = None

    @property
    def steps(self) -> int:
        return int(self.grad_sq.size)

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "policy": self.policy,
            "seed": self.seed,
            "final_grad_sq": float(self.grad_sq[-1]) if self.steps else None,
            "final_value": float(self.values[-1]) if self.steps else None,
            "theta_final": self.theta_final.tolist(),
        }


def masked_update(obj: SyntheticObjective, theta: np.ndarray, policy: MaskPolicy, t: int, M: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Average over ``M`` microbatches of mask-times-noisy-gradient at ``theta``."""
    g = obj.grad(theta)
    d = g.size
    if obj.sigma > 0:
        micro = g[None, :] + obj.sigma * rng.standard_normal((M, d))
    else:
        micro = np.broadcast_to(g, (M, d))
    U = policy.draw(t, M, d, rng)
    return (U * micro).mean(axis=0)


def initial_point(obj: SyntheticObjective, hyper: SgdHyper, rng: np.random.Generator) -> np.ndarray:
    if hyper.theta0 is not None:
        return np.array(hyper.theta0, dtype=float)
    v = rng.standard_normal(obj.dim)
    return hyper.init_norm * v / np.linalg.norm(v)


def run_masked_sgd(obj: SyntheticObjective, policy: MaskPolicy, hyper: SgdHyper,
                   rng: np.random.Generator, seed: Optional[int] = None) -> SgdRun:
    if hyper.check_stepsize:
        limit = hyper.p_min / (obj.L * (1 + 1 / hyper.M))
        if hyper.eta > limit * (1 + 1e-12):
            raise DomainError(f"stepsize {hyper.eta} exceeds p_min/(L(1+1/M)) = {limit}")
    theta = initial_point(obj, hyper, rng)
    grad_sq, p_eff, values, traj = [], [], [], []
    running = 0.0
    M, d = hyper.M, obj.dim
    for t in range(1, hyper.T_total + 1):
        g = obj.grad(theta)
        energy = float(g @ g)
        pbar = policy.update_prob(t, M, d).mean(axis=0)
        grad_sq.append(energy)
        p_eff.append(float(pbar @ (g * g)) / energy if energy > 0 else 1.0)
        values.append(obj.value(theta))
        if hyper.keep_trajectory:
            traj.append(theta.copy())
        running += energy
        if hyper.stop_eps is not None and running / t <= hyper.stop_eps:
            break
        theta = theta - hyper.eta * masked_update(obj, theta, policy, t, M, rng)
        norm = float(np.linalg.norm(theta))
        if not math.isfinite(norm) or norm > OVERFLOW_GUARD:
            raise DivergenceError(t, norm)
    return SgdRun(
        np.array(grad_sq), np.array(p_eff), np.array(values), theta, hyper, type(policy).__name__, seed,
        np.array(traj) if hyper.keep_trajectory else None,
    )


def steps_to_epsilon(run: SgdRun, eps: float, criterion: str = "average") -> Optional[int]:
    """Smallest ``T`` whose criterion value is at most ``eps``; ``None`` when never reached.

    ``criterion="average"`` uses the running mean of squared gradient norms,
    ``"last"`` the squared norm at step ``T`` itself.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    if criterion == "average":
        series = np.cumsum(run.grad_sq) / np.arange(1, run.steps + 1)
    elif criterion == "last":
        series = run.grad_sq
    else:
        raise DomainError(f"unknown criterion {criterion!r}")
    hits = np.flatnonzero(series <= eps)
    return int(hits[0]) + 1 if hits.size else None


def estimate_p_eff(run: SgdRun, horizon: Optional[int] = None) -> float:
    """Gradient-energy-weighted average of the per-step effective update probability."""
    T = run.steps if horizon is None else min(horizon, run.steps)
    energy = run.grad_sq[:T]
    total = float(energy.sum())
    if total == 0:
        return 1.0
    return float((run.p_eff[:T] * energy).sum() / total)


# --- experiments ------------------------------------------------------------------------

@dataclass
class ScalingRow:
    p: float
    trials: int
    reached: int
    mean_T_eps: float
    ratio: float
    p_eff_hat: float
    rel_sem: float = 0.0
    noisy: bool = False


def default_eta(obj: SyntheticObjective, p_min: float, M: int, fraction: float = 0.5) -> float:
    return fraction * p_min / (obj.L * (1 + 1 / M))


def _trial_runs(obj, policy, eps, trials, base_seed, hyper_kw):
    T, P = [], []
    for k in range(trials):
        seed = base_seed + k
        hyper = SgdHyper(stop_eps=eps, **hyper_kw)
        run = run_masked_sgd(obj, policy, hyper, np.random.default_rng(seed), seed)
        t_eps = steps_to_epsilon(run, eps)
        if t_eps is not None:
            T.append(t_eps)
            P.append(estimate_p_eff(run, t_eps))
    return T, P


def scaling_experiment(obj: SyntheticObjective, p_list: Sequence[float], eps: float, trials: int = 20,
                       base_seed: int = 0, M: int = 4, eta: Optional[float] = None, T_max: int = 200_000,
                       band: float = 0.15) -> List[ScalingRow]:
    """Mean steps-to-epsilon under uniform update probability ``p``, relative to ``p = 1``.

    Trial ``k`` uses seed ``base_seed + k`` for every ``p``, so all cells start from
    the same initial points.
    """
    if any(not 0 < p <= 1 for p in p_list):
        raise DomainError("update probabilities must lie in (0, 1]")
    if eta is None:
        eta = default_eta(obj, min(p_list), M)
    hyper_kw = dict(eta=eta, M=M, T_total=T_max)
    base_T, base_P = _trial_runs(obj, NoMask(), eps, trials, base_seed, hyper_kw)
    base_mean = float(np.mean(base_T)) if base_T else float("nan")
    rows = []
    for p in p_list:
        if p == 1:
            T, P = base_T, base_P
        else:
            T, P = _trial_runs(obj, UniformBernoulli(p), eps, trials, base_seed, hyper_kw)
        if len(T) < trials:
            log.warning("p=%g: %d of %d trials did not reach eps=%g", p, trials - len(T), trials, eps)
        mean_T = float(np.mean(T)) if T else float("nan")
        rel_sem = float(np.std(T, ddof=1) / math.sqrt(len(T)) / mean_T) if len(T) > 1 else 0.0
        rows.append(ScalingRow(
            p, trials, len(T), mean_T, mean_T / base_mean, float(np.mean(P)) if P else float("nan"),
            rel_sem, 3 * rel_sem > band,
        ))
    return rows


def write_scaling_csv(rows: Sequence[ScalingRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "trials", "mean_T_eps", "ratio", "p_eff_hat"])
        for r in rows:
            w.writerow([f"{r.p:g}", r.trials, f"{r.mean_T_eps:.6g}", f"{r.ratio:.6g}", f"{r.p_eff_hat:.6g}"])


@dataclass
class TtaReport:
    T_eps_base: float
    T_eps_ours: float
    p_eff_hat: float
    kappa: float
    kappa_measured: float
    baseline_step_ms: float
    ours_step_ms: float
    tta_base: float
    tta_ours: float
    measured_ratio: float
    predicted_ratio: float
    relative_error: float
    improves: bool
    trials: int
    reached: int

    def to_json(self) -> dict:
        return asdict(self)


def plan_update_floor(plan: FreezePlan) -> float:
    """Smallest per-stage average update probability under the plan's stable ratios."""
    stages: Dict[int, List[float]] = {}
    for a, r in plan.ratios.items():
        stages.setdefault(a.stage, []).append(r)
    return min(1.0 - float(np.mean(v)) for v in stages.values())


def tta_experiment(obj: SyntheticObjective, plan: FreezePlan, phase: Optional[PhasePlan],
                   baseline_step_ms: float, ours_step_ms: float, eps: float, trials: int = 20,
                   base_seed: int = 0, kappa: Optional[float] = None, eta: Optional[float] = None,
                   T_max: int = 200_000) -> TtaReport:
    """Compare wall-clock time to an epsilon-stationary point with and without the plan.

    Wall-clock time is steps times a constant per-step time. The prediction uses
    ``kappa`` (default: interpolated from the plan's makespan envelopes) over the
    measured effective update probability.
    """
    if baseline_step_ms <= 0 or ours_step_ms <= 0:
        raise DomainError("step times must be positive")
    policy = PlanDriven(plan, phase)
    M = len(policy.microbatches)
    if eta is None:
        floor = plan_update_floor(plan)
        if floor <= 0:
            raise DomainError("plan freezes a whole stage on average; no progress possible")
        eta = default_eta(obj, floor, M)
    hyper_kw = dict(eta=eta, M=M, T_total=T_max)
    base_T, _ = _trial_runs(obj, NoMask(), eps, trials, base_seed, hyper_kw)
    ours_T, P = _trial_runs(obj, policy, eps, trials, base_seed, hyper_kw)
    t_base, t_ours = float(np.mean(base_T)), float(np.mean(ours_T))
    p_eff = float(np.mean(P))
    if kappa is None:
        kappa = kappa_of(plan.r_max, plan.makespan_floor, plan.makespan_base)
    measured = (t_ours * ours_step_ms) / (t_base * baseline_step_ms)
    predicted, improves = tta_ratio(kappa, p_eff)
    return TtaReport(
        t_base, t_ours, p_eff, kappa, ours_step_ms / baseline_step_ms, baseline_step_ms, ours_step_ms,
        t_base * baseline_step_ms, t_ours * ours_step_ms, measured, predicted,
        abs(measured - predicted) / predicted, improves, trials, min(len(base_T), len(ours_T)),
    )


def write_tta_json(report: TtaReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)


# --- shipped plan/objective pairs ------------------------------------------------------

@dataclass(frozen=True)
class TtaFixture:
    """A pipeline instance, a freeze plan for it and a synthetic objective to train."""

    name: str
    schedule: str
    num_ranks: int
    num_microbatches: int
    timing: tuple  # forward, backward-activation, backward-parameter ms
    r_max: float
    objective: str
    eps: float
    uniform_plan: bool = False
    phases: tuple = (1, 3, 5, 10)

    def make_objective(self) -> SyntheticObjective:
        if self.objective == "quadratic":
            return Quadratic.isotropic(100)
        if self.objective == "quadratic-spread":
            return Quadratic(np.linspace(0.5, 2.0, 100))
        if self.objective == "logistic":
            return LogisticToy(200, 20, seed=3)
        raise ConfigError(f"unknown fixture objective {self.objective!r}")

    def make_plan(self) -> FreezePlan:
        from .dag import build_dag, longest_path_start_times
        from .lp import optimize_freeze_plan
        from .schedule import PipelineConfig, build_schedule
        from .timing import StageTiming, TimingProfile

        cfg = PipelineConfig(self.schedule, self.num_ranks, 1, self.num_microbatches)
        dag = build_dag(build_schedule(cfg), cfg)
        profile = TimingProfile.from_stage_defaults(cfg, StageTiming(*self.timing))
        plan = optimize_freeze_plan(dag, profile, self.r_max)
        if not self.uniform_plan:
            return plan
        ratios = {a: self.r_max for a in plan.ratios}
        durations = profile.durations_at(ratios)
        makespan = longest_path_start_times(dag, durations).makespan
        return FreezePlan(ratios, durations, makespan, plan.makespan_base, plan.makespan_floor, self.r_max)


TTA_FIXTURES = (
    TtaFixture("gpipe-s2m2-uniform", "gpipe", 2, 2, (1.0, 1.0, 1.0), 0.5, "quadratic", 1e-3, uniform_plan=True),
    TtaFixture("gpipe-s4m8", "gpipe", 4, 8, (20.0, 20.0, 25.0), 0.8, "quadratic-spread", 1e-2),
    TtaFixture("1f1b-s4m8", "1f1b", 4, 8, (20.0, 20.0, 25.0), 0.5, "logistic", 1e-4),
)


def run_tta_fixture(fx: TtaFixture, trials: int = 20, base_seed: int = 7) -> TtaReport:
    """Baseline steps cost the baseline makespan, planned steps the planned one."""
    plan = fx.make_plan()
    return tta_experiment(fx.make_objective(), plan, PhasePlan(*fx.phases), plan.makespan_base,
                          plan.makespan_opt, fx.eps, trials, base_seed)
