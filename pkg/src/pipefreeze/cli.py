"""Command-line front end: ``pipefreeze {optimize,simulate,gantt,sandbox,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .analysis import build_report
from .config import RunConfig, load_config
from .dag import build_dag
from .errors import ConfigError, DomainError, NumericalFailureError, PipefreezeError
from .freezectl import FreezeController, MaskHistory, Phase, phase_of, simulate_monitoring, step_freeze_ratio
from .gantt import GanttTimeline, build_gantt, render_svg
from .lp import FreezePlan, build_lp, extract_freeze_plan, solve_lp
from .sandbox import (
    LogisticToy,
    Quadratic,
    scaling_experiment,
    tta_experiment,
    write_scaling_csv,
    write_tta_json,
)
from .schedule import build_schedule
from .timing import aggregate_monitoring, backward_time_curve

log = logging.getLogger("pipefreeze")


def _setup_logging() -> None:
    level = os.environ.get("PIPEFREEZE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file {str(p)!r} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {what} file {p.name}: {exc.msg} at line {exc.lineno}") from None


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _load_plan(path, cfg: RunConfig) -> FreezePlan:
    data = _read_json(path, "plan")
    try:
        plan = FreezePlan.from_json(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"plan: malformed entry ({exc})") from None
    expected = {a for a in cfg.pipeline.actions() if a.is_backward}
    if set(plan.ratios) != expected:
        extra = sorted(set(plan.ratios) - expected)
        missing = sorted(expected - set(plan.ratios))
        raise ConfigError(
            f"plan does not match config pipeline: {len(missing)} backward actions missing, {len(extra)} unknown"
            + (f", e.g. {missing[0] if missing else extra[0]}" if missing or extra else "")
        )
    return plan


# --- commands ---------------------------------------------------------------------------

def cmd_optimize(args) -> int:
    cfg = _load(args)
    timeline = build_schedule(cfg.pipeline)
    dag = build_dag(timeline, cfg.pipeline)
    profile = cfg.profile
    if cfg.simulate_monitoring:
        rng = np.random.default_rng(cfg.seed)
        mlog = simulate_monitoring(profile, cfg.phases, cfg.noise_sigma, rng, dag.actions)
        profile = aggregate_monitoring(mlog, dag.actions)
    problem = build_lp(dag, profile, cfg.r_max, cfg.budget_scope)
    plan = extract_freeze_plan(solve_lp(problem, lam=cfg.lam), profile)
    report = build_report(plan, profile=profile)
    out = Path(args.out)
    _write(out / "plan.json", _dump(plan.to_json()))
    _write(out / "report.json", report.dumps() + "\n")
    _write(out / "report.txt", report.table())
    if args.debug:
        _write(out / "dag.json", dag.dumps() + "\n")
        _write(out / "lp.txt", problem.to_text())
        _write(out / "profile.json", _dump(profile.to_json()))
    print(f"makespan {plan.makespan_base:.6g} -> {plan.makespan_opt:.6g} ms "
          f"({report.reduction_pct:.2f}% reduction), plan written to {out / 'plan.json'}")
    return 0


def _timeline_outputs(gantt: GanttTimeline, stem: Path, svg: bool, js: bool) -> None:
    if js:
        _write(stem.with_suffix(".json"), gantt.dumps() + "\n")
    if svg:
        _write(stem.with_suffix(".svg"), render_svg(gantt))


def _formats(args):
    if not args.svg and not args.json:
        return True, True
    return args.svg, args.json


def cmd_simulate(args) -> int:
    cfg = _load(args)
    plan = _load_plan(args.plan, cfg)
    t = args.step if args.step is not None else cfg.phases.T_total
    if not 1 <= t <= cfg.phases.T_total:
        raise ConfigError(f"--step {t} outside [1, {cfg.phases.T_total}]")
    timeline = build_schedule(cfg.pipeline)
    dag = build_dag(timeline, cfg.pipeline)
    ratios_t = {a: step_freeze_ratio(t, cfg.phases, r) for a, r in plan.ratios.items()}
    base = build_gantt(dag, timeline, cfg.profile.durations_at(extreme="max"), title="baseline (no freezing)")
    opt = build_gantt(dag, timeline, cfg.profile.durations_at(ratios_t), ratios_t,
                      title=f"optimized, step {t} ({phase_of(t, cfg.phases).value})")
    svg, js = _formats(args)
    out = Path(args.out)
    _timeline_outputs(base, out / "gantt_baseline", svg, js)
    _timeline_outputs(opt, out / "gantt_optimized", svg, js)
    if args.masks:
        rng = np.random.default_rng(cfg.seed)
        history = MaskHistory()
        ctrls = [
            FreezeController(s, dag.actions, cfg.n_params_per_stage, cfg.phases, rng, history=history)
            for s in range(1, cfg.pipeline.num_stages + 1)
        ]
        for step in range(1, cfg.phases.T_total + 1):
            if phase_of(step, cfg.phases) is Phase.SOLVE:
                for c in ctrls:
                    c.set_ratios(plan.ratios)
            for c in ctrls:
                c.step(step)
        history.write_json(out / "masks.json")
        history.write_frequency_csv(out / "mask_frequency.csv")
    if args.curve:
        with open(out / "backward_curve.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["stage", "m", "ratio", "backward_ms"])
            w.writeheader()
            for row in backward_time_curve(cfg.profile):
                w.writerow({**row, "ratio": f"{row['ratio']:g}", "backward_ms": f"{row['backward_ms']:.6g}"})
    print(f"baseline {base.makespan:.6g} ms, optimized {opt.makespan:.6g} ms at step {t}")
    return 0


def cmd_gantt(args) -> int:
    data = _read_json(args.timeline, "timeline")
    try:
        gantt = GanttTimeline.from_json(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"timeline: malformed ({exc})") from None
    gantt.check()
    target = Path(args.out) / (Path(args.timeline).stem + ".svg")
    _write(target, render_svg(gantt))
    print(target)
    return 0


def _parse_p_list(text: str) -> List[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--p: expected comma-separated numbers, got {text!r}") from None
    if not values or any(not 0 < p <= 1 for p in values):
        raise ConfigError(f"--p: values must lie in (0, 1], got {text!r}")
    return values


def _objective(args):
    if args.dim < 1:
        raise ConfigError(f"--dim must be positive, got {args.dim}")
    if args.objective == "quadratic":
        return Quadratic.isotropic(args.dim, args.sigma)
    return LogisticToy(dim=args.dim, seed=args.seed, sigma=args.sigma)


def cmd_sandbox(args) -> int:
    if not args.eps > 0:
        raise ConfigError(f"--eps must be positive, got {args.eps}")
    if args.trials < 1:
        raise ConfigError(f"--trials must be positive, got {args.trials}")
    if args.sigma < 0:
        raise ConfigError(f"--sigma must be nonnegative, got {args.sigma}")
    obj = _objective(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.plan:
        if not args.config:
            raise ConfigError("--plan needs --config for the phase boundaries")
        cfg = load_config(args.config)
        plan = _load_plan(args.plan, cfg)
        step_ms = plan.makespan_opt if args.ours_ms is None else args.ours_ms
        base_ms = plan.makespan_base if args.base_ms is None else args.base_ms
        phases = None if args.stable_only else cfg.phases
        rep = tta_experiment(obj, plan, phases, base_ms, step_ms, args.eps, args.trials, args.seed,
                             eta=args.eta, T_max=args.t_max)
        write_tta_json(rep, out / "tta.json")
        print(f"measured TTA ratio {rep.measured_ratio:.4f}, predicted {rep.predicted_ratio:.4f} "
              f"(relative error {100 * rep.relative_error:.1f}%)")
        return 0
    ps = _parse_p_list(args.p)
    rows = scaling_experiment(obj, ps, args.eps, args.trials, args.seed, args.M, args.eta, args.t_max)
    write_scaling_csv(rows, out / "sandbox_scaling.csv")
    _write(out / "sandbox.json", _dump({
        "objective": args.objective, "dim": args.dim, "eps": args.eps, "seed": args.seed,
        "rows": [r.__dict__ for r in rows],
    }))
    for r in rows:
        print(f"p={r.p:g}: mean T_eps {r.mean_T_eps:.1f}, ratio {r.ratio:.3f}, p_eff {r.p_eff_hat:.3f}")
    return 0


def cmd_report(args) -> int:
    plan_data = _read_json(args.plan, "plan")
    plan = FreezePlan.from_json(plan_data)
    masks = _read_json(args.masks, "mask history") if args.masks else None
    sandbox = None
    if args.sandbox:
        sandbox = _read_json(args.sandbox, "sandbox")
    report = build_report(plan, masks, sandbox)
    out = Path(args.out)
    _write(out / "report.json", report.dumps() + "\n")
    _write(out / "report.txt", report.table())
    sys.stdout.write(report.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pipefreeze", description="Schedule-aware freeze-ratio planning for pipeline training.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="solve the freeze-ratio LP for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int)
    p.add_argument("--debug", action="store_true", help="also dump the DAG, LP and aggregated profile")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="simulate one batch and export baseline/optimized timelines")
    p.add_argument("--config", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int)
    p.add_argument("--step", type=int, help="training step whose freeze ratios apply (default: last)")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--json", action="store_true")
    p.add_argument("--masks", action="store_true", help="also write mask history and per-parameter frequencies")
    p.add_argument("--curve", action="store_true", help="also write backward time against freeze ratio")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gantt", help="render an exported timeline JSON to SVG")
    p.add_argument("--timeline", required=True)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_gantt)

    p = sub.add_parser("sandbox", help="masked-SGD experiments on synthetic objectives")
    p.add_argument("--objective", choices=["quadratic", "logistic"], default="quadratic")
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--p", default="1.0,0.8,0.5")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--eta", type=float)
    p.add_argument("--t-max", type=int, default=200_000)
    p.add_argument("--config")
    p.add_argument("--plan")
    p.add_argument("--base-ms", type=float)
    p.add_argument("--ours-ms", type=float)
    p.add_argument("--stable-only", action="store_true", help="apply stable ratios from step 1 (no phases)")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_sandbox)

    p = sub.add_parser("report", help="assemble a throughput/TTA report")
    p.add_argument("--plan", required=True)
    p.add_argument("--masks")
    p.add_argument("--sandbox", help="sandbox JSON with a p_eff_hat field (e.g. tta.json)")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except NumericalFailureError as exc:
        print(f"error[lp]: {exc}", file=sys.stderr)
        return 3
    except DomainError as exc:
        print(f"error[domain]: {exc}", file=sys.stderr)
        return 2
    except PipefreezeError as exc:
        print(f"error[{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
