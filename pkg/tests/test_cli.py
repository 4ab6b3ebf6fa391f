import csv
import json
import subprocess
import sys

import pytest

from pipefreeze.cli import main
from pipefreeze.config import fixture_names, fixture_path, load_fixture, parse_config
from pipefreeze.errors import ConfigError
from pipefreeze.gantt import GanttTimeline

S2M2 = str(fixture_path("gpipe_s2m2"))
DEFAULT = str(fixture_path("default"))


def run(*argv):
    return main([str(a) for a in argv])


def read(path):
    return json.loads(path.read_text())


def optimize(tmp_path, config=S2M2, name="o"):
    out = tmp_path / name
    assert run("optimize", "--config", config, "--out", out) == 0
    return out


def test_fixtures_load():
    assert {"default", "gpipe_s2m2", "onefoneb_s4m8"} <= set(fixture_names())
    for name in fixture_names():
        cfg = load_fixture(name)
        assert 0 <= cfg.r_max <= 1


def test_optimize_worked_instance(tmp_path):
    out = optimize(tmp_path)
    plan = read(out / "plan.json")
    assert plan["makespan_opt"] == pytest.approx(7.0, abs=1e-9)
    ratios = {(r["m"], r["s"]): r["r"] for r in plan["ratios"]}
    assert ratios == {(1, 1): 0.0, (2, 1): 1.0, (1, 2): 1.0, (2, 2): 0.0}
    rep = read(out / "report.json")
    assert rep["reduction_pct"] == pytest.approx(100 * (1 - 7 / 9))
    assert (out / "report.txt").exists()


def _write_cfg(tmp_path, **changes):
    data = json.loads(open(S2M2).read())
    data.update(changes)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def test_optimize_zero_budget(tmp_path):
    out = optimize(tmp_path, _write_cfg(tmp_path, r_max=0.0))
    plan = read(out / "plan.json")
    assert plan["makespan_opt"] == plan["makespan_base"] == 9.0
    assert all(r["r"] == 0 for r in plan["ratios"])
    assert read(out / "report.json")["reduction_pct"] == 0.0


def test_optimize_debug_dumps(tmp_path):
    out = tmp_path / "d"
    assert run("optimize", "--config", S2M2, "--out", out, "--debug") == 0
    assert len(read(out / "dag.json")["edges"]) == 16
    assert "Subject To" in (out / "lp.txt").read_text()


def test_malformed_json_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "pipeline": ')
    assert run("optimize", "--config", bad, "--out", tmp_path) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error[config]:") and "\n" not in err and "line 1" in err


@pytest.mark.parametrize("change,key", [
    ({"r_max": 1.5}, "r_max"),
    ({"version": 2}, "version"),
    ({"seed": -1}, "seed"),
    ({"lambda_mode": "weird"}, "lambda_mode"),
    ({"timing": {"file": "missing.json"}}, "timing.file"),
    ({"phases": {"T_w": 1, "T_m": 3, "T_total": 4}}, "T_f"),
])
def test_schema_errors_name_the_key(tmp_path, capsys, change, key):
    assert run("optimize", "--config", _write_cfg(tmp_path, **change), "--out", tmp_path) == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error[config]:") and key in err


def test_missing_required_key(tmp_path, capsys):
    data = json.loads(open(S2M2).read())
    del data["pipeline"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(data))
    assert run("optimize", "--config", path, "--out", tmp_path) == 2
    assert "'pipeline'" in capsys.readouterr().err


def test_timing_from_file(tmp_path):
    (tmp_path / "prof.json").write_text(json.dumps(
        {"per_stage": {"forward_ms": 1.0, "backward_act_ms": 1.0, "backward_param_ms": 1.0}}))
    cfg = parse_config({**json.loads(open(S2M2).read()), "timing": {"file": "prof.json"}}, tmp_path)
    assert cfg.profile.bounds == load_fixture("gpipe_s2m2").profile.bounds


def test_lp_failure_exit_code(tmp_path, monkeypatch, capsys):
    import pipefreeze.lp as lpmod

    class Fake:
        status, message, nit, x = 1, "Iteration limit reached", 0, None

    monkeypatch.setattr(lpmod, "linprog", lambda *a, **k: Fake())
    assert run("optimize", "--config", S2M2, "--out", tmp_path) == 3
    assert capsys.readouterr().err.startswith("error[lp]:")


def test_simulate_timelines(tmp_path):
    out = optimize(tmp_path)
    assert run("simulate", "--config", S2M2, "--plan", out / "plan.json", "--out", out) == 0
    base = GanttTimeline.from_json(read(out / "gantt_baseline.json"))
    opt = GanttTimeline.from_json(read(out / "gantt_optimized.json"))
    assert base.makespan == 9.0 and base.span() == 9.0
    assert opt.makespan == pytest.approx(7.0) and opt.span() == pytest.approx(opt.makespan)
    opt.check()
    svg = (out / "gantt_optimized.svg").read_text()
    assert svg.startswith("<svg") and "GPU 1" in svg and "http" not in svg.replace("http://www.w3.org/2000/svg", "")


def test_simulate_half_ramp_durations(tmp_path):
    out = optimize(tmp_path)
    # fixture phases: T_m = 3, T_f = 5, so step 4 is half-way up the ramp
    assert run("simulate", "--config", S2M2, "--plan", out / "plan.json", "--out", out, "--step", 4, "--json") == 0
    plan = {(r["m"], r["s"]): r["r"] for r in read(out / "plan.json")["ratios"]}
    for b in read(out / "gantt_optimized.json")["blocks"]:
        dur = b["end"] - b["start"]
        if b["kind"] == "b":
            assert dur == pytest.approx(2.0 - 0.5 * plan[(b["m"], b["s"])] * 1.0)
        else:
            assert dur == 1.0
    assert not (out / "gantt_optimized.svg").exists()


def test_simulate_extras(tmp_path):
    out = optimize(tmp_path)
    assert run("simulate", "--config", S2M2, "--plan", out / "plan.json", "--out", out, "--masks", "--curve") == 0
    rows = read(out / "masks.json")
    assert len(rows) == 10 * 4
    with open(out / "mask_frequency.csv") as fh:
        assert next(csv.reader(fh)) == ["stage", "param", "freeze_frequency"]
    assert (out / "backward_curve.csv").read_text().startswith("stage,m,ratio,backward_ms")


def test_simulate_plan_mismatch(tmp_path, capsys):
    out = optimize(tmp_path)
    assert run("simulate", "--config", fixture_path("onefoneb_s4m8"), "--plan", out / "plan.json", "--out", out) == 2
    assert capsys.readouterr().err.startswith("error[config]: plan does not match")


def test_simulate_step_out_of_range(tmp_path):
    out = optimize(tmp_path)
    assert run("simulate", "--config", S2M2, "--plan", out / "plan.json", "--out", out, "--step", 99) == 2


def test_gantt_render(tmp_path):
    out = optimize(tmp_path)
    run("simulate", "--config", S2M2, "--plan", out / "plan.json", "--out", out, "--json")
    assert run("gantt", "--timeline", out / "gantt_optimized.json", "--out", tmp_path / "g") == 0
    assert (tmp_path / "g" / "gantt_optimized.svg").read_text().rstrip().endswith("</svg>")


def test_determinism(tmp_path):
    a, b = optimize(tmp_path, DEFAULT, "a"), optimize(tmp_path, DEFAULT, "b")
    for d in (a, b):
        assert run("simulate", "--config", DEFAULT, "--plan", d / "plan.json", "--out", d) == 0
    for name in ["plan.json", "report.json", "gantt_baseline.json", "gantt_optimized.json",
                 "gantt_baseline.svg", "gantt_optimized.svg"]:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_seed_flag_changes_noisy_monitoring(tmp_path):
    a = optimize(tmp_path, DEFAULT, "a")
    out = tmp_path / "c"
    assert run("optimize", "--config", DEFAULT, "--out", out, "--seed", 5) == 0
    assert (a / "plan.json").read_bytes() != (out / "plan.json").read_bytes()


def test_sandbox_scaling_small(tmp_path):
    out = tmp_path / "s"
    assert run("sandbox", "--objective", "quadratic", "--dim", 10, "--p", "1.0,0.5", "--eps", 1e-3,
               "--trials", 3, "--seed", 1, "--out", out) == 0
    with open(out / "sandbox_scaling.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["p"] for r in rows] == ["1", "0.5"]
    assert float(rows[0]["ratio"]) == 1.0


@pytest.mark.parametrize("argv", [["--p", "1.2"], ["--eps", "0"], ["--trials", "0"], ["--dim", "0"], ["--p", "a,b"]])
def test_sandbox_invalid_ranges(tmp_path, argv):
    assert run("sandbox", *argv, "--out", tmp_path) == 2


def test_sandbox_tta_and_report(tmp_path):
    out = optimize(tmp_path)
    assert run("sandbox", "--config", S2M2, "--plan", out / "plan.json", "--dim", 20, "--eps", 1e-3,
               "--trials", 2, "--out", out) == 0
    tta = read(out / "tta.json")
    assert tta["predicted_ratio"] > 0
    run("simulate", "--config", S2M2, "--plan", out / "plan.json", "--out", out, "--masks")
    rep_dir = tmp_path / "r"
    assert run("report", "--plan", out / "plan.json", "--masks", out / "masks.json",
               "--sandbox", out / "tta.json", "--out", rep_dir) == 0
    rep = read(rep_dir / "report.json")
    assert rep["p_eff_source"] == "sandbox"
    assert rep["avg_freeze_ratio"] is not None


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "pipefreeze.cli", "optimize", "--config", S2M2, "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "7" in res.stdout


def test_config_error_is_value_error():
    with pytest.raises(ConfigError):
        parse_config([])
