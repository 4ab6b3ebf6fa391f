import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pipefreeze import PipelineConfig, ScheduleKind, StageTiming, TimingProfile, build_dag, build_schedule  # noqa: E402


def make_instance(kind="gpipe", R=2, M=2, C=1, f=1.0, act=1.0, param=1.0):
    cfg = PipelineConfig(ScheduleKind.parse(kind), R, C, M)
    tl = build_schedule(cfg)
    dag = build_dag(tl, cfg)
    prof = TimingProfile.from_stage_defaults(cfg, StageTiming(f, act, param))
    return cfg, tl, dag, prof


@pytest.fixture
def s2m2():
    return make_instance()


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].strip("[]C"))):
        terminalreporter.write_line(line)
