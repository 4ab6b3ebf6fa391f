import numpy as np
import pytest

from pipefreeze.errors import ConfigError, DomainError, InsufficientMonitoringError
from pipefreeze.schedule import PipelineConfig, ScheduleKind, bwd, fwd
from pipefreeze.timing import (
    FreezeState,
    MonitorLog,
    StageTiming,
    TimingProfile,
    aggregate_monitoring,
    backward_time_curve,
    freeze_ratio_of,
    sample_execution,
)

B = bwd(1, 1)
F = fwd(1, 1)


@pytest.fixture
def prof():
    return TimingProfile({F: (3.0, 3.0), B: (1.0, 2.0)})


@pytest.mark.parametrize("ratio,expected", [(0.0, 2.0), (1.0, 1.0), (0.5, 1.5)])
def test_sample_execution_noiseless(prof, ratio, expected):
    assert sample_execution(prof, B, ratio) == expected


def test_sample_execution_noise_is_mean_one(prof):
    rng = np.random.default_rng(0)
    xs = [sample_execution(prof, B, 0.0, 0.2, rng) for _ in range(20000)]
    assert np.mean(xs) == pytest.approx(2.0, rel=0.01)
    assert min(xs) > 0


def test_sample_execution_rejects_bad_ratio(prof):
    with pytest.raises(DomainError):
        sample_execution(prof, B, 1.5)


def test_aggregate_discards_first_sample():
    log = MonitorLog()
    for t, x in enumerate([10, 8, 8]):
        log.record(B, t, x, FreezeState.NONE)
    for t, x in enumerate([5, 4, 4]):
        log.record(B, 10 + t, x, FreezeState.FULL)
    for t in range(3):
        log.record(F, t, 3.0, FreezeState.NONE)
    p = aggregate_monitoring(log)
    assert p.bounds[B] == (4.0, 8.0)
    assert p.bounds[F] == (3.0, 3.0)


def test_aggregate_single_sample_kept():
    log = MonitorLog()
    log.record(B, 1, 8.0, FreezeState.NONE)
    log.record(B, 2, 4.0, FreezeState.FULL)
    assert aggregate_monitoring(log).bounds[B] == (4.0, 8.0)


def test_aggregate_missing_bucket():
    log = MonitorLog()
    log.record(B, 1, 8.0, FreezeState.NONE)
    with pytest.raises(InsufficientMonitoringError):
        aggregate_monitoring(log)


def test_aggregate_clamps_inverted_noise():
    log = MonitorLog()
    log.record(B, 1, 4.0, FreezeState.NONE)
    log.record(B, 2, 5.0, FreezeState.FULL)
    lo, hi = aggregate_monitoring(log).bounds[B]
    assert lo <= hi


@pytest.mark.parametrize("w,r", [(2.0, 0.0), (1.0, 1.0), (1.25, 0.75)])
def test_freeze_ratio_of(prof, w, r):
    assert freeze_ratio_of(prof, B, w) == pytest.approx(r)


def test_freeze_ratio_of_unfreezable(prof):
    assert freeze_ratio_of(prof, F, 3.0) == 0.0
    with pytest.raises(DomainError):
        freeze_ratio_of(prof, B, 2.5)


def test_profile_validation():
    with pytest.raises(DomainError):
        TimingProfile({F: (1.0, 2.0)})
    with pytest.raises(DomainError):
        TimingProfile({B: (3.0, 2.0)})


def test_profile_json_roundtrip():
    cfg = PipelineConfig(ScheduleKind.GPIPE, 2, 1, 3)
    p = TimingProfile.from_stage_defaults(cfg, [StageTiming(1, 2, 3), StageTiming(2, 2, 1)])
    q = TimingProfile.from_json(p.to_json(), cfg)
    assert q.bounds == p.bounds
    assert p.bounds[bwd(2, 1)] == (2.0, 5.0)
    assert p.bounds[fwd(3, 2)] == (2.0, 2.0)
    assert set(p.freezable()) == {a for a in cfg.actions() if a.is_backward}


def test_profile_from_json_per_stage_missing_key():
    cfg = PipelineConfig(ScheduleKind.GPIPE, 1, 1, 1)
    with pytest.raises(ConfigError, match="backward_param_ms"):
        TimingProfile.from_json({"per_stage": {"forward_ms": 1, "backward_act_ms": 1}}, cfg)


def test_backward_time_curve_is_linear(prof):
    rows = backward_time_curve(prof)
    assert [r["backward_ms"] for r in rows] == pytest.approx([2.0 - r / 10 for r in range(11)])
