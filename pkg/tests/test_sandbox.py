import numpy as np
import pytest

from conftest import make_instance
from oracles import naive_sgd
from pipefreeze.errors import DivergenceError, DomainError
from pipefreeze.freezectl import PhasePlan
from pipefreeze.lp import FreezePlan, optimize_freeze_plan
from pipefreeze.sandbox import (
    LogisticToy,
    MaskPolicy,
    NoMask,
    PlanDriven,
    Quadratic,
    SgdHyper,
    UniformBernoulli,
    UniformExactCount,
    default_eta,
    estimate_p_eff,
    plan_update_floor,
    run_masked_sgd,
    scaling_experiment,
    steps_to_epsilon,
    tta_experiment,
    write_scaling_csv,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_one_dimensional_contraction():
    run = run_masked_sgd(Quadratic([1.0]), NoMask(), SgdHyper(eta=0.5, T_total=3, theta0=[1.0]), rng())
    assert run.theta_final[0] == pytest.approx(0.125)
    assert run.grad_sq.tolist() == pytest.approx([1.0, 0.25, 0.0625])


def test_full_update_mask_is_identity():
    h = SgdHyper(eta=0.5, T_total=5, theta0=[1.0], keep_trajectory=True)
    a = run_masked_sgd(Quadratic([1.0]), NoMask(), h, rng())
    b = run_masked_sgd(Quadratic([1.0]), UniformBernoulli(1.0), h, rng())
    assert np.array_equal(a.trajectory, b.trajectory)


def test_matches_straight_line_reimplementation():
    d, eta, M, T = 100, 0.1, 4, 50
    h = SgdHyper(eta=eta, M=M, T_total=T, keep_trajectory=True)
    run = run_masked_sgd(Quadratic.isotropic(d), UniformBernoulli(0.5), h, rng(42))
    ref = naive_sgd(np.ones(d), None, eta, M, 0.5, T, 42)
    for k in range(T):
        assert np.allclose(run.trajectory[k], ref[k], rtol=0, atol=1e-14)
    assert np.allclose(run.theta_final, ref[T], atol=1e-14)


def test_steps_to_epsilon():
    run = run_masked_sgd(Quadratic([1.0]), NoMask(), SgdHyper(eta=0.5, T_total=10, theta0=[1.0]), rng())
    assert steps_to_epsilon(run, 0.7) == 2
    assert steps_to_epsilon(run, 1.0) == 1
    assert steps_to_epsilon(run, 0.2, criterion="last") == 3
    with pytest.raises(DomainError):
        steps_to_epsilon(run, 0.0)


def test_noise_floor_not_reached():
    obj = Quadratic.isotropic(10, sigma=1.0)
    run = run_masked_sgd(obj, NoMask(), SgdHyper(eta=0.2, T_total=300), rng(1))
    assert steps_to_epsilon(run, 1e-6) is None


def test_early_stop():
    h = SgdHyper(eta=0.5, T_total=1000, theta0=[1.0], stop_eps=0.7)
    assert run_masked_sgd(Quadratic([1.0]), NoMask(), h, rng()).steps == 2


def test_divergence_names_step():
    with pytest.raises(DivergenceError) as exc:
        run_masked_sgd(Quadratic([1.0]), NoMask(), SgdHyper(eta=5.0, T_total=10_000, theta0=[1.0]), rng())
    assert exc.value.step > 1


def test_stepsize_check():
    obj = Quadratic.isotropic(3)
    with pytest.raises(DomainError):
        run_masked_sgd(obj, NoMask(), SgdHyper(eta=1.0, M=4, T_total=2, check_stepsize=True), rng())
    run_masked_sgd(obj, NoMask(), SgdHyper(eta=default_eta(obj, 1.0, 4), M=4, T_total=2, check_stepsize=True), rng())


def test_p_eff_uniform_and_none():
    obj = Quadratic(np.linspace(0.5, 2.0, 20))
    run = run_masked_sgd(obj, UniformBernoulli(0.3), SgdHyper(eta=0.05, T_total=50), rng())
    assert estimate_p_eff(run) == pytest.approx(0.3, abs=1e-12)
    run = run_masked_sgd(obj, NoMask(), SgdHyper(eta=0.05, T_total=50), rng())
    assert estimate_p_eff(run) == 1.0
    run = run_masked_sgd(obj, UniformExactCount(0.25), SgdHyper(eta=0.05, T_total=20), rng())
    assert estimate_p_eff(run) == pytest.approx(0.75)


class FirstCoordinateOnly(MaskPolicy):
    def update_prob(self, t, M, d):
        p = np.zeros((M, d))
        p[:, 0] = 1.0
        return p


def test_p_eff_skewed_closed_form():
    T, eta = 3, 0.1
    run = run_masked_sgd(Quadratic([4.0, 1.0]), FirstCoordinateOnly(),
                         SgdHyper(eta=eta, T_total=T, theta0=[1.0, 1.0]), rng())
    e0 = np.array([16 * (1 - 4 * eta) ** (2 * t) for t in range(T)])
    expected = e0.sum() / (e0 + 1.0).sum()
    assert estimate_p_eff(run) == pytest.approx(expected, rel=1e-12)
    assert estimate_p_eff(run) > 0.5


def test_logistic_gradient_matches_finite_differences():
    obj = LogisticToy(50, 5, seed=1)
    x = np.random.default_rng(0).standard_normal(5)
    eps = 1e-6
    fd = np.array([(obj.value(x + eps * e) - obj.value(x - eps * e)) / (2 * eps) for e in np.eye(5)])
    assert np.allclose(obj.grad(x), fd, atol=1e-7)


def test_exact_count_policy_counts():
    U = UniformExactCount(0.5).draw(1, 4, 10, rng())
    assert (U.sum(axis=1) == 5).all()


def test_plan_driven_blocks():
    _, _, dag, prof = make_instance()
    plan = optimize_freeze_plan(dag, prof, 0.5)
    pol = PlanDriven(plan)
    p = pol.update_prob(1, 2, 4)
    # microbatch 2 frozen in stage 1, microbatch 1 frozen in stage 2
    assert p.tolist() == [[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]]
    assert plan_update_floor(plan) == 0.5
    phased = PlanDriven(plan, PhasePlan(1, 3, 5, 10))
    assert phased.update_prob(1, 2, 4).min() == 1.0
    assert phased.update_prob(3, 2, 4).max() == 0.0
    assert phased.update_prob(4, 2, 4).min() == 0.5


def test_scaling_p_one_is_baseline(tmp_path):
    rows = scaling_experiment(Quadratic.isotropic(10), [1.0, 0.5], 1e-3, trials=3, base_seed=0)
    assert rows[0].ratio == 1.0
    assert rows[1].ratio > 1.0
    write_scaling_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "p,trials,mean_T_eps,ratio,p_eff_hat"
    assert len(lines) == 3
    with pytest.raises(DomainError):
        scaling_experiment(Quadratic.isotropic(10), [0.0], 1e-3)


def test_tta_no_freezing_equal_steps():
    _, _, dag, prof = make_instance()
    plan = optimize_freeze_plan(dag, prof, 0.0)
    rep = tta_experiment(Quadratic.isotropic(20), plan, None, 1.0, 1.0, 1e-3, trials=3)
    assert rep.measured_ratio == 1.0
    assert rep.predicted_ratio == 1.0


def test_tta_prediction_arithmetic():
    _, _, dag, prof = make_instance()
    plan = optimize_freeze_plan(dag, prof, 0.5)
    rep = tta_experiment(Quadratic.isotropic(20), plan, None, 9.0, 7.0, 1e-3, trials=2, kappa=0.68)
    assert rep.predicted_ratio == pytest.approx(0.68 / rep.p_eff_hat)
    with pytest.raises(DomainError):
        tta_experiment(Quadratic.isotropic(20), plan, None, 0.0, 7.0, 1e-3, trials=1)


def test_tta_rejects_fully_frozen_stage():
    _, _, dag, prof = make_instance()
    plan = FreezePlan({a: 1.0 for a in dag.actions if a.is_backward}, {}, 6, 9, 6, 1.0)
    with pytest.raises(DomainError):
        tta_experiment(Quadratic.isotropic(4), plan, None, 9.0, 6.0, 1e-3, trials=1)
