import csv
import logging

import numpy as np
import pytest
from mfclab.engine.control import FeedbackPolicy, RelaxedControl, constant_control
from mfclab.engine.experiment import loglog_slope
from mfclab.engine.model import builtin_model
from mfclab.engine.optimize import solve_ou_oracle
from mfclab.engine.sim import (
    MeasureFlow,
    SimConfig,
    TestFunction,
    couple_from_mkv,
    empirical_view,
    initial_flow,
    martingale_defect,
    mkv_fixed_point,
    mkv_fixed_point_run,
    save_output,
    simulate_decoupled,
    simulate_nsystem,
)
from mfclab.utils.errors import GridMismatch, InvalidControl, InvalidParam, NumericalBlowup


@pytest.fixture
def ou():
    return builtin_model("ou_chaos", {"kappa": 1.0, "gamma": 1.0, "sigma0": 0.5})


@pytest.fixture
def idle(ou):
    """Zero feedback in the OU action set."""
    return FeedbackPolicy.constant([0.0], ou.action_set)


# --- Tests for SimConfig ---


@pytest.mark.parametrize(
    "changes",
    [
        {"n_particles": 0},
        {"steps": 0},
        {"seed": -1},
        {"scheme": "milstein"},
        {"blowup_threshold": 0.0},
    ],
)
def test_sim_config_rejects_bad_values(changes):
    with pytest.raises(InvalidParam):
        SimConfig(**changes)


def test_sim_config_time_grid_and_with():
    cfg = SimConfig(steps=4).with_(seed=3)
    assert cfg.seed == 3
    np.testing.assert_allclose(cfg.time_grid(2.0), [0.0, 0.5, 1.0, 1.5, 2.0])


# --- Tests for empirical_view ---


def test_empirical_view_ignores_particle_order():
    rng = np.random.default_rng(0)
    points = rng.standard_normal((257, 2)) * 1e3
    a = empirical_view(points, 1.0)
    b = empirical_view(points[rng.permutation(257)], 1.0)
    assert a.mean.tolist() == b.mean.tolist()
    assert a.p_moment == b.p_moment


# --- Tests for simulate_nsystem ---


def test_same_seed_same_paths(ou, idle):
    cfg = SimConfig(n_particles=20, steps=10, seed=5)
    a = simulate_nsystem(ou, cfg, idle)
    b = simulate_nsystem(ou, cfg, idle)
    c = simulate_nsystem(ou, cfg.with_(seed=6), idle)
    np.testing.assert_array_equal(a.paths.trajectories, b.paths.trajectories)
    assert not np.array_equal(a.paths.trajectories, c.paths.trajectories)


def test_nsystem_is_exchangeable(ou, idle):
    """Relabelling the particles permutes the trajectories and nothing else."""
    cfg = SimConfig(n_particles=16, steps=12, seed=2)
    ids = np.arange(16)
    forward = simulate_nsystem(ou, cfg, idle, particle_ids=ids)
    backward = simulate_nsystem(ou, cfg, idle, particle_ids=ids[::-1])
    np.testing.assert_array_equal(forward.paths.trajectories[::-1], backward.paths.trajectories)
    np.testing.assert_array_equal(forward.reward_samples[::-1], backward.reward_samples)


def test_deterministic_bang_path():
    model = builtin_model("bang_relaxed", {"epsilon": 0.0})
    output = simulate_nsystem(model, SimConfig(n_particles=3, steps=8), constant_control(1.0, [0.0, 1.0]))
    np.testing.assert_allclose(output.paths.trajectories[:, -1, 0], 1.0)
    # running reward -x^2 integrated on the left endpoints: -(0 + 1 + ... + 7) / 8^3
    np.testing.assert_allclose(output.running, -140.0 / 512.0)
    assert output.controls_applied(0).is_strict()


def test_relaxed_control_averages_the_drift():
    model = builtin_model("bang_relaxed", {"epsilon": 0.0})
    half = RelaxedControl.from_atoms([0.0, 1.0], [[(-1.0, 0.5), (1.0, 0.5)]])
    output = simulate_nsystem(model, SimConfig(n_particles=4, steps=8), half)
    np.testing.assert_allclose(output.paths.trajectories, 0.0)
    assert output.weights.shape == (4, 8, 2)
    assert not output.controls_applied(1).is_strict()


def test_per_particle_controls_must_match_n(ou):
    controls = [constant_control(0.0, [0.0, 1.0])] * 3
    with pytest.raises(InvalidControl):
        simulate_nsystem(ou, SimConfig(n_particles=4, steps=4), controls)


def test_particle_id_count_is_checked(ou, idle):
    with pytest.raises(InvalidParam):
        simulate_nsystem(ou, SimConfig(n_particles=4, steps=4), idle, particle_ids=[0, 1])


def test_blowup_is_flagged(caplog):
    model = builtin_model("lq_meanfield", {"beta": 100.0})
    cfg = SimConfig(n_particles=10, steps=10, blowup_threshold=1e3)
    policy = FeedbackPolicy.constant([0.0], model.action_set)

    with caplog.at_level(logging.WARNING, logger="mfclab"):
        output = simulate_nsystem(model, cfg, policy)

    assert output.diagnostics.blowup
    assert output.diagnostics.steps_completed < 10
    assert np.isnan(output.reward_samples).all()
    assert "exceeded" in caplog.text


def test_blowup_raises_in_strict_mode():
    model = builtin_model("lq_meanfield", {"beta": 100.0})
    cfg = SimConfig(n_particles=10, steps=10, blowup_threshold=1e3)
    with pytest.raises(NumericalBlowup) as excinfo:
        simulate_nsystem(model, cfg, FeedbackPolicy.constant([0.0], model.action_set), strict=True)
    assert excinfo.value.output.diagnostics.blowup


def test_ou_particle_variance_matches_the_variance_ode():
    model = builtin_model("ou_chaos", {"kappa": 1.0, "sigma0": 1.0})
    cfg = SimConfig(n_particles=2000, steps=200, seed=21)
    output = simulate_nsystem(model, cfg, FeedbackPolicy.constant([0.0], model.action_set))

    expected = solve_ou_oracle(model, cfg.steps).variance[-1]
    sample = output.paths.trajectories[:, -1, 0].var(ddof=1)
    std_error = expected * np.sqrt(2.0 / (cfg.n_particles - 1))
    assert abs(sample - expected) < 3 * std_error


def test_euler_change_shrinks_when_the_step_halves():
    """Noise-free OU with a deterministic start: the terminal mean is (1 - dt/2)^N x0."""
    model = builtin_model("ou_chaos", {"kappa": 1.0, "gamma": 0.5, "sigma0": 0.0, "x0_mean": 2.0, "x0_std": 0.0})
    idle = FeedbackPolicy.constant([0.0], model.action_set)
    means = []
    for steps in (20, 40, 80):
        output = simulate_nsystem(model, SimConfig(n_particles=3, steps=steps), idle)
        means.append(float(output.paths.trajectories[:, -1, 0].mean()))

    first, second = means[1] - means[0], means[2] - means[1]
    assert 0.3 < second / first < 0.8
    assert abs(means[-1] - 2.0 * np.exp(-0.5)) < abs(means[0] - 2.0 * np.exp(-0.5))


def _moment_ratio(model, output):
    """sup_t E|X_t|^p' / (1 + E int |a|^p' dt) over the particles of one run."""
    p_prime = model.exponents.p_prime
    traj = output.paths.trajectories
    state = (np.linalg.norm(traj, axis=2) ** p_prime).mean(axis=0).max()
    dt = np.diff(output.paths.time_grid)
    action = (output.weights * np.linalg.norm(output.actions, axis=3) ** p_prime).sum(axis=2)
    return state / (1.0 + (action @ dt).mean())


def test_moments_stay_inside_an_envelope_as_n_and_steps_grow():
    model = builtin_model("lq_meanfield")
    policy = FeedbackPolicy.linear([-1.0, -1.0], [0.0, 0.0], [0.0, 1.0], model.action_set)
    ratios = [
        _moment_ratio(model, simulate_nsystem(model, SimConfig(n_particles=n, steps=steps, seed=2), policy))
        for n, steps in [(1000, 25), (2000, 50), (4000, 100)]
    ]
    assert all(np.isfinite(ratios))
    assert max(ratios) < 2.0
    assert all(b < 1.1 * a for a, b in zip(ratios, ratios[1:]))


# --- Tests for the decoupled system and the fixed point ---


def test_decoupled_particles_depend_only_on_their_id(ou, idle):
    cfg = SimConfig(n_particles=10, steps=6, seed=4)
    flow = initial_flow(ou, cfg)
    full = simulate_decoupled(ou, cfg, flow, idle)
    head = simulate_decoupled(ou, cfg.with_(n_particles=4), flow, idle)
    np.testing.assert_array_equal(full.paths.trajectories[:4], head.paths.trajectories)


def test_decoupled_flow_length_is_checked(ou, idle):
    cfg = SimConfig(n_particles=5, steps=6)
    with pytest.raises(GridMismatch):
        simulate_decoupled(ou, cfg.with_(steps=3), initial_flow(ou, cfg), idle)


def test_fixed_point_keeps_the_mean_when_gamma_equals_kappa(ou, idle):
    cfg = SimConfig(n_particles=2000, steps=20, seed=1)
    flow, iterations, converged = mkv_fixed_point(ou, cfg, idle, max_iter=50, tol=1e-8, check_lipschitz=False)
    assert converged
    assert iterations < 30
    # with gamma = kappa the mean only moves with the averaged noise
    np.testing.assert_allclose(flow.means[:, 0], flow.means[0, 0], atol=0.05)

    again = MeasureFlow.from_paths(simulate_decoupled(ou, cfg, flow, idle).paths, ou.p)
    assert flow.distance(again) < 1e-7


def test_fixed_point_warns_without_convergence(ou, idle, caplog):
    cfg = SimConfig(n_particles=50, steps=10)
    with caplog.at_level(logging.WARNING, logger="mfclab"):
        _, iterations, converged = mkv_fixed_point(ou, cfg, idle, max_iter=1, tol=1e-12, check_lipschitz=False)
    assert not converged
    assert iterations == 1
    assert "did not reach" in caplog.text


def test_coupling_gap_shrinks_with_n(ou, idle):
    big = SimConfig(n_particles=2000, steps=20, seed=3)
    flow, _, _ = mkv_fixed_point(ou, big, idle, check_lipschitz=False)
    _, _, small_gap = couple_from_mkv(ou, big.with_(n_particles=20), flow, idle)
    _, _, big_gap = couple_from_mkv(ou, big, flow, idle)
    assert 0.0 <= big_gap < small_gap


def test_coupling_gap_decays_like_one_over_n(ou, idle):
    reference = SimConfig(n_particles=20000, steps=20, seed=99)
    flow, _, converged = mkv_fixed_point(ou, reference, idle, tol=1e-8, check_lipschitz=False)
    assert converged
    ns = [50, 200, 800, 3200]
    medians = []
    for n in ns:
        gaps = [couple_from_mkv(ou, reference.with_(n_particles=n, seed=seed), flow, idle)[2] for seed in range(40)]
        medians.append(float(np.median(gaps)))

    assert medians[-1] < medians[0]
    assert -1.4 <= loglog_slope(ns, medians) <= -0.6


# --- Tests for martingale_defect ---


def test_martingale_defect_vanishes_under_the_driving_flow(ou, idle):
    cfg = SimConfig(n_particles=4000, steps=20, seed=8)
    flow = initial_flow(ou, cfg)
    output = simulate_decoupled(ou, cfg, flow, idle)
    mean, std_error = martingale_defect(ou, output, flow, TestFunction.coordinate(), 0.0, 1.0)
    assert abs(mean) < 4 * std_error


def test_martingale_defect_detects_a_wrong_flow(ou, idle):
    cfg = SimConfig(n_particles=4000, steps=20, seed=8)
    flow = initial_flow(ou, cfg)
    output = simulate_decoupled(ou, cfg, flow, idle)
    mean, _ = martingale_defect(ou, output, flow.shifted([1.0]), TestFunction.coordinate(), 0.0, 1.0)
    assert mean == pytest.approx(-1.0, abs=0.05)


@pytest.fixture(scope="module")
def ou_limit():
    """OU model started away from zero, its simulated MKV flow and the final decoupled run."""
    model = builtin_model("ou_chaos", {"kappa": 1.0, "gamma": 1.0, "sigma0": 0.5, "x0_mean": 1.0})
    cfg = SimConfig(n_particles=4000, steps=100, seed=12)
    idle = FeedbackPolicy.constant([0.0], model.action_set)
    flow, _, converged, output = mkv_fixed_point_run(model, cfg, idle, max_iter=50, tol=1e-8, check_lipschitz=False)
    assert converged
    return model, flow, output


NONLINEAR_TEST_FUNCTIONS = [TestFunction.quadratic(), TestFunction.bump([0.3], width=0.7)]


@pytest.mark.parametrize("test_fn", NONLINEAR_TEST_FUNCTIONS, ids=["quadratic", "bump"])
def test_martingale_defect_vanishes_under_the_mkv_flow(ou_limit, test_fn):
    model, flow, output = ou_limit
    for s, t in [(0.0, 1.0), (0.5, 1.0)]:
        mean, std_error = martingale_defect(model, output, flow, test_fn, s, t)
        assert std_error > 0
        assert abs(mean) < 4 * std_error


@pytest.mark.parametrize("test_fn", NONLINEAR_TEST_FUNCTIONS, ids=["quadratic", "bump"])
def test_martingale_defect_rejects_a_shifted_mkv_flow(ou_limit, test_fn):
    model, flow, output = ou_limit
    mean, std_error = martingale_defect(model, output, flow.shifted([1.0]), test_fn, 0.0, 1.0)
    assert abs(mean) > 5 * std_error


def test_martingale_defect_needs_ordered_times(ou, idle):
    cfg = SimConfig(n_particles=10, steps=4)
    flow = initial_flow(ou, cfg)
    output = simulate_decoupled(ou, cfg, flow, idle)
    with pytest.raises(GridMismatch):
        martingale_defect(ou, output, flow, TestFunction.quadratic(), 0.5, 0.5)


def test_bump_derivatives_match_finite_differences():
    bump = TestFunction.bump([0.3, -0.2], width=0.7)
    x = np.array([[0.1, 0.4], [-0.5, 0.0]])
    h = 1e-5
    for j in range(2):
        step = np.zeros(2)
        step[j] = h
        numeric = (bump.value(x + step) - bump.value(x - step)) / (2 * h)
        np.testing.assert_allclose(bump.gradient(x)[:, j], numeric, rtol=1e-6)
        numeric_hess = (bump.gradient(x + step) - bump.gradient(x - step)) / (2 * h)
        np.testing.assert_allclose(bump.hessian(x)[:, :, j], numeric_hess, rtol=1e-5, atol=1e-9)


# --- Tests for save_output ---


def test_save_output_writes_ensemble_and_summary(tmp_path, ou, idle):
    output = simulate_nsystem(ou, SimConfig(n_particles=5, steps=3), idle)
    files = save_output(output, str(tmp_path / "run"))

    with open(files["summary"], newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["particle", "x_T_0", "running", "terminal", "reward"]
    assert len(rows) == 6
    assert (tmp_path / "run" / "ensemble.bin").exists()
