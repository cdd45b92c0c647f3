import numpy as np
import pytest
from mfclab.engine.control import (
    FeedbackPolicy,
    RelaxedControl,
    bounded_lipschitz_distance,
    chatter,
    constant_control,
    cycle_allocation,
    dump_control,
    effective_coefficients,
    load_control,
    markovian_projection,
    psd_sqrt,
    strict_from_path,
    truncate,
)
from mfclab.engine.model import ActionSet, builtin_model
from mfclab.engine.sim import SimConfig, simulate_nsystem
from mfclab.utils.errors import (
    ActionOutOfSet,
    ConfigError,
    GridMismatch,
    InvalidControl,
    NotPSD,
    RefinementTooCoarse,
)


@pytest.fixture
def half_half():
    """The 1/2-1/2 mixture of -1 and +1 on a single unit interval."""
    return RelaxedControl.from_atoms([0.0, 1.0], [[(-1.0, 0.5), (1.0, 0.5)]])


# --- Tests for RelaxedControl ---


def test_weights_must_sum_to_one():
    with pytest.raises(InvalidControl, match="sum to 1"):
        RelaxedControl.from_atoms([0.0, 1.0], [[(0.0, 0.4), (1.0, 0.4)]])


def test_grid_must_start_at_zero():
    with pytest.raises(InvalidControl, match="start at 0"):
        strict_from_path([1.0], [0.5, 1.0])


def test_arrays_are_copied_and_frozen():
    actions = np.zeros((1, 1, 1))
    q = RelaxedControl([0.0, 1.0], actions, np.ones((1, 1)))
    actions[0, 0, 0] = 5.0
    assert q.actions[0, 0, 0] == 0.0
    assert not q.actions.flags.writeable


def test_from_atoms_pads_with_zero_weight():
    q = RelaxedControl.from_atoms([0.0, 0.5, 1.0], [[(1.0, 1.0)], [(-1.0, 0.25), (1.0, 0.75)]])
    assert q.weights.shape == (2, 2)
    assert q.is_strict() is False
    assert len(q.atoms_at(0)) == 1


def test_strict_from_path_empty_input():
    with pytest.raises(InvalidControl):
        strict_from_path([], [0.0])


def test_validate_in_reports_offending_atom():
    q = constant_control(2.0, [0.0, 1.0])
    with pytest.raises(ActionOutOfSet, match="outside"):
        q.validate_in(ActionSet.box([-1.0], [1.0]))


def test_on_grid_requires_control_points_on_simulation_grid():
    q = strict_from_path([0.0, 1.0, 2.0], [0.0, 0.25, 0.5, 1.0])
    with pytest.raises(GridMismatch):
        q.on_grid(np.linspace(0.0, 1.0, 11))


def test_on_grid_maps_steps_to_intervals():
    q = strict_from_path([1.0, 2.0], [0.0, 0.5, 1.0])
    actions, weights = q.on_grid(np.linspace(0.0, 1.0, 5))
    assert actions[:, 0, 0].tolist() == [1.0, 1.0, 2.0, 2.0]
    assert weights.shape == (4, 1)


def test_dump_and_load_control_text(half_half):
    text = dump_control(half_half)
    again = load_control(text)
    np.testing.assert_array_equal(again.weights, half_half.weights)
    np.testing.assert_array_equal(again.actions, half_half.actions)


def test_load_control_rejects_unknown_document(tmp_path):
    path = tmp_path / "control.yaml"
    path.write_text("type: bangbang\n")
    with pytest.raises(ConfigError):
        load_control(str(path))


# --- Tests for truncate ---


def test_truncate_projects_radially():
    q = strict_from_path([[3.0, 4.0], [0.3, 0.4]], [0.0, 0.5, 1.0])
    out = truncate(q, 1.0)
    np.testing.assert_allclose(out.actions[:, 0], [[0.6, 0.8], [0.3, 0.4]])


def test_truncate_identity_inside_radius(half_half):
    assert truncate(half_half, 1.0) is half_half


def test_truncate_finite_set_stays_admissible():
    atoms = ActionSet.finite([-2.0, -0.5, 0.5, 2.0])
    q = RelaxedControl.from_atoms([0.0, 1.0], [[(2.0, 0.5), (-2.0, 0.5)]])
    out = truncate(q, 1.0, atoms)
    np.testing.assert_array_equal(out.actions[0, :, 0], [0.5, -0.5])
    out.validate_in(atoms)


def test_truncate_rejects_non_positive_radius(half_half):
    with pytest.raises(InvalidControl):
        truncate(half_half, 0.0)


# --- Tests for chatter ---


def test_chatter_half_half_refinement_two(half_half):
    strict = chatter(half_half, 2)
    assert strict.is_strict()
    np.testing.assert_allclose(strict.time_grid, [0.0, 0.5, 1.0])
    assert strict.actions[:, 0, 0].tolist() == [-1.0, 1.0]


def test_cycle_allocation_largest_remainder():
    cycle, counts = cycle_allocation(np.array([0.75, 0.25]), 4)
    assert cycle == 4
    assert counts.tolist() == [[3, 1]]


def test_cycle_allocation_spreads_interval_totals_over_cycles():
    cycle, counts = cycle_allocation(np.array([0.7, 0.3]), 256)
    assert cycle == 2
    assert counts.shape == (128, 2)
    assert (counts.sum(axis=1) == 2).all()
    # largest-remainder share of 256 cells: 179.2 -> 179, 76.8 -> 77
    assert counts.sum(axis=0).tolist() == [179, 77]


def _occupation_error(q, refinement, actions):
    path = chatter(q, refinement).actions[:, 0, 0]
    occupation = np.array([(path == a).mean() for a in actions])
    return float(np.abs(occupation - q.weights[0]).max())


def test_chatter_occupation_keeps_shrinking_for_uneven_weights():
    q = RelaxedControl.from_atoms([0.0, 1.0], [[(-1.0, 0.7), (1.0, 0.3)]])
    refinements = [8, 16, 32, 64, 128, 256]
    errors = [_occupation_error(q, r, (-1.0, 1.0)) for r in refinements]
    assert all(e < 1.0 / r for e, r in zip(errors, refinements))
    assert errors[-1] < 0.001 < errors[0]


def test_chatter_occupation_within_one_cell_for_random_weights():
    rng = np.random.default_rng(7)
    refinements = [8, 16, 32, 64, 128, 256]
    for _ in range(20):
        w = (1.0 + 3.0 * rng.dirichlet(np.ones(3))) / 6.0
        w[-1] = 1.0 - w[:-1].sum()
        q = RelaxedControl.from_atoms([0.0, 1.0], [[(-1.0, w[0]), (0.0, w[1]), (1.0, w[2])]])
        errors = [_occupation_error(q, r, (-1.0, 0.0, 1.0)) for r in refinements]
        assert all(e < 1.0 / r for e, r in zip(errors, refinements))


def test_chatter_three_quarter_pattern():
    q = RelaxedControl.from_atoms([0.0, 1.0], [[(-1.0, 0.75), (1.0, 0.25)]])
    assert chatter(q, 4).actions[:, 0, 0].tolist() == [-1.0, -1.0, -1.0, 1.0]


def test_chatter_too_coarse(half_half):
    with pytest.raises(RefinementTooCoarse):
        chatter(half_half, 1)


def test_chatter_of_strict_control_is_itself():
    q = strict_from_path([0.5, -0.5], [0.0, 0.5, 1.0])
    fine = chatter(q, 4)
    assert fine.actions[:, 0, 0].tolist() == [0.5] * 4 + [-0.5] * 4


def test_chatter_occupation_converges(half_half):
    gaps = [bounded_lipschitz_distance(chatter(half_half, 2**j), half_half, resolution=64) for j in range(1, 6)]
    assert gaps[-1] < gaps[0]
    assert gaps[-1] < 0.05


def test_chatter_gap_halves_with_dyadic_weights():
    q = RelaxedControl.from_atoms(
        [0.0, 0.5, 1.0],
        [[(-1.0, 0.5), (0.0, 0.25), (1.0, 0.25)], [(0.5, 0.75), (-0.5, 0.25)]],
    )
    gaps = [bounded_lipschitz_distance(chatter(q, 2**j), q, resolution=512) for j in range(2, 7)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_chatter_distance_decreases_for_random_controls():
    rng = np.random.default_rng(3)
    for _ in range(10):
        atoms = []
        for _ in range(2):
            w = (1.0 + 3.0 * rng.dirichlet(np.ones(3))) / 6.0
            w[-1] = 1.0 - w[:-1].sum()
            atoms.append([(-1.0, w[0]), (0.0, w[1]), (1.0, w[2])])
        q = RelaxedControl.from_atoms([0.0, 0.5, 1.0], atoms)
        gaps = [bounded_lipschitz_distance(chatter(q, 2**j), q, resolution=256) for j in range(3, 8)]
        rises = sum(b >= a for a, b in zip(gaps, gaps[1:]))
        assert rises <= 2
        assert gaps[-1] < gaps[0]


# --- Tests for effective_coefficients ---


def test_effective_coefficients_average_drift_and_root_covariance():
    model = builtin_model("bang_relaxed", {"epsilon": 0.3})
    x = np.zeros((4, 1))
    drift, vol = effective_coefficients(model, 0.0, x, model.view(x), np.array([[-1.0], [1.0]]), np.array([0.5, 0.5]))
    np.testing.assert_allclose(drift, 0.0)
    np.testing.assert_allclose(vol[:, 0, 0], 0.3)


def test_psd_sqrt_of_diagonal_and_failure():
    cov = np.array([[[4.0, 0.0], [0.0, 9.0]]])
    np.testing.assert_allclose(psd_sqrt(cov)[0], [[2.0, 0.0], [0.0, 3.0]], atol=1e-12)
    np.testing.assert_allclose(psd_sqrt(np.array([[[-1e-12]]]))[0], [[0.0]])
    with pytest.raises(NotPSD):
        psd_sqrt(np.array([[[-1.0]]]))


# --- Tests for FeedbackPolicy ---


def test_linear_policy_interpolates_between_knots():
    box = ActionSet.box([-10.0], [10.0])
    policy = FeedbackPolicy.linear([1.0, 3.0], [0.0, 2.0], [0.0, 1.0], box)
    np.testing.assert_allclose(policy(0.5, np.array([[1.0]])), [[2.0 * 1.0 + 1.0]])


def test_policy_output_is_projected():
    box = ActionSet.box([-1.0], [1.0])
    policy = FeedbackPolicy.constant([5.0], box)
    np.testing.assert_array_equal(policy(0.0, np.zeros((2, 1))), [[1.0], [1.0]])
    np.testing.assert_array_equal(policy.raw(0.0, np.zeros((1, 1))), [[5.0]])


def test_table_policy_uses_nearest_cell():
    box = ActionSet.box([-1.0], [1.0])
    values = np.array([[[-1.0], [1.0]], [[0.5], [-0.5]]])
    policy = FeedbackPolicy.table(values, [0.25, 0.75], [-1.0, 1.0], box)
    np.testing.assert_array_equal(policy(0.8, np.array([[-2.0], [0.9]])), [[0.5], [-0.5]])


def test_policy_parameter_count_is_checked():
    with pytest.raises(InvalidControl, match="parameters"):
        FeedbackPolicy("constant", [1.0, 2.0], ActionSet.box([-1.0], [1.0]))


def test_policy_dump_and_load(tmp_path):
    policy = FeedbackPolicy.linear([1.0, -1.0], [0.1, 0.2], [0.0, 1.0], ActionSet.box([-2.0], [2.0]))
    path = tmp_path / "policy.yaml"
    dump_control(policy, str(path))
    again = load_control(str(path))
    assert again.family == "linear"
    np.testing.assert_array_equal(again.theta, policy.theta)


# --- Tests for diagnostics ---


def test_bounded_lipschitz_distance_is_zero_on_itself_and_capped(half_half):
    far = constant_control(100.0, [0.0, 1.0])
    assert bounded_lipschitz_distance(half_half, half_half) == pytest.approx(0.0, abs=1e-12)
    assert bounded_lipschitz_distance(half_half, far) == pytest.approx(2.0)


def test_markovian_projection_recovers_feedback():
    """Projecting a run driven by a state-independent policy gives back its action."""
    model = builtin_model("lq_meanfield")
    policy = FeedbackPolicy.constant([0.7], model.action_set)
    output = simulate_nsystem(model, SimConfig(n_particles=50, steps=8, seed=1), policy)

    table = markovian_projection(output, 2, 3, model.action_set)
    assert table.family == "table"
    np.testing.assert_allclose(table.theta, 0.7)
