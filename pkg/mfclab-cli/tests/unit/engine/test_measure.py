import numpy as np
import pytest
from mfclab.engine.measure import (
    EmpiricalLaw,
    PathEnsemble,
    moment,
    truncated_path_distance,
    truncated_path_distance_with_bias,
    wasserstein_1d,
    wasserstein_entropic,
    wasserstein_exact,
)
from mfclab.utils.errors import CapExceeded, DimensionMismatch, GridMismatch, NoConvergence, SizeMismatch


@pytest.fixture
def rng():
    """Local generator so each test sees the same instances."""
    return np.random.default_rng(1234)


def _ensemble(rng, n=6, steps=4, shift=0.0):
    grid = np.linspace(0.0, 1.0, steps + 1)
    traj = rng.standard_normal((n, steps + 1, 1)).cumsum(axis=1) + shift
    return PathEnsemble(traj, grid)


# --- Tests for EmpiricalLaw ---


def test_law_rejects_bad_weights():
    with pytest.raises(ValueError, match="sum to 1"):
        EmpiricalLaw(np.zeros((2, 1)), np.array([0.5, 0.6]))


def test_law_rejects_weight_count_mismatch():
    with pytest.raises(SizeMismatch):
        EmpiricalLaw(np.zeros((3, 1)), np.array([0.5, 0.5]))


def test_law_rejects_nan_points():
    with pytest.raises(ValueError, match="NaN"):
        EmpiricalLaw.uniform(np.array([[0.0], [np.nan]]))


def test_law_mean_and_moment():
    law = EmpiricalLaw(np.array([[1.0], [-3.0]]), np.array([0.75, 0.25]))
    assert law.mean()[0] == pytest.approx(0.0)
    assert moment(law, 2) == pytest.approx(0.75 + 0.25 * 9)


def test_subsample_is_seeded_and_returns_self_when_small(rng):
    law = EmpiricalLaw.uniform(rng.standard_normal((40, 2)))
    a, b = law.subsample(10, seed=3), law.subsample(10, seed=3)
    assert a.n == 10
    np.testing.assert_array_equal(a.points, b.points)
    assert law.subsample(40, seed=3) is law


# --- Tests for wasserstein_1d / wasserstein_exact ---


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_exact_matches_sorted_quantile_solution(rng, p):
    """The assignment solver and the 1-D quantile coupling agree on random instances."""
    for _ in range(100):
        n = int(rng.integers(1, 65))
        mu = EmpiricalLaw.uniform(rng.standard_normal(n))
        nu = EmpiricalLaw.uniform(2.0 * rng.standard_normal(n) + 1.0)
        assert wasserstein_exact(mu, nu, p) == pytest.approx(wasserstein_1d(mu, nu, p), abs=1e-10)


def test_wasserstein_1d_rejects_higher_dimension(rng):
    law = EmpiricalLaw.uniform(rng.standard_normal((4, 2)))
    with pytest.raises(DimensionMismatch):
        wasserstein_1d(law, law, 1.0)


def test_wasserstein_1d_general_weights():
    mu = EmpiricalLaw(np.array([0.0, 1.0]), np.array([0.5, 0.5]))
    nu = EmpiricalLaw.dirac([1.0])
    assert wasserstein_1d(mu, nu, 1.0) == pytest.approx(0.5)


def test_exact_metric_axioms(rng):
    for _ in range(200):
        n = int(rng.integers(1, 33))
        a, b, c = (EmpiricalLaw.uniform(rng.standard_normal((n, 2)) + rng.standard_normal(2)) for _ in range(3))
        ab, ba = wasserstein_exact(a, b, 2.0), wasserstein_exact(b, a, 2.0)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert wasserstein_exact(a, a, 2.0) == 0.0
        assert wasserstein_exact(a, c, 2.0) <= ab + wasserstein_exact(b, c, 2.0) + 1e-12


def test_exact_translation(rng):
    law = EmpiricalLaw.uniform(rng.standard_normal((20, 2)))
    shift = np.array([0.3, -0.4])
    assert wasserstein_exact(law, law.translate(shift), 2.0) == pytest.approx(0.5, rel=1e-9)


def test_exact_cap_and_shape_errors(rng):
    big = EmpiricalLaw.uniform(rng.standard_normal(10))
    with pytest.raises(CapExceeded):
        wasserstein_exact(big, big, 1.0, cap=8)
    with pytest.raises(SizeMismatch):
        wasserstein_exact(big, EmpiricalLaw.uniform(rng.standard_normal(9)), 1.0)
    with pytest.raises(DimensionMismatch):
        wasserstein_exact(big, EmpiricalLaw.uniform(rng.standard_normal((10, 2))), 1.0)


def test_order_below_one_is_rejected(rng):
    law = EmpiricalLaw.uniform(rng.standard_normal(3))
    with pytest.raises(ValueError, match=">= 1"):
        wasserstein_exact(law, law, 0.5)


# --- Tests for wasserstein_entropic ---


def test_entropic_upper_bounds_exact(rng):
    mu = EmpiricalLaw.uniform(rng.standard_normal((15, 2)))
    nu = EmpiricalLaw.uniform(rng.standard_normal((15, 2)) + 1.0)

    value, converged = wasserstein_entropic(mu, nu, 2.0, epsilon=0.1)

    assert converged
    assert value >= wasserstein_exact(mu, nu, 2.0) - 1e-4


def test_entropic_with_epsilon_scaling_matches_exact(rng):
    mu = EmpiricalLaw.uniform(rng.standard_normal((64, 2)))
    nu = EmpiricalLaw.uniform(rng.standard_normal((64, 2)) + [3.0, 0.0])
    exact = wasserstein_exact(mu, nu, 2.0)

    value, converged = wasserstein_entropic(mu, nu, 2.0, epsilon=0.02, max_iter=200_000, epsilon_scaling=True)

    assert converged
    assert value == pytest.approx(exact, rel=0.02)
    # primal excess of the entropic plan is at most epsilon * log(n)
    assert value**2 - exact**2 <= 0.02 * np.log(64) + 1e-3


def test_entropic_handles_unequal_sizes(rng):
    mu = EmpiricalLaw.uniform(rng.standard_normal((7, 1)))
    nu = EmpiricalLaw.uniform(rng.standard_normal((12, 1)))
    value, converged = wasserstein_entropic(mu, nu, 1.0, epsilon=0.2)
    assert converged and value > 0


def test_entropic_non_convergence_flag_and_strict(rng, caplog):
    mu = EmpiricalLaw.uniform(rng.standard_normal((30, 2)))
    nu = EmpiricalLaw.uniform(3.0 * rng.standard_normal((30, 2)))

    value, converged = wasserstein_entropic(mu, nu, 2.0, epsilon=1e-3, max_iter=1)
    assert not converged
    assert np.isfinite(value)
    assert "Sinkhorn stopped" in caplog.text

    with pytest.raises(NoConvergence) as info:
        wasserstein_entropic(mu, nu, 2.0, epsilon=1e-3, max_iter=1, strict=True)
    assert info.value.result == pytest.approx(value)


# --- Tests for PathEnsemble ---


def test_ensemble_grid_validation():
    with pytest.raises(GridMismatch):
        PathEnsemble(np.zeros((2, 3, 1)), np.array([0.0, 0.5]))
    with pytest.raises(GridMismatch):
        PathEnsemble(np.zeros((2, 2, 1)), np.array([0.1, 0.5]))


def test_ensemble_index_of_and_marginals(rng):
    ens = _ensemble(rng, n=5, steps=4)
    assert ens.index_of(0.5) == 2
    with pytest.raises(GridMismatch):
        ens.index_of(0.3)
    np.testing.assert_array_equal(ens.terminal().points, ens.trajectories[:, -1, :])


def test_ensemble_binary_file_preserves_data(tmp_path, rng):
    ens = _ensemble(rng, n=3, steps=5)
    path = tmp_path / "paths.bin"
    ens.save_binary(str(path))

    assert path.read_bytes()[:4] == b"MKVE"
    loaded = PathEnsemble.load_binary(str(path))
    np.testing.assert_array_equal(loaded.trajectories, ens.trajectories)
    np.testing.assert_array_equal(loaded.time_grid, ens.time_grid)


def test_ensemble_binary_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(ValueError, match="not an ensemble"):
        PathEnsemble.load_binary(str(path))


def test_ensemble_csv_is_long_format(tmp_path, rng):
    ens = _ensemble(rng, n=2, steps=3)
    path = tmp_path / "paths.csv"
    ens.to_csv(str(path))

    lines = path.read_text().splitlines()
    assert lines[0] == "particle,step,time,x0"
    assert len(lines) == 1 + 2 * 4


# --- Tests for truncated_path_distance ---


def test_path_distance_of_shifted_copy(rng):
    ens = _ensemble(rng)
    shifted = PathEnsemble(ens.trajectories + 0.7, ens.time_grid)
    assert truncated_path_distance(ens, ens, 1.0, 2.0) == 0.0
    assert truncated_path_distance(ens, shifted, 1.0, 2.0) == pytest.approx(0.7)


def test_path_distance_grows_with_truncation_time(rng):
    a, b = _ensemble(rng), _ensemble(rng, shift=0.2)
    values = [truncated_path_distance(a, b, t, 1.0) for t in a.time_grid]
    assert all(x <= y + 1e-12 for x, y in zip(values, values[1:]))


def test_path_distance_with_bias_reports_coarse_gap(rng):
    a, b = _ensemble(rng, steps=8), _ensemble(rng, steps=8, shift=0.1)
    fine, bias = truncated_path_distance_with_bias(a, b, 1.0, 2.0)
    assert fine == pytest.approx(truncated_path_distance(a, b, 1.0, 2.0))
    assert bias >= 0.0


def test_path_distance_requires_shared_grid(rng):
    a = _ensemble(rng, steps=4)
    b = _ensemble(rng, steps=5)
    with pytest.raises(GridMismatch):
        truncated_path_distance(a, b, 1.0, 1.0)
