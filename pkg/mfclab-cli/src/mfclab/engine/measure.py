"""
Empirical measures, path ensembles and transport distances.

All distances take p-th powers in the cost matrix and apply the p-th root
once at the end.
"""

import logging
import struct
from dataclasses import dataclass

import numpy as np
import ot
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from mfclab.utils.errors import (
    CapExceeded,
    DimensionMismatch,
    GridMismatch,
    NoConvergence,
    SizeMismatch,
)
from mfclab.utils.rng import generator

logger = logging.getLogger(__name__)

EXACT_CAP = 512
SCALING_INNER_ITERS = 100
WEIGHT_TOL = 1e-12
ENSEMBLE_MAGIC = b"MKVE"
ENSEMBLE_VERSION = 1


@dataclass(frozen=True, eq=False)
class EmpiricalLaw:
    """Weighted cloud of n atoms in R^d."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1:
            raise SizeMismatch(f"An empirical law needs an (n, d) array with n >= 1, got shape {points.shape}")
        if np.isnan(points).any():
            raise ValueError("Empirical law has NaN coordinates")
        weights = np.asarray(self.weights, dtype=float).ravel()
        if weights.shape[0] != points.shape[0]:
            raise SizeMismatch(f"{points.shape[0]} atoms but {weights.shape[0]} weights")
        if (weights < 0).any() or abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError("Weights must be non-negative and sum to 1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, points) -> "EmpiricalLaw":
        points = np.asarray(points, dtype=float)
        n = points.shape[0]
        return cls(points, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, point) -> "EmpiricalLaw":
        return cls(np.atleast_2d(np.asarray(point, dtype=float)), np.ones(1))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.n, rtol=0, atol=WEIGHT_TOL))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def translate(self, shift) -> "EmpiricalLaw":
        return EmpiricalLaw(self.points + np.asarray(shift, dtype=float), self.weights)

    def subsample(self, size: int, seed: int) -> "EmpiricalLaw":
        """Seeded uniform subsample without replacement; the law itself when already small enough."""
        if size >= self.n:
            return self
        idx = np.sort(generator(seed, "subsample", self.n).choice(self.n, size=size, replace=False))
        return EmpiricalLaw.uniform(self.points[idx])


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """n sampled paths on a shared time grid, stored as an (n, steps+1, d) array."""

    trajectories: np.ndarray
    time_grid: np.ndarray
    allow_nan: bool = False

    def __post_init__(self):
        traj = np.asarray(self.trajectories, dtype=float)
        grid = np.asarray(self.time_grid, dtype=float)
        if traj.ndim == 2:
            traj = traj[:, :, None]
        if traj.ndim != 3 or traj.shape[1] != grid.shape[0]:
            raise GridMismatch(f"Trajectories of shape {traj.shape} do not fit a grid of {grid.shape[0]} points")
        if grid.shape[0] < 2 or grid[0] != 0.0 or (np.diff(grid) <= 0).any():
            raise GridMismatch("Time grid must start at 0 and be strictly increasing")
        if not self.allow_nan and not np.isfinite(traj).all():
            raise ValueError("Path ensemble contains non-finite values")
        object.__setattr__(self, "trajectories", traj)
        object.__setattr__(self, "time_grid", grid)

    @property
    def n(self) -> int:
        return self.trajectories.shape[0]

    @property
    def steps(self) -> int:
        return self.trajectories.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.trajectories.shape[2]

    @property
    def horizon(self) -> float:
        return float(self.time_grid[-1])

    def index_of(self, t: float) -> int:
        idx = int(np.searchsorted(self.time_grid, t - 1e-12))
        if idx >= self.time_grid.shape[0] or abs(self.time_grid[idx] - t) > 1e-9:
            raise GridMismatch(f"t={t} is not a point of the time grid")
        return idx

    def marginal(self, index: int) -> EmpiricalLaw:
        return EmpiricalLaw.uniform(self.trajectories[:, index, :])

    def terminal(self) -> EmpiricalLaw:
        return self.marginal(self.steps)

    # --- Persistence ---

    def save_binary(self, path: str):
        """Writes the flat binary ensemble format: header, time grid, then trajectories (float64, C order)."""
        header = ENSEMBLE_MAGIC + struct.pack("<IQQQ", ENSEMBLE_VERSION, self.n, self.steps, self.dim)
        with open(path, "wb") as f:
            f.write(header)
            f.write(self.time_grid.astype("<f8").tobytes())
            f.write(np.ascontiguousarray(self.trajectories, dtype="<f8").tobytes())

    @classmethod
    def load_binary(cls, path: str) -> "PathEnsemble":
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != ENSEMBLE_MAGIC:
            raise ValueError(f"{path} is not an ensemble file")
        version, n, steps, dim = struct.unpack_from("<IQQQ", raw, 4)
        if version != ENSEMBLE_VERSION:
            raise ValueError(f"Unsupported ensemble version {version}")
        offset = 4 + struct.calcsize("<IQQQ")
        grid = np.frombuffer(raw, dtype="<f8", count=steps + 1, offset=offset)
        offset += 8 * (steps + 1)
        data = np.frombuffer(raw, dtype="<f8", count=n * (steps + 1) * dim, offset=offset)
        return cls(data.reshape(n, steps + 1, dim).copy(), grid.copy(), allow_nan=True)

    def to_csv(self, path: str):
        """Long format: particle, step, time, x0..x{d-1}."""
        n, s1, d = self.trajectories.shape
        particle = np.repeat(np.arange(n), s1)
        step = np.tile(np.arange(s1), n)
        time = np.tile(self.time_grid, n)
        table = np.column_stack([particle, step, time, self.trajectories.reshape(n * s1, d)])
        header = ",".join(["particle", "step", "time"] + [f"x{j}" for j in range(d)])
        fmt = ["%d", "%d", "%.17g"] + ["%.17g"] * d
        np.savetxt(path, table, delimiter=",", header=header, comments="", fmt=fmt)


# --- Distances ---


def moment(law: EmpiricalLaw, q: float) -> float:
    """Sum of w_i |x_i|^q."""
    return float(law.weights @ np.linalg.norm(law.points, axis=1) ** q)


def wasserstein_1d(mu: EmpiricalLaw, nu: EmpiricalLaw, p: float) -> float:
    """Exact W_p on the line via the sorted quantile coupling; general weights."""
    if mu.dim != 1 or nu.dim != 1:
        raise DimensionMismatch(f"wasserstein_1d needs d=1, got d={mu.dim} and d={nu.dim}")
    _check_p(p)
    cost = ot.wasserstein_1d(mu.points[:, 0], nu.points[:, 0], mu.weights, nu.weights, p=p)
    return float(max(cost, 0.0)) ** (1.0 / p)


def wasserstein_exact(mu: EmpiricalLaw, nu: EmpiricalLaw, p: float, cap: int = EXACT_CAP) -> float:
    """
    Exact W_p between two equal-size uniform clouds by minimum-cost perfect matching.

    Raises CapExceeded above ``cap`` atoms; callers fall back to the entropic estimate.
    """
    _check_p(p)
    if mu.n != nu.n or not (mu.is_uniform and nu.is_uniform):
        raise SizeMismatch("Exact matching needs equal numbers of equally weighted atoms")
    if mu.dim != nu.dim:
        raise DimensionMismatch(f"Dimensions differ: {mu.dim} vs {nu.dim}")
    if mu.n > cap:
        raise CapExceeded(f"{mu.n} atoms exceeds the exact-solver cap of {cap}")
    cost = cdist(mu.points, nu.points) ** p
    return _matching_cost(cost, p)


def wasserstein_entropic(
    mu: EmpiricalLaw,
    nu: EmpiricalLaw,
    p: float,
    epsilon: float,
    max_iter: int = 10_000,
    strict: bool = False,
    epsilon_scaling: bool = False,
) -> tuple[float, bool]:
    """
    Sinkhorn-regularized transport cost^(1/p) for arbitrary sizes and weights.

    The primal cost of the entropic plan is an upper-biased estimate of W_p^p;
    the excess is at most epsilon * log(n) for n equally weighted atoms.
    With ``epsilon_scaling`` the regularization starts at the largest cost and
    decreases geometrically to ``epsilon``, warm-starting each stage, which
    makes small epsilon usable. ``max_iter`` then counts inner iterations.
    Returns (value, converged); converged is False when the marginal violation
    after ``max_iter`` iterations exceeds 1e-6.
    """
    _check_p(p)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if mu.dim != nu.dim:
        raise DimensionMismatch(f"Dimensions differ: {mu.dim} vs {nu.dim}")
    cost = cdist(mu.points, nu.points) ** p
    if epsilon_scaling:
        plan = ot.sinkhorn(
            mu.weights,
            nu.weights,
            cost,
            epsilon,
            method="sinkhorn_epsilon_scaling",
            numItermax=max(1, max_iter // SCALING_INNER_ITERS),
            numInnerItermax=SCALING_INNER_ITERS,
            epsilon0=max(float(cost.max()), epsilon),
            stopThr=1e-14,
            warn=False,
        )
    else:
        plan = ot.sinkhorn(
            mu.weights, nu.weights, cost, epsilon, method="sinkhorn_log", numItermax=max_iter, stopThr=1e-9, warn=False
        )
    violation = max(np.abs(plan.sum(axis=1) - mu.weights).sum(), np.abs(plan.sum(axis=0) - nu.weights).sum())
    value = float(max((plan * cost).sum(), 0.0)) ** (1.0 / p)
    converged = bool(np.isfinite(violation) and violation <= 1e-6)
    if not converged:
        message = f"Sinkhorn stopped after {max_iter} iterations with marginal violation {violation:.2e}"
        if strict:
            raise NoConvergence(message, result=value)
        logger.warning(message)
    return value, converged


def truncated_path_distance(a: PathEnsemble, b: PathEnsemble, t: float, p: float, cap: int = EXACT_CAP) -> float:
    """Exact matching distance between path ensembles under the cost sup_{s<=t} |x_s - y_s|, raised to p."""
    _check_p(p)
    _check_paths(a, b, cap)
    last = a.index_of(t)
    return _matching_cost(_sup_cost(a, b, range(last + 1)) ** p, p)


def truncated_path_distance_with_bias(
    a: PathEnsemble, b: PathEnsemble, t: float, p: float, cap: int = EXACT_CAP
) -> tuple[float, float]:
    """
    The path distance at the native grid together with a discretization-bias proxy.

    The proxy is the change in the distance when the sup-norm only sees every
    other grid point (twice the step).
    """
    _check_p(p)
    _check_paths(a, b, cap)
    last = a.index_of(t)
    fine = _matching_cost(_sup_cost(a, b, range(last + 1)) ** p, p)
    coarse_idx = list(range(0, last + 1, 2))
    if coarse_idx[-1] != last:
        coarse_idx.append(last)
    coarse = _matching_cost(_sup_cost(a, b, coarse_idx) ** p, p)
    return fine, abs(fine - coarse)


def _sup_cost(a: PathEnsemble, b: PathEnsemble, indices) -> np.ndarray:
    cost = np.zeros((a.n, b.n))
    for k in indices:
        np.maximum(cost, cdist(a.trajectories[:, k, :], b.trajectories[:, k, :]), out=cost)
    return cost


def _check_paths(a: PathEnsemble, b: PathEnsemble, cap: int):
    if a.time_grid.shape != b.time_grid.shape or not np.allclose(a.time_grid, b.time_grid, rtol=0, atol=1e-12):
        raise GridMismatch("Path ensembles do not share a time grid")
    if a.n != b.n:
        raise SizeMismatch(f"Path ensembles have {a.n} and {b.n} paths")
    if a.dim != b.dim:
        raise DimensionMismatch(f"Dimensions differ: {a.dim} vs {b.dim}")
    if a.n > cap:
        raise CapExceeded(f"{a.n} paths exceeds the exact-solver cap of {cap}")


def _matching_cost(cost: np.ndarray, p: float) -> float:
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean()) ** (1.0 / p)


def _check_p(p: float):
    if p < 1:
        raise ValueError(f"Wasserstein order must be >= 1, got {p}")
