"""
Strict, relaxed and feedback controls.

A RelaxedControl is piecewise constant in time: interval k of its grid carries
finitely many weighted atoms. Intervals are padded to a common atom count with
zero-weight copies of their first atom so the whole control is two arrays.
"""

import logging
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
import ot
import yaml

from mfclab.engine.model import ActionSet, MeasureView, ModelSpec
from mfclab.utils.errors import (
    ActionOutOfSet,
    ConfigError,
    GridMismatch,
    InvalidControl,
    NotPSD,
    RefinementTooCoarse,
)

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12
PSD_TOL = 1e-10
GRID_TOL = 1e-9


# ==============================================================================
# Relaxed controls
# ==============================================================================


@dataclass(frozen=True, eq=False)
class RelaxedControl:
    time_grid: np.ndarray
    actions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        grid = np.array(self.time_grid, dtype=float)
        actions = np.array(self.actions, dtype=float)
        weights = np.array(self.weights, dtype=float)
        if grid.ndim != 1 or grid.shape[0] < 2:
            raise InvalidControl("Time grid needs at least two points")
        if abs(grid[0]) > GRID_TOL or (np.diff(grid) <= 0).any():
            raise InvalidControl("Time grid must start at 0 and be strictly increasing")
        if actions.ndim != 3 or weights.shape != actions.shape[:2] or actions.shape[0] != grid.shape[0] - 1:
            raise InvalidControl(
                f"Expected actions (K, J, k) and weights (K, J) for K={grid.shape[0] - 1} intervals, "
                f"got {actions.shape} and {weights.shape}"
            )
        if not np.isfinite(actions).all() or (weights < 0).any():
            raise InvalidControl("Atoms must be finite with non-negative weights")
        if (np.abs(weights.sum(axis=1) - 1.0) > WEIGHT_TOL).any():
            raise InvalidControl("Atom weights must sum to 1 on every interval")
        for name, arr in (("time_grid", grid), ("actions", actions), ("weights", weights)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_atoms(cls, time_grid, atoms: Sequence[Sequence[tuple]]) -> "RelaxedControl":
        """Builds a control from per-interval lists of (action, weight) pairs."""
        if len(atoms) == 0 or any(len(interval) == 0 for interval in atoms):
            raise InvalidControl("Every interval needs at least one atom")
        dim = np.atleast_1d(np.asarray(atoms[0][0][0], dtype=float)).shape[0]
        width = max(len(interval) for interval in atoms)
        actions = np.zeros((len(atoms), width, dim))
        weights = np.zeros((len(atoms), width))
        for k, interval in enumerate(atoms):
            for j in range(width):
                a, w = interval[j] if j < len(interval) else (interval[0][0], 0.0)
                actions[k, j] = np.atleast_1d(np.asarray(a, dtype=float))
                weights[k, j] = w
        return cls(time_grid, actions, weights)

    @property
    def horizon(self) -> float:
        return float(self.time_grid[-1])

    @property
    def n_intervals(self) -> int:
        return self.actions.shape[0]

    @property
    def dim_action(self) -> int:
        return self.actions.shape[2]

    def is_strict(self) -> bool:
        return bool(((self.weights > 0).sum(axis=1) == 1).all())

    def interval_index(self, t: float) -> int:
        k = int(np.searchsorted(self.time_grid, t + GRID_TOL, side="right")) - 1
        return min(max(k, 0), self.n_intervals - 1)

    def atoms_at(self, k: int) -> list:
        keep = self.weights[k] > 0
        return [(a.copy(), float(w)) for a, w in zip(self.actions[k][keep], self.weights[k][keep])]

    def validate_in(self, action_set: ActionSet):
        if action_set.dim_action != self.dim_action:
            raise ActionOutOfSet(f"Control acts in R^{self.dim_action}, action set lives in R^{action_set.dim_action}")
        inside = action_set.contains(self.actions.reshape(-1, self.dim_action)).reshape(self.weights.shape)
        bad = (~inside) & (self.weights > 0)
        if bad.any():
            k, j = np.argwhere(bad)[0]
            raise ActionOutOfSet(f"Atom {self.actions[k, j].tolist()} on interval {k} is outside the action set")

    def on_grid(self, sim_grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Per-step atoms (S, J, k) and weights (S, J) on a simulation grid.

        Every control grid point must be a simulation grid point.
        """
        sim_grid = np.asarray(sim_grid, dtype=float)
        if abs(sim_grid[-1] - self.horizon) > GRID_TOL * max(1.0, self.horizon):
            raise GridMismatch(f"Control horizon {self.horizon} differs from simulation horizon {sim_grid[-1]}")
        pos = np.searchsorted(sim_grid, self.time_grid - GRID_TOL)
        pos = np.minimum(pos, sim_grid.shape[0] - 1)
        if (np.abs(sim_grid[pos] - self.time_grid) > GRID_TOL * max(1.0, self.horizon)).any():
            raise GridMismatch("Control grid points must lie on the simulation grid; refine the simulation steps")
        idx = np.searchsorted(self.time_grid, sim_grid[:-1] + GRID_TOL, side="right") - 1
        idx = np.clip(idx, 0, self.n_intervals - 1)
        return self.actions[idx], self.weights[idx]

    def occupation(self, resolution: int) -> tuple[np.ndarray, np.ndarray]:
        """Discrete probability on [0, T] x A: ``resolution`` equal time slices carrying the interval atoms."""
        edges = np.linspace(0.0, self.horizon, resolution + 1)
        mids = 0.5 * (edges[:-1] + edges[1:])
        idx = np.clip(np.searchsorted(self.time_grid, mids, side="right") - 1, 0, self.n_intervals - 1)
        acts = self.actions[idx]
        wts = self.weights[idx] / resolution
        keep = wts > 0
        times = np.broadcast_to(mids[:, None], wts.shape)[keep]
        points = np.column_stack([times, acts[keep]])
        return points, wts[keep]

    def to_dict(self) -> dict:
        return {
            "type": "relaxed",
            "time_grid": self.time_grid.tolist(),
            "atoms": [[[a.tolist(), w] for a, w in self.atoms_at(k)] for k in range(self.n_intervals)],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RelaxedControl":
        atoms = [[(a, float(w)) for a, w in interval] for interval in data["atoms"]]
        return cls.from_atoms(data["time_grid"], atoms)


def strict_from_path(actions, time_grid, action_set: ActionSet | None = None) -> RelaxedControl:
    """One unit-weight atom per interval."""
    acts = np.asarray(actions, dtype=float)
    if acts.size == 0:
        raise InvalidControl("strict_from_path needs at least one action")
    if acts.ndim == 1:
        acts = acts[:, None]
    q = RelaxedControl(time_grid, acts[:, None, :], np.ones((acts.shape[0], 1)))
    if action_set is not None:
        q.validate_in(action_set)
    return q


def constant_control(action, time_grid, action_set: ActionSet | None = None) -> RelaxedControl:
    grid = np.asarray(time_grid, dtype=float)
    return strict_from_path(np.tile(np.atleast_1d(action), (grid.shape[0] - 1, 1)), grid, action_set)


def truncate(q: RelaxedControl, radius: float, action_set: ActionSet | None = None) -> RelaxedControl:
    """
    Replaces every atom a by a if |a| <= radius and by radius * a / |a| otherwise.

    With a finite action set the image is the nearest atom of the set inside the
    ball (or the smallest-norm atom when the ball holds none), so the result stays
    admissible and |image| <= |a| still holds.
    """
    if not radius > 0:
        raise InvalidControl("Truncation radius must be positive")
    acts = q.actions.reshape(-1, q.dim_action)
    norms = np.linalg.norm(acts, axis=1)
    outside = norms > radius
    if not outside.any():
        return q
    out = acts.copy()
    if action_set is not None and action_set.kind == "finite":
        pts = action_set.points
        pnorms = np.linalg.norm(pts, axis=1)
        candidates = pts[pnorms <= radius] if (pnorms <= radius).any() else pts[[np.argmin(pnorms)]]
        dist = np.linalg.norm(acts[outside][:, None, :] - candidates[None, :, :], axis=2)
        out[outside] = candidates[np.argmin(dist, axis=1)]
    else:
        out[outside] = acts[outside] * (radius / norms[outside])[:, None]
    return RelaxedControl(q.time_grid, out.reshape(q.actions.shape), q.weights)


# ==============================================================================
# Chattering
# ==============================================================================


def _largest_remainder(weights: np.ndarray, cells: int) -> np.ndarray:
    raw = weights * cells
    alloc = np.floor(raw).astype(int)
    remainder = raw - alloc
    short = max(cells - int(alloc.sum()), 0)
    # stable sort keeps atom order on ties
    order = np.argsort(-remainder, kind="stable")
    alloc[order[:short]] += 1
    return alloc


def cycle_allocation(weights: np.ndarray, refinement: int) -> tuple[int, np.ndarray]:
    """
    Cycle length and per-cycle cell counts for one interval cut into ``refinement`` cells.

    The cycle C is the smallest divisor of ``refinement`` whose largest-remainder
    allocation gives every positive weight a cell. The interval totals are the
    largest-remainder allocation of all ``refinement`` cells, so each atom's
    occupation is within 1/refinement of its weight; they are spread over the
    cycles by always serving the atom furthest behind its share.
    Returns (C, counts) with counts of shape (refinement // C, J).
    """
    weights = np.asarray(weights, dtype=float)
    positive = weights > 0
    cycle = next(
        (
            c
            for c in range(max(1, int(positive.sum())), refinement + 1)
            if refinement % c == 0 and (_largest_remainder(weights, c)[positive] >= 1).all()
        ),
        None,
    )
    totals = _largest_remainder(weights, refinement)
    if cycle is None or (totals[positive] < 1).any():
        raise RefinementTooCoarse(
            f"Refinement {refinement} cannot give every one of {int(positive.sum())} atoms a cell; refine further"
        )

    share = totals / refinement
    taken = np.zeros(weights.shape[0], dtype=int)
    counts = np.zeros((refinement // cycle, weights.shape[0]), dtype=int)
    for cell in range(refinement):
        behind = np.where(taken < totals, share * (cell + 1) - taken, -np.inf)
        j = int(np.argmax(behind))
        taken[j] += 1
        counts[cell // cycle, j] += 1
    return cycle, counts


def chatter(q: RelaxedControl, refinement: int) -> RelaxedControl:
    """
    A strict control on the grid refined ``refinement`` times.

    Each original interval is cut into cycles; within a cycle the atoms occupy
    consecutive cells in fixed atom order. Over the interval every atom holds
    the largest-remainder share of cells for its weight.
    """
    if refinement < 1:
        raise InvalidControl("Refinement must be a positive integer")
    grid = q.time_grid
    fine = np.concatenate(
        [np.linspace(grid[k], grid[k + 1], refinement + 1)[:-1] for k in range(q.n_intervals)] + [grid[-1:]]
    )
    actions = np.empty((q.n_intervals * refinement, q.dim_action))
    for k in range(q.n_intervals):
        _, counts = cycle_allocation(q.weights[k], refinement)
        atoms = np.arange(q.weights.shape[1])
        cells = np.concatenate([np.repeat(atoms, row) for row in counts])
        actions[k * refinement : (k + 1) * refinement] = q.actions[k][cells]
    return strict_from_path(actions, fine)


# ==============================================================================
# Effective coefficients
# ==============================================================================


def effective_coefficients(model: ModelSpec, t: float, x, m: MeasureView, actions, weights):
    """
    Weight-averaged drift and the symmetric PSD root of the weight-averaged
    sigma sigma^T for each particle.

    Accepts one atom list shared by all particles, actions (J, k) / weights (J,),
    or per-particle atoms (n, J, k) / (n, J). Returns (n, d) and (n, d, d).
    """
    x = np.asarray(x, dtype=float)
    x = x.reshape(1, -1) if x.ndim == 1 else x
    n = x.shape[0]
    actions = np.asarray(actions, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        actions = np.broadcast_to(actions, (n,) + actions.shape)
        weights = np.broadcast_to(weights, (n,) + weights.shape)

    drift = np.zeros_like(x)
    cov = np.zeros((n, x.shape[1], x.shape[1]))
    for j in range(weights.shape[1]):
        w = weights[:, j]
        if not (w > 0).any():
            continue
        a = actions[:, j, :]
        drift += w[:, None] * np.asarray(model.drift(t, x, m, a), dtype=float)
        sig = np.asarray(model.volatility(t, x, m, a), dtype=float)
        cov += w[:, None, None] * np.einsum("nij,nkj->nik", sig, sig)
    return drift, psd_sqrt(cov)


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Batched symmetric square root; eigenvalues in [-1e-10, 0) are clamped to 0."""
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    eigval, eigvec = np.linalg.eigh(cov)
    if (eigval < -PSD_TOL).any():
        raise NotPSD(f"Averaged sigma sigma^T has eigenvalue {eigval.min():.3e}")
    root = np.sqrt(np.maximum(eigval, 0.0))
    return np.einsum("nij,nj,nkj->nik", eigvec, root, eigvec)


# ==============================================================================
# Feedback policies
# ==============================================================================

FAMILIES = ("constant", "linear", "table")


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """
    Markovian policy (t, x) -> action, always projected into the action set.

    ``linear``: knots t_0 < ... < t_{L-1}; at each knot a gain K (k x d) and an
    offset (k,), linearly interpolated in time, action = K x + offset.
    ``table``: one action per (time cell, state cell); ``time_grid`` holds the
    time-cell centers and ``x_grid`` the state-cell centers (d = 1).
    """

    family: str
    theta: np.ndarray
    action_set: ActionSet
    dim_state: int = 1
    time_grid: np.ndarray | None = None
    x_grid: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidControl(f"Unknown policy family '{self.family}'")
        theta = np.asarray(self.theta, dtype=float).ravel()
        if not np.isfinite(theta).all():
            raise InvalidControl("Policy parameters must be finite")
        object.__setattr__(self, "theta", theta)
        if self.time_grid is not None:
            object.__setattr__(self, "time_grid", np.asarray(self.time_grid, dtype=float))
        if self.x_grid is not None:
            object.__setattr__(self, "x_grid", np.asarray(self.x_grid, dtype=float))
        if theta.shape[0] != self.n_params:
            raise InvalidControl(f"{self.family} policy needs {self.n_params} parameters, got {theta.shape[0]}")

    @property
    def n_params(self) -> int:
        k, d = self.action_set.dim_action, self.dim_state
        if self.family == "constant":
            return k
        if self.family == "linear":
            return len(self.time_grid) * (k * d + k)
        if self.dim_state != 1:
            raise InvalidControl("Table policies support one-dimensional states")
        return len(self.time_grid) * len(self.x_grid) * k

    @classmethod
    def constant(cls, action, action_set: ActionSet, dim_state: int = 1) -> "FeedbackPolicy":
        return cls("constant", np.atleast_1d(action), action_set, dim_state)

    @classmethod
    def linear(cls, gains, offsets, knots, action_set: ActionSet, dim_state: int = 1) -> "FeedbackPolicy":
        """gains (L, k, d) or (L,) for k = d = 1; offsets (L, k) or (L,)."""
        knots = np.atleast_1d(np.asarray(knots, dtype=float))
        k = action_set.dim_action
        gains = np.asarray(gains, dtype=float).reshape(knots.shape[0], k * dim_state)
        offsets = np.asarray(offsets, dtype=float).reshape(knots.shape[0], k)
        return cls("linear", np.hstack([gains, offsets]).ravel(), action_set, dim_state, time_grid=knots)

    @classmethod
    def table(cls, values, t_centers, x_centers, action_set: ActionSet) -> "FeedbackPolicy":
        return cls("table", np.asarray(values, dtype=float).ravel(), action_set, 1, t_centers, x_centers)

    def with_theta(self, theta) -> "FeedbackPolicy":
        return FeedbackPolicy(self.family, theta, self.action_set, self.dim_state, self.time_grid, self.x_grid)

    def raw(self, t: float, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1, self.dim_state)
        n, k, d = x.shape[0], self.action_set.dim_action, self.dim_state
        if self.family == "constant":
            return np.tile(self.theta, (n, 1))
        if self.family == "linear":
            per_knot = self.theta.reshape(len(self.time_grid), k * d + k)
            coef = np.array([np.interp(t, self.time_grid, per_knot[:, c]) for c in range(k * d + k)])
            gain, offset = coef[: k * d].reshape(k, d), coef[k * d :]
            return x @ gain.T + offset
        table = self.theta.reshape(len(self.time_grid), len(self.x_grid), k)
        ti = int(np.argmin(np.abs(self.time_grid - t)))
        xi = np.argmin(np.abs(x[:, :1] - self.x_grid[None, :]), axis=1)
        return table[ti, xi]

    def __call__(self, t: float, x) -> np.ndarray:
        return self.action_set.project(self.raw(t, x))

    def to_dict(self) -> dict:
        data = {
            "type": "feedback",
            "family": self.family,
            "theta": self.theta.tolist(),
            "action_set": self.action_set.to_dict(),
            "dim_state": self.dim_state,
        }
        if self.time_grid is not None:
            data["time_grid"] = self.time_grid.tolist()
        if self.x_grid is not None:
            data["x_grid"] = self.x_grid.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FeedbackPolicy":
        return cls(
            data["family"],
            data["theta"],
            ActionSet.from_dict(data["action_set"]),
            data.get("dim_state", 1),
            data.get("time_grid"),
            data.get("x_grid"),
        )


def dump_control(control, path: str | None = None) -> str:
    """YAML text for a RelaxedControl or FeedbackPolicy; also written to ``path`` when given."""
    text = yaml.safe_dump(control.to_dict(), sort_keys=False)
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    return text


def load_control(source: str):
    """Reads a control from a YAML file path or YAML text."""
    text = source
    if "\n" not in source and not source.lstrip().startswith("{"):
        with open(source, "r", encoding="utf-8") as f:
            text = f.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Control file is not valid YAML: {e}") from e
    if not isinstance(data, dict) or data.get("type") not in ("relaxed", "feedback"):
        raise ConfigError("Control documents need a 'type' of 'relaxed' or 'feedback'")
    if data["type"] == "relaxed":
        return RelaxedControl.from_dict(data)
    return FeedbackPolicy.from_dict(data)


# ==============================================================================
# Diagnostics
# ==============================================================================


def bounded_lipschitz_distance(q1: RelaxedControl, q2: RelaxedControl, resolution: int = 256) -> float:
    """
    Optimal-transport distance between the occupation measures of two controls
    on [0, T] x A under the ground metric min(|t - s| + |a - b|, 2).
    """
    if abs(q1.horizon - q2.horizon) > GRID_TOL:
        raise GridMismatch(f"Controls have different horizons {q1.horizon} and {q2.horizon}")
    if q1.dim_action != q2.dim_action:
        raise InvalidControl("Controls act in different dimensions")
    p1, w1 = q1.occupation(resolution)
    p2, w2 = q2.occupation(resolution)
    cost = np.abs(p1[:, None, 0] - p2[None, :, 0]) + np.linalg.norm(p1[:, None, 1:] - p2[None, :, 1:], axis=2)
    cost = np.minimum(cost, 2.0)
    return float(ot.emd2(w1 / w1.sum(), w2 / w2.sum(), cost))


def markovian_projection(output, t_bins: int, x_bins: int, action_set: ActionSet) -> FeedbackPolicy:
    """
    A table policy whose cell action is the occupation-weighted mean action of a
    simulated run in that (t, x) cell, projected into the action set.
    Empty cells borrow the nearest populated state cell of the same time cell.
    """
    paths = output.paths
    if paths.dim != 1:
        raise InvalidControl("Markovian projection supports one-dimensional states")
    states = paths.trajectories[:, :-1, 0]
    finite = np.isfinite(states)
    if not finite.any():
        raise InvalidControl("Run has no finite states to project")
    mean_action = np.einsum("nsj,nsjk->nsk", output.weights, output.actions)

    times = paths.time_grid[:-1]
    t_edges = np.linspace(0.0, paths.horizon, t_bins + 1)
    lo, hi = float(states[finite].min()), float(states[finite].max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    x_edges = np.linspace(lo, hi, x_bins + 1)
    ti = np.clip(np.searchsorted(t_edges, times, side="right") - 1, 0, t_bins - 1)
    xi = np.clip(np.searchsorted(x_edges, np.where(finite, states, lo), side="right") - 1, 0, x_bins - 1)

    k = action_set.dim_action
    total = np.zeros((t_bins, x_bins, k))
    mass = np.zeros((t_bins, x_bins))
    dt = np.diff(paths.time_grid)
    cell_t = np.broadcast_to(ti[None, :], xi.shape)
    w = np.where(finite, dt[None, :], 0.0)
    np.add.at(mass, (cell_t, xi), w)
    for c in range(k):
        np.add.at(total[:, :, c], (cell_t, xi), w * np.where(finite, mean_action[:, :, c], 0.0))

    values = np.zeros_like(total)
    overall = (total.sum(axis=(0, 1)) / mass.sum())
    for r in range(t_bins):
        filled = np.flatnonzero(mass[r] > 0)
        for c in range(x_bins):
            if mass[r, c] > 0:
                values[r, c] = total[r, c] / mass[r, c]
            elif filled.size:
                src = filled[np.argmin(np.abs(filled - c))]
                values[r, c] = total[r, src] / mass[r, src]
            else:
                values[r, c] = overall
    values = action_set.project(values.reshape(-1, k)).reshape(values.shape)
    t_centers = 0.5 * (t_edges[:-1] + t_edges[1:])
    x_centers = 0.5 * (x_edges[:-1] + x_edges[1:])
    return FeedbackPolicy.table(values, t_centers, x_centers, action_set)
