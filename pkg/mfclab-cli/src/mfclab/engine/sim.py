"""
Euler-Maruyama engines for the controlled particle system and the McKean-Vlasov limit.

All randomness is addressed by (seed, particle id, step) through ``mfclab.utils.rng``:
two runs with the same seed and particle ids share initial states and noise,
which gives common random numbers across Picard iterations, coupling pairs and
optimizer candidates.
"""

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mfclab.engine.control import FeedbackPolicy, RelaxedControl, effective_coefficients
from mfclab.engine.measure import EmpiricalLaw, PathEnsemble
from mfclab.engine.model import MeasureView, ModelSpec, ProbePlan, validate_lipschitz
from mfclab.utils.errors import GridMismatch, InvalidControl, InvalidParam, NoConvergence, NumericalBlowup
from mfclab.utils.rng import normal_block

logger = logging.getLogger(__name__)

SCHEMES = ("euler_maruyama",)


@dataclass(frozen=True)
class SimConfig:
    n_particles: int = 1000
    steps: int = 100
    seed: int = 0
    scheme: str = "euler_maruyama"
    blowup_threshold: float = 1e8

    def __post_init__(self):
        if int(self.n_particles) < 1:
            raise InvalidParam("n_particles must be at least 1")
        if int(self.steps) < 1:
            raise InvalidParam("steps must be at least 1")
        if int(self.seed) < 0:
            raise InvalidParam("seed must be non-negative")
        if self.scheme not in SCHEMES:
            raise InvalidParam(f"Unknown scheme '{self.scheme}'; supported: {', '.join(SCHEMES)}")
        if not self.blowup_threshold > 0:
            raise InvalidParam("blowup_threshold must be positive")

    def time_grid(self, horizon: float) -> np.ndarray:
        return np.linspace(0.0, horizon, self.steps + 1)

    def with_(self, **changes) -> "SimConfig":
        return SimConfig(**{**self.__dict__, **changes})


def empirical_view(points: np.ndarray, p: float) -> MeasureView:
    """
    MeasureView of the uniform law on ``points``.

    Statistics are summed in sorted order, so they do not depend on particle order.
    """
    norms = np.sort(np.linalg.norm(points, axis=1) ** p)
    mean = np.sort(points, axis=0).sum(axis=0) / points.shape[0]
    return MeasureView(mean, float(norms.sum() / points.shape[0]), p, samples=EmpiricalLaw.uniform(points))


# ==============================================================================
# Measure flows and outputs
# ==============================================================================


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    views: tuple
    time_grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.time_grid, dtype=float)
        if len(self.views) != grid.shape[0]:
            raise GridMismatch(f"Flow has {len(self.views)} views for a grid of {grid.shape[0]} points")
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "time_grid", grid)

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, k: int) -> MeasureView:
        return self.views[k]

    @property
    def p(self) -> float:
        return self.views[0].p

    @property
    def means(self) -> np.ndarray:
        return np.array([v.mean for v in self.views])

    @property
    def p_moments(self) -> np.ndarray:
        return np.array([v.p_moment for v in self.views])

    @classmethod
    def from_paths(cls, paths: PathEnsemble, p: float) -> "MeasureFlow":
        traj = paths.trajectories
        rows = np.isfinite(traj).all(axis=(1, 2))
        if not rows.any():
            raise NumericalBlowup("Cannot build a measure flow: every path is non-finite")
        traj = traj[rows]
        return cls(tuple(empirical_view(traj[:, k, :], p) for k in range(traj.shape[1])), paths.time_grid)

    @classmethod
    def constant(cls, view: MeasureView, time_grid) -> "MeasureFlow":
        grid = np.asarray(time_grid, dtype=float)
        return cls((view,) * grid.shape[0], grid)

    def shifted(self, delta) -> "MeasureFlow":
        return MeasureFlow(tuple(v.shifted(delta) for v in self.views), self.time_grid)

    def distance(self, other: "MeasureFlow") -> float:
        """sup over grid times of |mean difference| + |p-moment difference|."""
        if len(self) != len(other):
            raise GridMismatch("Flows live on different grids")
        mean_gap = np.linalg.norm(self.means - other.means, axis=1)
        return float((mean_gap + np.abs(self.p_moments - other.p_moments)).max())

    def to_dict(self) -> dict:
        return {
            "time_grid": self.time_grid.tolist(),
            "means": self.means.tolist(),
            "p_moments": self.p_moments.tolist(),
        }


@dataclass(frozen=True)
class SimDiagnostics:
    steps_completed: int
    max_abs: float
    blowup: bool


@dataclass(frozen=True, eq=False)
class SimOutput:
    """
    One simulation run.

    ``actions`` (n, S, J, k) and ``weights`` (n, S, J) hold the atoms applied
    on each step; ``running`` and ``terminal`` are the realized reward terms
    under the measure argument the run was driven by.
    """

    paths: PathEnsemble
    actions: np.ndarray
    weights: np.ndarray
    running: np.ndarray
    terminal: np.ndarray
    diagnostics: SimDiagnostics
    particle_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    seed: int = 0

    @property
    def n(self) -> int:
        return self.paths.n

    @property
    def reward_samples(self) -> np.ndarray:
        return self.running + self.terminal

    def controls_applied(self, i: int) -> RelaxedControl:
        return RelaxedControl(self.paths.time_grid, self.actions[i], self.weights[i])


# ==============================================================================
# Stepping
# ==============================================================================


def _control_plan(model: ModelSpec, control, time_grid: np.ndarray, n: int) -> Callable:
    """Returns step(k, t, x) -> (actions (n, J, k), weights (n, J))."""
    if isinstance(control, FeedbackPolicy):
        if control.action_set.dim_action != model.action_set.dim_action:
            raise InvalidControl("Policy and model action dimensions differ")

        def feedback(k, t, x):
            return control(t, x)[:, None, :], np.ones((x.shape[0], 1))

        return feedback

    if isinstance(control, RelaxedControl):
        acts, wts = control.on_grid(time_grid)

        def shared(k, t, x):
            n_here = x.shape[0]
            return np.broadcast_to(acts[k], (n_here,) + acts[k].shape), np.broadcast_to(wts[k], (n_here, wts.shape[1]))

        return shared

    controls = list(control)
    if len(controls) != n:
        raise InvalidControl(f"Got {len(controls)} relaxed controls for {n} particles")
    grids = [q.on_grid(time_grid) for q in controls]
    width = max(w.shape[1] for _, w in grids)
    dim = controls[0].dim_action
    acts = np.zeros((n, time_grid.shape[0] - 1, width, dim))
    wts = np.zeros((n, time_grid.shape[0] - 1, width))
    for i, (a, w) in enumerate(grids):
        acts[i, :, : a.shape[1]] = a
        acts[i, :, a.shape[1] :] = a[:, :1]
        wts[i, :, : w.shape[1]] = w

    def per_particle(k, t, x):
        return acts[:, k], wts[:, k]

    return per_particle


def atom_average(fn: Callable, t: float, x: np.ndarray, m: MeasureView, actions, weights) -> np.ndarray:
    """Sum over atoms of weight * fn(t, x, m, atom) for a per-particle reward."""
    total = np.zeros(x.shape[0])
    for j in range(weights.shape[1]):
        w = weights[:, j]
        if (w > 0).any():
            total += w * np.asarray(fn(t, x, m, actions[:, j, :]), dtype=float).reshape(-1)
    return total


def _run(
    model: ModelSpec,
    config: SimConfig,
    control,
    measure_at: Callable[[int, np.ndarray], MeasureView],
    particle_ids,
    strict: bool,
) -> SimOutput:
    n = config.n_particles
    ids = np.arange(n) if particle_ids is None else np.asarray(particle_ids, dtype=np.int64).ravel()
    if ids.shape[0] != n:
        raise InvalidParam(f"Got {ids.shape[0]} particle ids for {n} particles")
    d, dw, steps = model.dim_state, model.dim_noise, config.steps
    grid = config.time_grid(model.horizon)
    dt = model.horizon / steps
    sqrt_dt = np.sqrt(dt)

    plan = _control_plan(model, control, grid, n)
    noise = normal_block(config.seed, "noise", ids, steps, max(d, dw))

    traj = np.full((n, steps + 1, d), np.nan)
    x = model.initial_law.sample(config.seed, ids)
    traj[:, 0] = x
    running = np.zeros(n)
    applied_a: list = []
    applied_w: list = []
    steps_completed = steps
    blowup = False

    for k in range(steps):
        t = grid[k]
        m = measure_at(k, x)
        acts, wts = plan(k, t, x)
        acts = np.asarray(acts, dtype=float)
        wts = np.asarray(wts, dtype=float)
        applied_a.append(acts)
        applied_w.append(wts)

        single = ((wts > 0).sum(axis=1) == 1).all()
        if single:
            a = np.take_along_axis(acts, np.argmax(wts, axis=1)[:, None, None], axis=1)[:, 0, :]
            drift = np.asarray(model.drift(t, x, m, a), dtype=float)
            vol = np.asarray(model.volatility(t, x, m, a), dtype=float)
            diffusion = np.einsum("nij,nj->ni", vol, noise[:, k, :dw])
            running += dt * np.asarray(model.running_reward(t, x, m, a), dtype=float).reshape(-1)
        else:
            drift, vol_bar = effective_coefficients(model, t, x, m, acts, wts)
            diffusion = np.einsum("nij,nj->ni", vol_bar, noise[:, k, :d])
            running += dt * atom_average(model.running_reward, t, x, m, acts, wts)

        x = x + drift * dt + diffusion * sqrt_dt
        traj[:, k + 1] = x
        if not np.isfinite(x).all() or np.abs(x).max() > config.blowup_threshold:
            blowup = True
            steps_completed = k + 1
            break

    width = max(a.shape[1] for a in applied_a)
    actions = np.zeros((n, steps, width, model.action_set.dim_action))
    weights = np.zeros((n, steps, width))
    for k, (a, w) in enumerate(zip(applied_a, applied_w)):
        actions[:, k, : a.shape[1]] = a
        weights[:, k, : w.shape[1]] = w
    if blowup:
        actions[:, steps_completed:] = np.nan
        weights[:, steps_completed:] = np.nan
        terminal = np.full(n, np.nan)
        running = np.full(n, np.nan)
    else:
        terminal = np.asarray(model.terminal_reward(x, measure_at(steps, x)), dtype=float).reshape(-1)

    finite = traj[np.isfinite(traj)]
    max_abs = float(np.abs(finite).max()) if finite.size else float("nan")
    output = SimOutput(
        paths=PathEnsemble(traj, grid, allow_nan=blowup),
        actions=actions,
        weights=weights,
        running=running,
        terminal=terminal,
        diagnostics=SimDiagnostics(steps_completed, max_abs, blowup),
        particle_ids=ids,
        seed=config.seed,
    )
    if blowup:
        message = f"{model.name}: |X| exceeded {config.blowup_threshold:g} at step {steps_completed} of {steps}"
        if strict:
            raise NumericalBlowup(message, output=output)
        logger.warning(message)
    return output


def simulate_nsystem(
    model: ModelSpec, config: SimConfig, control, particle_ids=None, strict: bool = False
) -> SimOutput:
    """
    The interacting n-particle system.

    Coefficients see the current empirical law of all n particles, particle i included.
    ``control`` is a FeedbackPolicy, one RelaxedControl shared by every particle,
    or a list of n RelaxedControls.
    """
    return _run(model, config, control, lambda k, x: empirical_view(x, model.p), particle_ids, strict)


def simulate_decoupled(
    model: ModelSpec, config: SimConfig, flow: MeasureFlow, control, particle_ids=None, strict: bool = False
) -> SimOutput:
    """Particles driven by a frozen measure flow; they are mutually independent."""
    if len(flow) != config.steps + 1:
        raise GridMismatch(f"Flow has {len(flow)} points, expected steps + 1 = {config.steps + 1}")
    return _run(model, config, control, lambda k, x: flow[k], particle_ids, strict)


# ==============================================================================
# McKean-Vlasov fixed point and coupling
# ==============================================================================


def initial_flow(model: ModelSpec, config: SimConfig) -> MeasureFlow:
    x0 = model.initial_law.sample(config.seed, np.arange(config.n_particles))
    return MeasureFlow.constant(empirical_view(x0, model.p), config.time_grid(model.horizon))


def mkv_fixed_point_run(
    model: ModelSpec,
    config: SimConfig,
    control,
    max_iter: int = 50,
    tol: float = 1e-6,
    check_lipschitz: bool = True,
    strict: bool = False,
    start: MeasureFlow | None = None,
) -> tuple[MeasureFlow, int, bool, SimOutput]:
    """Picard iteration that also returns the final decoupled run."""
    if check_lipschitz:
        report = validate_lipschitz(model, ProbePlan.quick(seed=config.seed))
        if not report.passed:
            logger.warning("%s does not look Lipschitz; Picard iteration may not converge", model.name)

    flow = start or initial_flow(model, config)
    output = None
    for iteration in range(1, max_iter + 1):
        output = simulate_decoupled(model, config, flow, control, strict=strict)
        if output.diagnostics.blowup:
            logger.warning("Picard iteration %d blew up", iteration)
            return flow, iteration, False, output
        updated = MeasureFlow.from_paths(output.paths, model.p)
        gap = flow.distance(updated)
        logger.debug("Picard iteration %d: flow gap %.3e", iteration, gap)
        flow = updated
        if gap < tol:
            return flow, iteration, True, output

    message = f"Picard iteration did not reach tol={tol:g} within {max_iter} iterations"
    if strict:
        raise NoConvergence(message, result=(flow, max_iter, False))
    logger.warning(message)
    return flow, max_iter, False, output


def mkv_fixed_point(
    model: ModelSpec,
    config: SimConfig,
    control,
    max_iter: int = 50,
    tol: float = 1e-6,
    check_lipschitz: bool = True,
    strict: bool = False,
) -> tuple[MeasureFlow, int, bool]:
    """
    Approximates the McKean-Vlasov law under ``control`` by Picard iteration on
    measure flows with common random numbers. Returns (flow, iterations, converged).
    """
    flow, iterations, converged, _ = mkv_fixed_point_run(model, config, control, max_iter, tol, check_lipschitz, strict)
    return flow, iterations, converged


def couple_from_mkv(
    model: ModelSpec, config: SimConfig, mkv_flow: MeasureFlow, control, strict: bool = False
) -> tuple[SimOutput, SimOutput, float]:
    """
    Runs the interacting system and the decoupled system on the same initial
    states and noise. The gap is the particle mean of the squared sup-norm
    distance between paired trajectories.
    """
    interacting = simulate_nsystem(model, config, control, strict=strict)
    decoupled = simulate_decoupled(model, config, mkv_flow, control, strict=strict)
    diff = np.linalg.norm(interacting.paths.trajectories - decoupled.paths.trajectories, axis=2)
    gap = float(np.mean(np.max(diff, axis=1) ** 2))
    return interacting, decoupled, gap


# ==============================================================================
# Martingale-problem diagnostic
# ==============================================================================


@dataclass(frozen=True)
class TestFunction:
    """Smooth test function with closed-form gradient and Hessian."""

    __test__ = False

    kind: str
    center: tuple = ()
    width: float = 1.0
    index: int = 0

    @classmethod
    def coordinate(cls, index: int = 0) -> "TestFunction":
        return cls("coordinate", index=index)

    @classmethod
    def quadratic(cls) -> "TestFunction":
        return cls("quadratic")

    @classmethod
    def bump(cls, center: Sequence[float], width: float = 1.0) -> "TestFunction":
        if not width > 0:
            raise InvalidParam("Bump width must be positive")
        return cls("bump", tuple(np.atleast_1d(center).tolist()), float(width))

    def value(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "coordinate":
            return x[:, self.index]
        if self.kind == "quadratic":
            return (x**2).sum(axis=1)
        z = x - np.asarray(self.center)
        return np.exp(-(z**2).sum(axis=1) / (2 * self.width**2))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "coordinate":
            g = np.zeros_like(x)
            g[:, self.index] = 1.0
            return g
        if self.kind == "quadratic":
            return 2.0 * x
        z = x - np.asarray(self.center)
        return -z / self.width**2 * self.value(x)[:, None]

    def hessian(self, x: np.ndarray) -> np.ndarray:
        n, d = x.shape
        if self.kind == "coordinate":
            return np.zeros((n, d, d))
        if self.kind == "quadratic":
            return np.broadcast_to(2.0 * np.eye(d), (n, d, d))
        z = x - np.asarray(self.center)
        w2 = self.width**2
        outer = np.einsum("ni,nj->nij", z, z) / w2**2 - np.eye(d) / w2
        return self.value(x)[:, None, None] * outer


def martingale_defect(
    model: ModelSpec,
    output: SimOutput,
    flow: MeasureFlow,
    test_fn: TestFunction,
    s: float,
    t: float,
    h: TestFunction | None = None,
) -> tuple[float, float]:
    """
    Monte Carlo estimate of E[(M_t - M_s) h(X_s)], with
    M_u = phi(X_u) - sum over grid steps before u of dt * L phi, where the
    generator L uses the flow's measure argument and the applied atoms.
    ``h`` defaults to the constant 1.
    """
    paths = output.paths
    if len(flow) != paths.steps + 1:
        raise GridMismatch(f"Flow has {len(flow)} points, paths have {paths.steps + 1}")
    i_s, i_t = paths.index_of(s), paths.index_of(t)
    if not i_s < i_t:
        raise GridMismatch(f"Need s < t on the grid, got s={s}, t={t}")

    traj = paths.trajectories
    dt = np.diff(paths.time_grid)
    compensator = np.zeros(paths.n)
    for k in range(i_s, i_t):
        x = traj[:, k, :]
        grad, hess = test_fn.gradient(x), test_fn.hessian(x)
        acts, wts = output.actions[:, k], output.weights[:, k]
        gen = np.zeros(paths.n)
        for j in range(wts.shape[1]):
            w = wts[:, j]
            if not (w > 0).any():
                continue
            a = acts[:, j, :]
            b = np.asarray(model.drift(paths.time_grid[k], x, flow[k], a), dtype=float)
            sig = np.asarray(model.volatility(paths.time_grid[k], x, flow[k], a), dtype=float)
            cov = np.einsum("nij,nkj->nik", sig, sig)
            gen += w * ((b * grad).sum(axis=1) + 0.5 * np.einsum("nij,nij->n", cov, hess))
        compensator += dt[k] * gen

    increment = test_fn.value(traj[:, i_t, :]) - test_fn.value(traj[:, i_s, :]) - compensator
    if h is not None:
        increment = increment * h.value(traj[:, i_s, :])
    mean = float(increment.mean())
    std_error = float(increment.std(ddof=1) / np.sqrt(paths.n)) if paths.n > 1 else 0.0
    return mean, std_error


# ==============================================================================
# Persistence
# ==============================================================================


def save_output(output: SimOutput, directory: str) -> dict:
    """Writes the ensemble binary and a per-particle CSV summary; returns the file paths."""
    os.makedirs(directory, exist_ok=True)
    ensemble_path = os.path.join(directory, "ensemble.bin")
    summary_path = os.path.join(directory, "summary.csv")
    output.paths.save_binary(ensemble_path)

    terminal_states = output.paths.trajectories[:, -1, :]
    with open(summary_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["particle"] + [f"x_T_{j}" for j in range(output.paths.dim)] + ["running", "terminal", "reward"]
        )
        ids = output.particle_ids if output.particle_ids.size else np.arange(output.n)
        for row, pid in enumerate(ids):
            rewards = [output.running[row], output.terminal[row], output.reward_samples[row]]
            values = list(terminal_states[row]) + rewards
            writer.writerow([int(pid)] + [repr(float(v)) for v in values])
    return {"ensemble": ensemble_path, "summary": summary_path}
