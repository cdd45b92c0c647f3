"""
Monte Carlo evaluation of the mean-field objective.

Two conventions, kept as separate entry points:

- ``estimate_gamma``: the measure argument of f and g is read from a given
  measure flow (the McKean-Vlasov objective of that flow).
- ``estimate_n_objective``: the measure argument is the run's own empirical
  flow (the n-state central-planner objective). Particles are then not
  independent, so the reported standard error is flagged as correlated.
"""

from dataclasses import dataclass

import numpy as np

from mfclab.engine.model import ModelSpec
from mfclab.engine.sim import MeasureFlow, SimOutput, atom_average, empirical_view
from mfclab.utils.errors import GridMismatch


@dataclass(frozen=True)
class ObjectiveEstimate:
    value: float
    std_error: float
    n_samples: int
    running: float
    terminal: float
    correlated: bool = False
    seed: int | None = None

    def to_record(self) -> dict:
        return {
            "value": self.value,
            "std_error": self.std_error,
            "n": self.n_samples,
            "components": {"running": self.running, "terminal": self.terminal},
            "seed": self.seed,
            "correlated": self.correlated,
        }

    @classmethod
    def combine(cls, estimates: list["ObjectiveEstimate"]) -> "ObjectiveEstimate":
        """Average of estimates from independent seeds."""
        k = len(estimates)
        se = float(np.sqrt(sum(e.std_error**2 for e in estimates)) / k)
        running = float(np.mean([e.running for e in estimates]))
        terminal = float(np.mean([e.terminal for e in estimates]))
        return cls(
            value=running + terminal,
            std_error=se,
            n_samples=sum(e.n_samples for e in estimates),
            running=running,
            terminal=terminal,
            correlated=any(e.correlated for e in estimates),
            seed=estimates[0].seed,
        )


def _quadrature(model: ModelSpec, output: SimOutput, views) -> tuple[np.ndarray, np.ndarray]:
    """Left-endpoint running reward and terminal reward per particle."""
    paths = output.paths
    traj, grid = paths.trajectories, paths.time_grid
    dt = np.diff(grid)
    running = np.zeros(paths.n)
    for k in range(paths.steps):
        running += dt[k] * atom_average(
            model.running_reward, grid[k], traj[:, k, :], views[k], output.actions[:, k], output.weights[:, k]
        )
    terminal = np.asarray(model.terminal_reward(traj[:, -1, :], views[-1]), dtype=float).reshape(-1)
    return running, terminal


def _estimate(running: np.ndarray, terminal: np.ndarray, correlated: bool, seed) -> ObjectiveEstimate:
    total = running + terminal
    n = total.shape[0]
    std_error = float(total.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    run_mean, term_mean = float(running.mean()), float(terminal.mean())
    return ObjectiveEstimate(run_mean + term_mean, std_error, n, run_mean, term_mean, correlated, seed)


def _blown_up(output: SimOutput, correlated: bool) -> ObjectiveEstimate:
    nan = float("nan")
    return ObjectiveEstimate(nan, nan, output.n, nan, nan, correlated, output.seed)


def estimate_gamma(model: ModelSpec, output: SimOutput, flow: MeasureFlow) -> ObjectiveEstimate:
    if len(flow) != output.paths.steps + 1 or not np.allclose(flow.time_grid, output.paths.time_grid):
        raise GridMismatch("Measure flow and simulation output live on different grids")
    if output.diagnostics.blowup:
        return _blown_up(output, correlated=False)
    running, terminal = _quadrature(model, output, flow.views)
    return _estimate(running, terminal, correlated=False, seed=output.seed)


def estimate_n_objective(model: ModelSpec, output: SimOutput) -> ObjectiveEstimate:
    if output.diagnostics.blowup:
        return _blown_up(output, correlated=True)
    traj = output.paths.trajectories
    views = [empirical_view(traj[:, k, :], model.p) for k in range(traj.shape[1])]
    running, terminal = _quadrature(model, output, views)
    return _estimate(running, terminal, correlated=True, seed=output.seed)
