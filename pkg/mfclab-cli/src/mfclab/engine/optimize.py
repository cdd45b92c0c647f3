"""
Policy search over feedback families, closed-form oracles and epsilon-optimality reporting.
"""

import itertools
import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import minimize
from scipy.stats import norm

from mfclab.engine.control import FeedbackPolicy
from mfclab.engine.measure import EmpiricalLaw
from mfclab.engine.model import MeasureView, ModelSpec
from mfclab.engine.objective import ObjectiveEstimate, estimate_gamma, estimate_n_objective
from mfclab.engine.sim import MeasureFlow, SimConfig, mkv_fixed_point_run, simulate_nsystem
from mfclab.utils.errors import AllCandidatesBlewUp, InvalidParam, NotLQ, RiccatiBlowup
from mfclab.utils.rng import generator

logger = logging.getLogger(__name__)

METHODS = ("cross_entropy", "nelder_mead", "grid")
TARGETS = ("n_system", "mkv_fixed_point")
RICCATI_ESCAPE = 1e8
MAX_GRID_CANDIDATES = 10_000


@dataclass(frozen=True)
class OptimizeConfig:
    method: str = "cross_entropy"
    population: int = 16
    elite_frac: float = 0.25
    iters: int = 20
    init_std: float = 1.0
    simplex_scale: float = 0.5
    resolution: int = 5
    grid_radius: float = 2.0
    eval_seeds: tuple = (0,)
    holdout_seeds: tuple = (1000,)
    penalty_blowup: float = -1e6
    workers: int = 1
    picard_iters: int = 30
    picard_tol: float = 1e-4
    trace_path: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidParam(f"Unknown optimization method '{self.method}'; choose from {', '.join(METHODS)}")
        if self.population < 4:
            raise InvalidParam("population must be at least 4")
        if not 0 < self.elite_frac <= 0.5:
            raise InvalidParam("elite_frac must lie in (0, 0.5]")
        if len(self.eval_seeds) == 0:
            raise InvalidParam("At least one evaluation seed is required")
        if self.iters < 1 or self.resolution < 2 or self.workers < 1:
            raise InvalidParam("iters and workers must be positive and resolution at least 2")
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))
        object.__setattr__(self, "holdout_seeds", tuple(int(s) for s in self.holdout_seeds))


# ==============================================================================
# Oracles
# ==============================================================================


def gaussian_p_moment(mean: float, variance: float, p: float) -> float:
    """E|X|^p for X ~ N(mean, variance)."""
    std = math.sqrt(max(variance, 0.0))
    if std == 0.0:
        return abs(mean) ** p
    if p == 2:
        return mean**2 + variance
    if p == 1:
        return std * math.sqrt(2 / math.pi) * math.exp(-(mean**2) / (2 * variance)) + mean * (
            1 - 2 * norm.cdf(-mean / std)
        )
    return float(norm.expect(lambda z: abs(z) ** p, loc=mean, scale=std))


@dataclass(frozen=True, eq=False)
class OracleSolution:
    """
    Closed-form reference for a builtin model: optimal (or only) policy, its
    value and the Gaussian law of the limit dynamics on the grid.
    """

    riccati_path: dict
    policy: FeedbackPolicy
    value: float
    mean_flow: MeasureFlow
    time_grid: np.ndarray
    variance: np.ndarray
    gaussian: bool = True

    @property
    def means(self) -> np.ndarray:
        return self.mean_flow.means[:, 0]

    def reference_cloud(self, index: int, size: int, seed: int) -> EmpiricalLaw:
        """Seeded sample of the oracle law at grid index ``index``."""
        if not self.gaussian:
            raise NotLQ("Reference clouds need a Gaussian limit law (normal or dirac initial law)")
        z = generator(seed, "reference", index).standard_normal(size)
        return EmpiricalLaw.uniform((self.means[index] + np.sqrt(self.variance[index]) * z)[:, None])


def _gaussian_flow(means: np.ndarray, variances: np.ndarray, grid: np.ndarray, p: float) -> MeasureFlow:
    views = tuple(MeasureView([m], gaussian_p_moment(m, v, p), p) for m, v in zip(means, variances))
    return MeasureFlow(views, grid)


def solve_lq_oracle(model: ModelSpec, steps: int) -> OracleSolution:
    """
    Optimal linear feedback and value of the lq_meanfield problem.

    The state splits into its mean z and the fluctuation y = x - z, which solve
    two decoupled LQ problems: P (fluctuation) and Pi (mean) Riccati equations
    integrated backward, then z and Var(x) integrated forward. The policy is
    a = -P/r x + (P - Pi)/r z.
    """
    if model.name != "lq_meanfield" or model.dim_state != 1:
        raise NotLQ(f"solve_lq_oracle needs the lq_meanfield model, got {model.name}")
    prm = model.params
    beta, gamma, sigma = prm["beta"], prm["gamma"], prm["sigma0"]
    q, qbar, s, r = prm["q"], prm["qbar"], prm["s"], prm["r"]
    q_T, qbar_T, s_T = prm["qT"], prm["qbarT"], prm["sT"]
    fluct_q, fluct_qT = q + qbar, q_T + qbar_T
    mean_q, mean_qT = q + qbar * (1 - s) ** 2, q_T + qbar_T * (1 - s_T) ** 2
    horizon = model.horizon
    grid = np.linspace(0.0, horizon, steps + 1)

    def backward(t, y):
        P, Pi, _ = y
        return [-2 * beta * P + P**2 / r - fluct_q, -2 * (beta + gamma) * Pi + Pi**2 / r - mean_q, -(sigma**2) * P]

    def escape(t, y):
        return RICCATI_ESCAPE - max(abs(y[0]), abs(y[1]))

    escape.terminal = True
    ric = solve_ivp(
        backward,
        (horizon, 0.0),
        [fluct_qT, mean_qT, 0.0],
        method="RK45",
        t_eval=grid[::-1],
        dense_output=True,
        events=escape,
        rtol=1e-10,
        atol=1e-12,
    )
    if ric.status != 0 or ric.t_events[0].size or not np.isfinite(ric.y).all():
        raise RiccatiBlowup(f"Riccati equation escaped before t=0 ({ric.message})")
    P, Pi, psi = ric.y[:, ::-1]

    z0 = float(model.initial_law.mean[0])
    var0 = float(model.initial_law.variance[0])

    def forward(t, y):
        P_t, Pi_t, _ = ric.sol(t)
        return [(beta + gamma - Pi_t / r) * y[0], 2 * (beta - P_t / r) * y[1] + sigma**2]

    fwd = solve_ivp(forward, (0.0, horizon), [z0, var0], method="RK45", t_eval=grid, rtol=1e-10, atol=1e-12)
    z, var = fwd.y

    gains = -P / r
    offsets = (P - Pi) * z / r
    policy = FeedbackPolicy.linear(gains, offsets, grid, model.action_set)
    value = -0.5 * (P[0] * var0 + psi[0] + Pi[0] * z0**2)

    a_max = float(model.action_set.upper[0])
    reach = np.abs(gains) * (np.abs(z) + 4 * np.sqrt(var)) + np.abs(offsets)
    if reach.max() > a_max:
        logger.warning(
            "Oracle actions reach %.3g > a_max=%.3g; clamping makes the oracle approximate", reach.max(), a_max
        )

    return OracleSolution(
        riccati_path={"P": P, "Pi": Pi, "psi": psi},
        policy=policy,
        value=float(value),
        mean_flow=_gaussian_flow(z, var, grid, model.p),
        time_grid=grid,
        variance=var,
        gaussian=model.initial_law.kind in ("normal", "dirac"),
    )


def solve_ou_oracle(model: ModelSpec, steps: int) -> OracleSolution:
    """Exact Gaussian law of the ou_chaos limit: m' = (gamma - kappa) m, Var' = -2 kappa Var + sigma0^2."""
    if model.name != "ou_chaos":
        raise NotLQ(f"solve_ou_oracle needs the ou_chaos model, got {model.name}")
    kappa, gamma, sigma = model.params["kappa"], model.params["gamma"], model.params["sigma0"]
    grid = np.linspace(0.0, model.horizon, steps + 1)
    z0 = float(model.initial_law.mean[0])
    var0 = float(model.initial_law.variance[0])
    means = z0 * np.exp((gamma - kappa) * grid)
    if kappa == 0:
        var = var0 + sigma**2 * grid
    else:
        decay = np.exp(-2 * kappa * grid)
        var = var0 * decay + sigma**2 / (2 * kappa) * (1 - decay)
    return OracleSolution(
        riccati_path={},
        policy=FeedbackPolicy.constant(np.zeros(model.action_set.dim_action), model.action_set),
        value=float(-var[-1]),
        mean_flow=_gaussian_flow(means, var, grid, model.p),
        time_grid=grid,
        variance=var,
        gaussian=model.initial_law.kind in ("normal", "dirac"),
    )


# ==============================================================================
# Candidate evaluation
# ==============================================================================


class PolicyEvaluator:
    """Evaluates parameter vectors of a policy family with common random numbers."""

    def __init__(
        self, model: ModelSpec, sim_config: SimConfig, template: FeedbackPolicy, target: str, opt: OptimizeConfig
    ):
        if target not in TARGETS:
            raise InvalidParam(f"Unknown optimization target '{target}'; choose from {', '.join(TARGETS)}")
        self.model = model
        self.sim_config = sim_config
        self.template = template
        self.target = target
        self.opt = opt
        self.evaluations = 0
        self._lock = threading.Lock()

    def estimate(self, theta, seeds) -> ObjectiveEstimate:
        policy = self.template.with_theta(theta)
        estimates = []
        for seed in seeds:
            config = self.sim_config.with_(seed=int(seed))
            if self.target == "n_system":
                output = simulate_nsystem(self.model, config, policy)
                estimates.append(estimate_n_objective(self.model, output))
            else:
                flow, _, _, output = mkv_fixed_point_run(
                    self.model,
                    config,
                    policy,
                    max_iter=self.opt.picard_iters,
                    tol=self.opt.picard_tol,
                    check_lipschitz=False,
                )
                estimates.append(estimate_gamma(self.model, output, flow))
        with self._lock:
            self.evaluations += 1
        return ObjectiveEstimate.combine(estimates)

    def __call__(self, theta) -> float:
        value = self.estimate(theta, self.opt.eval_seeds).value
        return value if np.isfinite(value) else self.opt.penalty_blowup

    def many(self, thetas) -> list[float]:
        if self.opt.workers <= 1:
            return [self(theta) for theta in thetas]
        with ThreadPoolExecutor(max_workers=self.opt.workers) as pool:
            return list(pool.map(self, thetas))


@dataclass(frozen=True, eq=False)
class OptimizeResult:
    policy: FeedbackPolicy
    value_history: list
    best: ObjectiveEstimate
    train_value: float
    evaluations: int
    trace: list = field(default_factory=list)


def default_template(model: ModelSpec, knots: int = 2) -> FeedbackPolicy:
    grid = np.linspace(0.0, model.horizon, knots)
    k, d = model.action_set.dim_action, model.dim_state
    return FeedbackPolicy.linear(np.zeros((knots, k, d)), np.zeros((knots, k)), grid, model.action_set, d)


def optimize_policy(
    model: ModelSpec,
    sim_config: SimConfig,
    opt_config: OptimizeConfig,
    target: str = "n_system",
    policy: FeedbackPolicy | None = None,
) -> OptimizeResult:
    """
    Maximizes the chosen objective over the parameters of ``policy``'s family,
    starting from its current parameters. Every candidate is evaluated on the
    same seeds; the winner is re-evaluated on the held-out seeds.
    """
    template = policy or default_template(model)
    evaluator = PolicyEvaluator(model, sim_config, template, target, opt_config)
    runner = {"cross_entropy": _cross_entropy, "nelder_mead": _nelder_mead, "grid": _grid_search}[opt_config.method]
    best_theta, train_value, history, trace = runner(evaluator, template.theta, opt_config)

    if opt_config.trace_path:
        with open(opt_config.trace_path, "w", encoding="utf-8") as f:
            for row in trace:
                f.write(json.dumps(row) + "\n")

    holdout = opt_config.holdout_seeds or opt_config.eval_seeds
    best = evaluator.estimate(best_theta, holdout)
    logger.info("%s on %s: train %.6g, holdout %.6g", opt_config.method, model.name, train_value, best.value)
    return OptimizeResult(template.with_theta(best_theta), history, best, train_value, evaluator.evaluations, trace)


def _check_blowups(values, penalty: float, context: str):
    if all(v <= penalty for v in values):
        raise AllCandidatesBlewUp(f"Every candidate blew up in {context}")


def _cross_entropy(evaluator: PolicyEvaluator, theta0: np.ndarray, opt: OptimizeConfig):
    mean = theta0.astype(float).copy()
    std = np.full_like(mean, opt.init_std)
    n_elite = max(1, math.ceil(opt.elite_frac * opt.population))
    best_value, best_theta = -np.inf, mean.copy()
    history, trace = [], []
    for iteration in range(opt.iters):
        rng = generator(opt.eval_seeds[0], "optimizer", iteration)
        samples = mean + std * rng.standard_normal((opt.population, mean.shape[0]))
        candidates = np.vstack([mean[None, :], samples])
        values = np.asarray(evaluator.many(list(candidates)))
        _check_blowups(values, opt.penalty_blowup, f"cross-entropy iteration {iteration}")

        mean_value = float(values[0])
        order = np.argsort(-values, kind="stable")
        if values[order[0]] > best_value:
            best_value, best_theta = float(values[order[0]]), candidates[order[0]].copy()
        elites = candidates[order[:n_elite]]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), 1e-6 * opt.init_std)

        history.append(best_value)
        trace.append(
            {"iteration": iteration, "best_value": best_value, "mean_value": mean_value, "theta": best_theta.tolist()}
        )
        logger.debug("cross-entropy iteration %d: best %.6g", iteration, best_value)
    return best_theta, best_value, history, trace


def _nelder_mead(evaluator: PolicyEvaluator, theta0: np.ndarray, opt: OptimizeConfig):
    dim = theta0.shape[0]
    cache: dict[bytes, float] = {}
    state = {"best": -np.inf, "theta": theta0.astype(float).copy()}
    history, trace = [], []

    def objective(theta):
        key = np.asarray(theta, dtype=float).tobytes()
        if key not in cache:
            cache[key] = evaluator(theta)
            if cache[key] > state["best"]:
                state["best"], state["theta"] = cache[key], np.array(theta, dtype=float)
        return -cache[key]

    def record(_):
        history.append(state["best"])
        trace.append({"iteration": len(history) - 1, "best_value": state["best"], "theta": state["theta"].tolist()})

    simplex = np.vstack([theta0, theta0 + opt.simplex_scale * np.eye(dim)])
    initial = evaluator.many(list(simplex))
    _check_blowups(initial, opt.penalty_blowup, "the initial simplex")
    for theta, value in zip(simplex, initial):
        cache[np.asarray(theta, dtype=float).tobytes()] = value
        if value > state["best"]:
            state["best"], state["theta"] = value, theta.copy()

    options = {"maxiter": opt.iters, "initial_simplex": simplex}
    minimize(objective, theta0, method="Nelder-Mead", callback=record, options=options)
    if not history:
        record(None)
    return state["theta"], state["best"], history, trace


def _grid_search(evaluator: PolicyEvaluator, theta0: np.ndarray, opt: OptimizeConfig):
    axes = [np.linspace(c - opt.grid_radius, c + opt.grid_radius, opt.resolution) for c in theta0]
    total = opt.resolution ** len(axes)
    if total > MAX_GRID_CANDIDATES:
        raise InvalidParam(f"Grid search would evaluate {total} candidates; reduce resolution or policy size")
    candidates = [np.array(c) for c in itertools.product(*axes)]
    values = evaluator.many(candidates)
    _check_blowups(values, opt.penalty_blowup, "the grid")

    best_value, best_theta = -np.inf, theta0
    history, trace = [], []
    for theta, value in zip(candidates, values):
        if value > best_value:
            best_value, best_theta = value, theta
        history.append(best_value)
    trace.append({"iteration": 0, "best_value": best_value, "theta": np.asarray(best_theta).tolist()})
    return best_theta, best_value, history, trace


# ==============================================================================
# Acceptance gate and epsilon report
# ==============================================================================


@dataclass(frozen=True)
class GradientCheck:
    found_value: float
    oracle_policy_value: float
    relative_gap: float
    passed: bool
    theta: tuple


def policy_gradient_check(
    model: ModelSpec,
    oracle: OracleSolution,
    sim_config: SimConfig | None = None,
    knots: int = 2,
    iters: int = 25,
    fd_step: float = 0.05,
    tolerance: float = 0.01,
) -> GradientCheck:
    """
    Finite-difference gradient ascent over a coarse linear family, evaluated on
    the n-particle system with common random numbers, compared with the oracle
    policy on the same seed. Passes when the ascent gets within ``tolerance``
    (relative) of the oracle policy's value.
    """
    sim_config = sim_config or SimConfig(n_particles=2000, steps=50, seed=0)
    opt = OptimizeConfig(eval_seeds=(sim_config.seed,), holdout_seeds=())
    template = default_template(model, knots)
    evaluator = PolicyEvaluator(model, sim_config, template, "n_system", opt)

    theta = template.theta.copy()
    value = evaluator(theta)
    lr = 1.0
    for _ in range(iters):
        grad = np.zeros_like(theta)
        for i in range(theta.shape[0]):
            bump = np.zeros_like(theta)
            bump[i] = fd_step
            grad[i] = (evaluator(theta + bump) - evaluator(theta - bump)) / (2 * fd_step)
        for _ in range(6):
            trial = theta + lr * grad
            trial_value = evaluator(trial)
            if trial_value > value:
                theta, value = trial, trial_value
                lr *= 1.5
                break
            lr *= 0.5

    reference = estimate_n_objective(model, simulate_nsystem(model, sim_config, oracle.policy)).value
    gap = (reference - value) / abs(reference) if reference != 0 else reference - value
    logger.info("gradient gate: found %.6g, oracle policy %.6g, gap %.3g", value, reference, gap)
    return GradientCheck(float(value), float(reference), float(gap), bool(gap <= tolerance), tuple(theta.tolist()))


@dataclass(frozen=True)
class EpsilonEstimate:
    epsilon: float
    std_error: float
    gap: float


def epsilon_report(candidate: ObjectiveEstimate, reference) -> EpsilonEstimate:
    """
    Operational epsilon: max(0, reference value - candidate value), with the
    combined standard error. ``reference`` is an OracleSolution, an
    ObjectiveEstimate (best known) or a plain number.
    """
    if isinstance(reference, OracleSolution):
        ref_value, ref_se = reference.value, 0.0
    elif isinstance(reference, ObjectiveEstimate):
        ref_value, ref_se = reference.value, reference.std_error
    else:
        ref_value, ref_se = float(reference), 0.0
    if not np.isfinite(ref_value):
        raise InvalidParam("Reference value must be finite")
    if not np.isfinite(candidate.value):
        return EpsilonEstimate(float("inf"), float("nan"), float("inf"))
    gap = ref_value - candidate.value
    return EpsilonEstimate(max(0.0, gap), float(math.hypot(candidate.std_error, ref_se)), gap)
