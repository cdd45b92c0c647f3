"""
Control problem definitions and numerical checks of the standing assumptions.

Coefficients are vectorized over particles:

    drift(t, x[n, d], m, a[n, k])       -> [n, d]
    volatility(t, x[n, d], m, a[n, k])  -> [n, d, d_W]
    running_reward(t, x, m, a)          -> [n]
    terminal_reward(x[n, d], m)         -> [n]

where ``m`` is a MeasureView of the current law.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from mfclab.engine.measure import EmpiricalLaw, wasserstein_exact
from mfclab.utils.errors import InvalidModel, InvalidParam, NonFiniteCoefficient, UnknownModel
from mfclab.utils.rng import generator, normal_block, uniform_block

logger = logging.getLogger(__name__)

ACTION_TOL = 1e-12


# ==============================================================================
# Action sets, initial laws, measure views
# ==============================================================================


@dataclass(frozen=True, eq=False)
class ActionSet:
    kind: str
    dim_action: int
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    points: np.ndarray | None = None
    radius: float | None = None

    def __post_init__(self):
        if self.dim_action < 1:
            raise InvalidModel("dim_action must be a positive integer")
        if self.kind == "box":
            lower = np.asarray(self.lower, dtype=float).reshape(self.dim_action)
            upper = np.asarray(self.upper, dtype=float).reshape(self.dim_action)
            if (lower > upper).any():
                raise InvalidModel("Box bounds must satisfy lower <= upper componentwise")
            object.__setattr__(self, "lower", lower)
            object.__setattr__(self, "upper", upper)
        elif self.kind == "finite":
            points = np.asarray(self.points, dtype=float).reshape(-1, self.dim_action)
            if points.shape[0] == 0:
                raise InvalidModel("A finite action set needs at least one point")
            object.__setattr__(self, "points", points)
        elif self.kind == "ball":
            if self.radius is None or self.radius < 0:
                raise InvalidModel("Ball action sets need a non-negative radius")
        else:
            raise InvalidModel(f"Unknown action set kind '{self.kind}'")

    @classmethod
    def box(cls, lower, upper) -> "ActionSet":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        return cls("box", lower.shape[0], lower=lower, upper=upper)

    @classmethod
    def finite(cls, points) -> "ActionSet":
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        return cls("finite", points.shape[1], points=points)

    @classmethod
    def ball(cls, radius: float, dim_action: int = 1) -> "ActionSet":
        return cls("ball", dim_action, radius=float(radius))

    @property
    def is_convex(self) -> bool:
        return self.kind != "finite" or self.points.shape[0] == 1

    @property
    def is_bounded(self) -> bool:
        if self.kind == "box":
            return bool(np.isfinite(self.lower).all() and np.isfinite(self.upper).all())
        return True

    def contains(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float).reshape(-1, self.dim_action)
        if self.kind == "box":
            return ((a >= self.lower - ACTION_TOL) & (a <= self.upper + ACTION_TOL)).all(axis=1)
        if self.kind == "ball":
            return np.linalg.norm(a, axis=1) <= self.radius + ACTION_TOL
        dist = np.linalg.norm(a[:, None, :] - self.points[None, :, :], axis=2)
        return dist.min(axis=1) <= ACTION_TOL

    def project(self, a) -> np.ndarray:
        """Clamps to the box, snaps to the nearest finite atom, or projects radially onto the ball."""
        a = np.asarray(a, dtype=float).reshape(-1, self.dim_action)
        if self.kind == "box":
            return np.clip(a, self.lower, self.upper)
        if self.kind == "ball":
            norms = np.linalg.norm(a, axis=1, keepdims=True)
            scale = np.where(norms > self.radius, self.radius / np.maximum(norms, 1e-300), 1.0)
            return a * scale
        dist = np.linalg.norm(a[:, None, :] - self.points[None, :, :], axis=2)
        return self.points[np.argmin(dist, axis=1)]

    def sample(self, rng: np.random.Generator, n: int, scale: float = np.inf) -> np.ndarray:
        """n actions drawn from the set, restricted to |a|_inf <= scale for unbounded boxes."""
        if self.kind == "finite":
            return self.points[rng.integers(0, self.points.shape[0], size=n)]
        if self.kind == "ball":
            radius = min(self.radius, scale)
            direction = rng.standard_normal((n, self.dim_action))
            direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
            return direction * radius * rng.random((n, 1)) ** (1.0 / self.dim_action)
        lo = np.maximum(self.lower, -scale)
        hi = np.minimum(self.upper, scale)
        return lo + (hi - lo) * rng.random((n, self.dim_action))

    def to_dict(self) -> dict:
        if self.kind == "box":
            return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}
        if self.kind == "finite":
            return {"kind": "finite", "points": self.points.tolist()}
        return {"kind": "ball", "radius": self.radius, "dim_action": self.dim_action}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ActionSet":
        if data["kind"] == "box":
            return cls.box(data["lower"], data["upper"])
        if data["kind"] == "finite":
            return cls.finite(data["points"])
        return cls.ball(data["radius"], data.get("dim_action", 1))


@dataclass(frozen=True, eq=False)
class InitialLaw:
    """Sampler for the initial distribution; ``scale`` is the std (normal) or half-width (uniform)."""

    kind: str
    loc: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.kind not in ("dirac", "normal", "uniform"):
            raise InvalidModel(f"Unknown initial law '{self.kind}'")
        loc = np.atleast_1d(np.asarray(self.loc, dtype=float))
        scale = np.broadcast_to(np.asarray(self.scale, dtype=float), loc.shape).copy()
        if (scale < 0).any():
            raise InvalidModel("Initial law scale must be non-negative")
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)

    @classmethod
    def dirac(cls, point) -> "InitialLaw":
        point = np.atleast_1d(np.asarray(point, dtype=float))
        return cls("dirac", point, np.zeros_like(point))

    @classmethod
    def normal(cls, mean, std) -> "InitialLaw":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        if np.all(np.asarray(std) == 0):
            return cls.dirac(mean)
        return cls("normal", mean, std)

    @classmethod
    def uniform(cls, center, half_width) -> "InitialLaw":
        return cls("uniform", center, half_width)

    @property
    def dim(self) -> int:
        return self.loc.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.loc

    @property
    def variance(self) -> np.ndarray:
        if self.kind == "normal":
            return self.scale**2
        if self.kind == "uniform":
            return self.scale**2 / 3.0
        return np.zeros_like(self.loc)

    def with_loc(self, loc) -> "InitialLaw":
        return InitialLaw(self.kind, loc, self.scale)

    def sample(self, seed: int, particle_ids) -> np.ndarray:
        """Initial states for the given particles; particle i always draws from its own stream."""
        ids = np.asarray(particle_ids).ravel()
        if self.kind == "dirac":
            return np.tile(self.loc, (ids.shape[0], 1))
        if self.kind == "normal":
            z = normal_block(seed, "initial", ids, 1, self.dim)[:, 0, :]
            return self.loc + self.scale * z
        u = uniform_block(seed, "initial", ids, self.dim)
        return self.loc + self.scale * (2.0 * u - 1.0)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "loc": self.loc.tolist(), "scale": self.scale.tolist()}


@dataclass(frozen=True, eq=False)
class MeasureView:
    """
    Summary of the measure argument handed to the coefficients.

    ``p_moment`` is the integral of |z|^p; ``samples`` exposes the full cloud for
    user models that interact through more than the mean and moment.
    """

    mean: np.ndarray
    p_moment: float
    p: float
    samples: EmpiricalLaw | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if self.p_moment < 0 or not np.isfinite(self.p_moment) or not np.isfinite(mean).all():
            raise ValueError("MeasureView needs a finite mean and a finite non-negative p-moment")
        object.__setattr__(self, "mean", mean)

    @classmethod
    def from_law(cls, law: EmpiricalLaw, p: float) -> "MeasureView":
        p_moment = float(law.weights @ np.linalg.norm(law.points, axis=1) ** p)
        return cls(law.mean(), p_moment, p, samples=law)

    @classmethod
    def from_points(cls, points, p: float) -> "MeasureView":
        return cls.from_law(EmpiricalLaw.uniform(points), p)

    @classmethod
    def dirac(cls, point, p: float) -> "MeasureView":
        return cls.from_law(EmpiricalLaw.dirac(point), p)

    def moment(self, q: float) -> float:
        """Any moment of the underlying cloud; only the stored p-moment when no samples are attached."""
        if q == self.p:
            return self.p_moment
        if self.samples is None:
            raise ValueError(f"Moment of order {q} needs the sample cloud")
        return float(self.samples.weights @ np.linalg.norm(self.samples.points, axis=1) ** q)

    def shifted(self, delta) -> "MeasureView":
        """The view of the translated law (used for perturbed-flow controls)."""
        delta = np.asarray(delta, dtype=float)
        if self.samples is not None:
            return MeasureView.from_law(self.samples.translate(delta), self.p)
        return MeasureView(self.mean + delta, self.p_moment, self.p)


# ==============================================================================
# Model specification
# ==============================================================================


@dataclass(frozen=True)
class Exponents:
    p: float
    p_prime: float
    p_sigma: float

    def __post_init__(self):
        p, pp, ps = self.p, self.p_prime, self.p_sigma
        if not (pp > p >= max(1.0, ps)):
            raise InvalidModel(f"Exponents must satisfy p' > p >= max(1, p_sigma); got p={p}, p'={pp}, p_sigma={ps}")
        if not (pp >= 2.0 >= ps >= 0.0):
            raise InvalidModel(f"Exponents must satisfy p' >= 2 >= p_sigma >= 0; got p'={pp}, p_sigma={ps}")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    dim_state: int
    dim_noise: int
    horizon: float
    action_set: ActionSet
    exponents: Exponents
    drift: Callable
    volatility: Callable
    running_reward: Callable
    terminal_reward: Callable
    initial_law: InitialLaw
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.dim_state < 1 or self.dim_noise < 1:
            raise InvalidModel("State and noise dimensions must be positive")
        if not self.horizon > 0:
            raise InvalidModel("Horizon must be positive")
        if self.initial_law.dim != self.dim_state:
            raise InvalidModel(f"Initial law lives in R^{self.initial_law.dim}, state space is R^{self.dim_state}")
        object.__setattr__(self, "params", dict(self.params))

    @property
    def p(self) -> float:
        return self.exponents.p

    def view(self, points) -> MeasureView:
        return MeasureView.from_points(points, self.exponents.p)

    def describe(self) -> dict:
        """Stable description used for manifests and cache keys."""
        return {
            "name": self.name,
            "params": {k: self.params[k] for k in sorted(self.params)},
            "dim_state": self.dim_state,
            "dim_noise": self.dim_noise,
            "horizon": self.horizon,
            "exponents": [self.exponents.p, self.exponents.p_prime, self.exponents.p_sigma],
            "action_set": self.action_set.to_dict(),
            "initial_law": self.initial_law.to_dict(),
        }


# ==============================================================================
# Assumption validators
# ==============================================================================


@dataclass(frozen=True)
class ProbePlan:
    seed: int = 0
    radii: tuple = tuple(np.geomspace(1.0, 1e3, 7))
    points_per_radius: int = 256
    batches_per_radius: int = 8
    cloud_size: int = 16
    separations: tuple = tuple(np.geomspace(1.0, 1e-3, 4))
    pair_groups: int = 50
    pairs_per_group: int = 20
    growth_tolerance: float = 0.1
    stability_factor: float = 1.5

    @classmethod
    def quick(cls, seed: int = 0) -> "ProbePlan":
        return cls(
            seed=seed, points_per_radius=64, batches_per_radius=4, cloud_size=4, pair_groups=10, pairs_per_group=10
        )


@dataclass(frozen=True)
class CheckResult:
    name: str
    constant: float
    exponent: float
    allowed_exponent: float
    passed: bool
    note: str = ""


@dataclass(frozen=True)
class ValidationReport:
    kind: str
    model: str
    checks: tuple
    constants: Mapping[str, float]
    seed: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "model": self.model,
            "passed": self.passed,
            "seed": self.seed,
            "constants": dict(self.constants),
            "checks": [c.__dict__ for c in self.checks],
        }


def _finite(name: str, value: np.ndarray) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NonFiniteCoefficient(f"{name} returned a non-finite value at a probed point")
    return value


def _growth_exponent(lhs_max: np.ndarray, scale: np.ndarray) -> float:
    """Log-log least-squares slope of the per-radius envelope; 0 when the envelope vanishes."""
    keep = lhs_max > 0
    if keep.sum() < 2:
        return 0.0
    slope, _ = np.polyfit(np.log(scale[keep]), np.log(lhs_max[keep]), 1)
    return float(slope)


def validate_growth(model: ModelSpec, probe: ProbePlan | None = None) -> ValidationReport:
    """
    Fits the growth constants (c1, c2, c3) and checks the growth exponents of
    b, sigma, f and g over a radius schedule.

    A check fails when the fitted log-log exponent exceeds the allowed one by
    more than ``probe.growth_tolerance``.
    """
    probe = probe or ProbePlan()
    ex = model.exponents
    d, T = model.dim_state, model.horizon

    cols: dict[str, list] = {k: [] for k in ("x", "mp", "mpp", "a", "b", "s2", "f", "g", "radius")}
    for r_idx, radius in enumerate(probe.radii):
        rng = generator(probe.seed, "probe", r_idx)
        per_batch = max(1, probe.points_per_radius // probe.batches_per_radius)
        for _ in range(probe.batches_per_radius):
            t = float(rng.random() * T)
            center = _ball_points(rng, 1, d, radius)[0] * rng.random()
            cloud = center + 0.1 * radius * rng.standard_normal((probe.cloud_size, d))
            m = model.view(cloud)
            x = _ball_points(rng, per_batch, d, radius) * (0.5 + 0.5 * rng.random((per_batch, 1)))
            a = model.action_set.sample(rng, per_batch, scale=radius)

            b = _finite("drift", np.asarray(model.drift(t, x, m, a), dtype=float))
            sig = _finite("volatility", np.asarray(model.volatility(t, x, m, a), dtype=float))
            f = _finite("running_reward", np.asarray(model.running_reward(t, x, m, a), dtype=float))
            g = _finite("terminal_reward", np.asarray(model.terminal_reward(x, m), dtype=float))

            cols["x"].append(np.linalg.norm(x, axis=1))
            cols["mp"].append(np.full(per_batch, m.p_moment))
            cols["mpp"].append(np.full(per_batch, m.moment(ex.p_prime)))
            cols["a"].append(np.linalg.norm(a, axis=1))
            cols["b"].append(np.linalg.norm(b.reshape(per_batch, -1), axis=1))
            cols["s2"].append((sig.reshape(per_batch, -1) ** 2).sum(axis=1))
            cols["f"].append(f.reshape(per_batch))
            cols["g"].append(g.reshape(per_batch))
            cols["radius"].append(np.full(per_batch, r_idx))
    v = {k: np.concatenate(val) for k, val in cols.items()}

    p, pp, ps = ex.p, ex.p_prime, ex.p_sigma
    proxy = 1 + v["x"] + v["mp"] ** (1 / p) + v["a"]

    c3 = _fit_coercivity(model, probe)
    checks_spec = [
        ("drift_growth", v["b"], proxy, 1.0),
        ("volatility_growth", v["s2"], 1 + v["x"] ** ps + v["mp"] ** (ps / p) + v["a"] ** ps, ps),
        ("terminal_upper", np.maximum(v["g"], 0), 1 + v["x"] ** p + v["mp"], p),
        ("terminal_lower", np.maximum(-v["g"], 0), 1 + v["x"] ** pp + v["mpp"], pp),
        ("running_upper", np.maximum(v["f"] + max(c3, 0.0) * v["a"] ** pp, 0), 1 + v["x"] ** p + v["mp"], p),
        ("running_lower", np.maximum(-v["f"], 0), 1 + v["x"] ** pp + v["mpp"] + v["a"] ** pp, pp),
    ]

    radius_idx = v["radius"].astype(int)
    # probe states, clouds and actions all scale linearly with the radius
    scale = np.asarray(probe.radii, dtype=float)
    checks = []
    for name, lhs, rhs, allowed in checks_spec:
        envelope = np.array([lhs[radius_idx == r].max() for r in range(len(probe.radii))])
        exponent = _growth_exponent(envelope, scale)
        constant = float((lhs / rhs).max())
        passed = exponent <= allowed + probe.growth_tolerance
        checks.append(CheckResult(name, constant, exponent, allowed, bool(passed)))

    bounded = model.action_set.is_bounded
    note = "bounded action set: coercivity holds with any c3 up to the probed fit" if bounded else ""
    checks.append(CheckResult("coercivity", c3, pp, pp, bool(c3 > 0 or bounded), note))

    c1 = max(checks[0].constant, checks[1].constant)
    c2 = max(c.constant for c in checks[2:6])
    report = ValidationReport("growth", model.name, tuple(checks), {"c1": c1, "c2": c2, "c3": c3}, probe.seed)
    logger.debug("growth validation for %s: %s", model.name, report.constants)
    return report


def _fit_coercivity(model: ModelSpec, probe: ProbePlan) -> float:
    """c3 = min over the action probe of -f(t, 0, delta_0, a) / |a|^p'."""
    d = model.dim_state
    m0 = MeasureView.dirac(np.zeros(d), model.exponents.p)
    ratios = []
    for r_idx, radius in enumerate(probe.radii):
        rng = generator(probe.seed, "probe", 1000 + r_idx)
        a = model.action_set.sample(rng, probe.points_per_radius, scale=radius)
        norms = np.linalg.norm(a, axis=1)
        keep = norms > 1e-8
        if not keep.any():
            continue
        t = float(rng.random() * model.horizon)
        x = np.zeros((int(keep.sum()), d))
        f = _finite("running_reward", np.asarray(model.running_reward(t, x, m0, a[keep]), dtype=float))
        ratios.append(-f.reshape(-1) / norms[keep] ** model.exponents.p_prime)
    if not ratios:
        return 0.0
    return float(np.concatenate(ratios).min())


def validate_lipschitz(model: ModelSpec, probe: ProbePlan | None = None) -> ValidationReport:
    """
    Estimates the Lipschitz constant of (b, sigma) in (x, m) under the product
    metric max(|x - x'|, W_p(m, m')).

    Probe pairs are drawn once and rescaled to each separation, so linear
    coefficients give identical ratios at every level; a check fails when the
    largest ratio grows by more than ``probe.stability_factor`` as pairs shrink.
    """
    probe = probe or ProbePlan()
    d, p = model.dim_state, model.exponents.p
    rng = generator(probe.seed, "probe", 5000)

    groups = []
    for g_idx in range(probe.pair_groups):
        mode = ("x_only", "translate_plus", "translate_minus", "deform")[g_idx % 4]
        k = probe.pairs_per_group
        groups.append(
            {
                "mode": mode,
                "t": float(rng.random() * model.horizon),
                "cloud": _ball_points(rng, 1, d, 1.0)[0] + 0.5 * rng.standard_normal((probe.cloud_size, d)),
                "direction": _ball_points(rng, 1, d, 1.0, surface=True)[0],
                "deform": rng.standard_normal((probe.cloud_size, d)),
                "x_far": _ball_points(rng, k, d, 1.0),
                "x_near_unit": _ball_points(rng, k, d, 1.0),
                "near": rng.random(k) < 0.5,
                "dx_unit": _ball_points(rng, k, d, 1.0, surface=True),
                "a": model.action_set.sample(rng, k, scale=1.0),
            }
        )

    level_max = {"drift": [], "volatility": []}
    for delta in probe.separations:
        worst = {"drift": 0.0, "volatility": 0.0}
        for grp in groups:
            mode = grp["mode"]
            x = np.where(grp["near"][:, None], delta * grp["x_near_unit"], grp["x_far"])
            if mode.startswith("translate"):
                sign = 1.0 if mode == "translate_plus" else -1.0
                dx = np.tile(delta * grp["direction"], (x.shape[0], 1))
                cloud2 = grp["cloud"] + sign * delta * grp["direction"]
            elif mode == "deform":
                dx = delta * grp["dx_unit"]
                cloud2 = grp["cloud"] + delta * grp["deform"]
            else:
                dx = delta * grp["dx_unit"]
                cloud2 = grp["cloud"]
            law1, law2 = EmpiricalLaw.uniform(grp["cloud"]), EmpiricalLaw.uniform(cloud2)
            w = wasserstein_exact(law1, law2, p) if mode != "x_only" else 0.0
            m1, m2 = MeasureView.from_law(law1, p), MeasureView.from_law(law2, p)
            denom = np.maximum(np.linalg.norm(dx, axis=1), w)

            t, a = grp["t"], grp["a"]
            for name, fn in (("drift", model.drift), ("volatility", model.volatility)):
                v1 = _finite(name, np.asarray(fn(t, x, m1, a), dtype=float)).reshape(x.shape[0], -1)
                v2 = _finite(name, np.asarray(fn(t, x + dx, m2, a), dtype=float)).reshape(x.shape[0], -1)
                ratio = np.linalg.norm(v2 - v1, axis=1) / denom
                worst[name] = max(worst[name], float(ratio.max()))
        for name in level_max:
            level_max[name].append(worst[name])

    checks = []
    for name, levels in level_max.items():
        levels_arr = np.asarray(levels)
        if levels_arr[0] > 0:
            growth = float(levels_arr.max() / levels_arr[0])
        else:
            growth = 1.0 if levels_arr.max() <= 1e-12 else np.inf
        passed = growth <= probe.stability_factor
        checks.append(
            CheckResult(f"{name}_lipschitz", float(levels_arr.max()), growth, probe.stability_factor, bool(passed))
        )
    constant = max(c.constant for c in checks)
    return ValidationReport("lipschitz", model.name, tuple(checks), {"lipschitz": constant}, probe.seed)


def _ball_points(rng: np.random.Generator, n: int, d: int, radius: float, surface: bool = False) -> np.ndarray:
    direction = rng.standard_normal((n, d))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-300)
    if surface:
        return radius * direction
    return radius * direction * rng.random((n, 1)) ** (1.0 / d)


# ==============================================================================
# Builtin models
# ==============================================================================

DEFAULT_EXPONENTS = Exponents(p=1.0, p_prime=2.0, p_sigma=0.0)


def _merge(name: str, defaults: dict, params: Mapping[str, Any] | None) -> dict:
    params = dict(params or {})
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise InvalidParam(f"Unknown parameter(s) for {name}: {', '.join(unknown)}")
    merged = {**defaults, **params}
    for key, value in merged.items():
        if value is not None and not np.isfinite(float(value)):
            raise InvalidParam(f"Parameter {key} of {name} must be finite")
    return merged


def _initial_law(params: dict) -> InitialLaw:
    return InitialLaw.normal([params["x0_mean"]], [params["x0_std"]])


def _ou_chaos(params: Mapping[str, Any] | None) -> ModelSpec:
    defaults = {"kappa": 1.0, "gamma": None, "sigma0": 1.0, "horizon": 1.0, "x0_mean": 0.0, "x0_std": 0.5, "a_max": 1.0}
    prm = _merge("ou_chaos", defaults, params)
    if prm["gamma"] is None:
        prm["gamma"] = prm["kappa"]
    kappa, gamma, sigma0 = float(prm["kappa"]), float(prm["gamma"]), float(prm["sigma0"])
    if prm["x0_std"] < 0 or prm["a_max"] <= 0:
        raise InvalidParam("ou_chaos needs x0_std >= 0 and a_max > 0")

    def drift(t, x, m, a):
        return gamma * m.mean[None, :] - kappa * x

    def volatility(t, x, m, a):
        return np.full((x.shape[0], 1, 1), sigma0)

    def running_reward(t, x, m, a):
        return np.zeros(x.shape[0])

    def terminal_reward(x, m):
        return -((x - m.mean[None, :]) ** 2).sum(axis=1)

    return ModelSpec(
        name="ou_chaos",
        dim_state=1,
        dim_noise=1,
        horizon=float(prm["horizon"]),
        action_set=ActionSet.box([-prm["a_max"]], [prm["a_max"]]),
        exponents=DEFAULT_EXPONENTS,
        drift=drift,
        volatility=volatility,
        running_reward=running_reward,
        terminal_reward=terminal_reward,
        initial_law=_initial_law(prm),
        params=prm,
    )


def _lq_meanfield(params: Mapping[str, Any] | None) -> ModelSpec:
    defaults = {
        "beta": 0.2,
        "gamma": 0.3,
        "sigma0": 0.5,
        "q": 1.0,
        "qbar": 1.0,
        "s": 0.5,
        "r": 1.0,
        "qT": 1.0,
        "qbarT": 0.5,
        "sT": 0.5,
        "a_max": 10.0,
        "horizon": 1.0,
        "x0_mean": 1.0,
        "x0_std": 0.5,
    }
    prm = _merge("lq_meanfield", defaults, params)
    if prm["r"] <= 0:
        raise InvalidParam(f"lq_meanfield needs r > 0, got r={prm['r']}")
    for key in ("q", "qbar", "qT", "qbarT"):
        if prm[key] < 0:
            raise InvalidParam(f"lq_meanfield needs {key} >= 0")
    if prm["a_max"] <= 0 or prm["x0_std"] < 0:
        raise InvalidParam("lq_meanfield needs a_max > 0 and x0_std >= 0")
    beta, gamma, sigma0 = float(prm["beta"]), float(prm["gamma"]), float(prm["sigma0"])
    q, qbar, s, r = float(prm["q"]), float(prm["qbar"]), float(prm["s"]), float(prm["r"])
    qT, qbarT, sT = float(prm["qT"]), float(prm["qbarT"]), float(prm["sT"])

    def drift(t, x, m, a):
        return beta * x + gamma * m.mean[None, :] + a

    def volatility(t, x, m, a):
        return np.full((x.shape[0], 1, 1), sigma0)

    def running_reward(t, x, m, a):
        xs = x[:, 0]
        return -0.5 * (q * xs**2 + qbar * (xs - s * m.mean[0]) ** 2 + r * a[:, 0] ** 2)

    def terminal_reward(x, m):
        xs = x[:, 0]
        return -0.5 * (qT * xs**2 + qbarT * (xs - sT * m.mean[0]) ** 2)

    return ModelSpec(
        name="lq_meanfield",
        dim_state=1,
        dim_noise=1,
        horizon=float(prm["horizon"]),
        action_set=ActionSet.box([-prm["a_max"]], [prm["a_max"]]),
        exponents=DEFAULT_EXPONENTS,
        drift=drift,
        volatility=volatility,
        running_reward=running_reward,
        terminal_reward=terminal_reward,
        initial_law=_initial_law(prm),
        params=prm,
    )


def _bang_relaxed(params: Mapping[str, Any] | None) -> ModelSpec:
    prm = _merge("bang_relaxed", {"epsilon": 0.1, "horizon": 1.0}, params)
    if prm["epsilon"] < 0:
        raise InvalidParam("bang_relaxed needs epsilon >= 0")
    eps = float(prm["epsilon"])

    def drift(t, x, m, a):
        return np.array(a, dtype=float).reshape(x.shape[0], 1)

    def volatility(t, x, m, a):
        return np.full((x.shape[0], 1, 1), eps)

    def running_reward(t, x, m, a):
        return -(x[:, 0] ** 2)

    def terminal_reward(x, m):
        return np.zeros(x.shape[0])

    return ModelSpec(
        name="bang_relaxed",
        dim_state=1,
        dim_noise=1,
        horizon=float(prm["horizon"]),
        action_set=ActionSet.finite([[-1.0], [1.0]]),
        exponents=DEFAULT_EXPONENTS,
        drift=drift,
        volatility=volatility,
        running_reward=running_reward,
        terminal_reward=terminal_reward,
        initial_law=InitialLaw.dirac([0.0]),
        params=prm,
    )


BUILTIN_MODELS: dict[str, Callable[[Mapping[str, Any] | None], ModelSpec]] = {
    "ou_chaos": _ou_chaos,
    "lq_meanfield": _lq_meanfield,
    "bang_relaxed": _bang_relaxed,
}

_USER_MODELS: dict[str, Callable[[Mapping[str, Any] | None], ModelSpec]] = {}


def register_model(name: str, factory: Callable[[Mapping[str, Any] | None], ModelSpec]):
    """Registers a user model factory; config files can then select it by name."""
    if name in BUILTIN_MODELS:
        raise InvalidParam(f"'{name}' is a builtin model and cannot be replaced")
    _USER_MODELS[name] = factory


def builtin_model(name: str, params: Mapping[str, Any] | None = None) -> ModelSpec:
    factory = BUILTIN_MODELS.get(name) or _USER_MODELS.get(name)
    if factory is None:
        known = ", ".join(sorted(BUILTIN_MODELS) + sorted(_USER_MODELS))
        raise UnknownModel(f"Unknown model '{name}'. Known models: {known}")
    return factory(params)
