"""
Convergence harness: forward limit, converse limit and chattering studies.

Every (n, seed) cell is an independent job. Completed cells are appended to
``records.jsonl`` with a SHA-256 checksum of their payload, so an interrupted
run resumes by skipping verified cells. Reference artifacts (oracle clouds,
reference ensembles) live in a content-addressed cache keyed by model,
parameters, steps, seed and artifact kind.
"""

import hashlib
import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Mapping

import numpy as np

from mfclab.engine.control import FeedbackPolicy, RelaxedControl, chatter, truncate
from mfclab.engine.measure import EmpiricalLaw, PathEnsemble, wasserstein_exact
from mfclab.engine.model import ModelSpec, builtin_model
from mfclab.engine.objective import ObjectiveEstimate, estimate_gamma, estimate_n_objective
from mfclab.engine.optimize import (
    OptimizeConfig,
    default_template,
    epsilon_report,
    optimize_policy,
    solve_lq_oracle,
    solve_ou_oracle,
)
from mfclab.engine.sim import MeasureFlow, SimConfig, couple_from_mkv, mkv_fixed_point_run, simulate_nsystem
from mfclab.utils.config import build_section, load_yaml
from mfclab.utils.errors import ConfigError, MfclabError, NumericalBlowup

logger = logging.getLogger(__name__)

HOLDOUT_OFFSET = 1_000_000
RECORDS_FILE = "records.jsonl"


# ==============================================================================
# Configuration
# ==============================================================================


@dataclass(frozen=True)
class ModelSection:
    name: str = "lq_meanfield"
    params: Mapping[str, Any] = field(default_factory=dict)

    def build(self) -> ModelSpec:
        return builtin_model(self.name, dict(self.params or {}))


@dataclass(frozen=True)
class ScheduleSection:
    n_schedule: tuple = (50, 100, 200, 400)
    seeds_per_n: int = 10
    n_reference: int = 2000
    warm_start: bool = True
    subsample_cap: int = 512
    workers: int = 1
    policy_knots: int = 2
    reference_files: tuple = ()

    def __post_init__(self):
        schedule = tuple(int(n) for n in self.n_schedule)
        if not schedule or any(n < 1 for n in schedule) or any(b <= a for a, b in zip(schedule, schedule[1:])):
            raise ValueError("n_schedule must be a non-empty increasing list of positive integers")
        if self.seeds_per_n < 1 or self.workers < 1 or self.subsample_cap < 2 or self.policy_knots < 1:
            raise ValueError("seeds_per_n, workers and policy_knots must be positive; subsample_cap at least 2")
        object.__setattr__(self, "n_schedule", schedule)


@dataclass(frozen=True)
class ChatterSection:
    base_intervals: int = 16
    atoms: tuple = ((-1.0, 0.5), (1.0, 0.5))
    levels: int = 6
    first_level: int = 1
    truncate_radius: float | None = None
    picard_iters: int = 20
    picard_tol: float = 1e-8
    optimize_strict: bool = False
    t_bins: int = 4
    x_bins: int = 5

    def __post_init__(self):
        if self.base_intervals < 1 or not 0 <= self.first_level <= self.levels:
            raise ValueError("base_intervals must be positive and 0 <= first_level <= levels")
        atoms = tuple((a, float(w)) for a, w in self.atoms)
        if not atoms:
            raise ValueError("chatter.atoms needs at least one [action, weight] pair")
        object.__setattr__(self, "atoms", atoms)


@dataclass(frozen=True)
class OutputSection:
    dir: str = "mfclab-out"
    cache_dir: str | None = None
    save_ensembles: bool = True

    @property
    def cache(self) -> str:
        return self.cache_dir or os.path.join(self.dir, "cache")


SECTIONS = {
    "model": ModelSection,
    "sim": SimConfig,
    "optimize": OptimizeConfig,
    "schedule": ScheduleSection,
    "chatter": ChatterSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    sim: SimConfig = field(default_factory=SimConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    chatter: ChatterSection = field(default_factory=ChatterSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "ExperimentConfig":
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown top-level section(s): {', '.join(unknown)}")
        return cls(**{name: build_section(section, raw.get(name), name) for name, section in SECTIONS.items()})

    @classmethod
    def load(cls, path: str | None, seed: int | None = None, out: str | None = None, workers: int | None = None):
        """Reads a YAML config; CLI flags override the file."""
        cfg = cls.from_mapping(load_yaml(path)) if path else cls()
        return cfg.override(seed=seed, out=out, workers=workers)

    def override(self, seed: int | None = None, out: str | None = None, workers: int | None = None):
        cfg = self
        if seed is not None:
            cfg = replace(cfg, sim=cfg.sim.with_(seed=int(seed)))
        if out is not None:
            cfg = replace(cfg, output=OutputSection(out, self.output.cache_dir, self.output.save_ensembles))
        if workers is not None:
            cfg = replace(cfg, schedule=replace(cfg.schedule, workers=int(workers)))
        return cfg

    def to_dict(self) -> dict:
        data = asdict(self)
        data["model"]["params"] = dict(self.model.params or {})
        return data

    def fingerprint(self) -> str:
        """Digest of every setting that can change a result; output paths and worker counts excluded."""
        data = self.to_dict()
        data.pop("output")
        data["schedule"].pop("workers")
        data["optimize"].pop("workers")
        data["optimize"].pop("trace_path")
        return checksum(data)[:12]


# ==============================================================================
# Record store and artifact cache
# ==============================================================================


def checksum(payload: Mapping[str, Any]) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


class RecordStore:
    """Append-only JSON-lines store of completed cells."""

    def __init__(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        self.path = os.path.join(directory, RECORDS_FILE)
        self._lock = threading.Lock()
        self._records: dict[str, dict] = {}
        if os.path.exists(self.path):
            self._load()

    def _load(self):
        with open(self.path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    entry = json.loads(line)
                    key, payload, digest = entry["key"], entry["payload"], entry["checksum"]
                except (json.JSONDecodeError, KeyError, TypeError):
                    logger.warning("Skipping unreadable record on line %d of %s", line_no, self.path)
                    continue
                if checksum(payload) != digest:
                    logger.warning("Checksum mismatch for record %s; it will be recomputed", key)
                    continue
                self._records[key] = payload

    def get(self, key: str) -> dict | None:
        return self._records.get(key)

    def put(self, key: str, payload: dict):
        entry = {"key": key, "payload": payload, "checksum": checksum(payload)}
        with self._lock:
            self._records[key] = payload
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._records)


class ArtifactCache:
    """Content-addressed store of numpy arrays keyed by a JSON descriptor."""

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    def key(self, descriptor: Mapping[str, Any]) -> str:
        return checksum(dict(descriptor))[:32]

    def get_or_compute(self, descriptor: Mapping[str, Any], compute: Callable[[], dict]) -> dict:
        key = self.key(descriptor)
        path = os.path.join(self.directory, f"{key}.npz")
        if os.path.exists(path):
            logger.debug("cache hit %s (%s)", key, descriptor.get("kind"))
            with np.load(path) as data:
                return {name: data[name] for name in data.files}
        arrays = compute()
        np.savez(path, **arrays)
        with open(os.path.join(self.directory, f"{key}.json"), "w", encoding="utf-8") as f:
            json.dump(dict(descriptor), f, sort_keys=True, indent=2)
        return arrays


# ==============================================================================
# References
# ==============================================================================


@dataclass(frozen=True, eq=False)
class Reference:
    """Optimal reference: value, policy, limit flow and one or more (mid, terminal) clouds."""

    kind: str
    value: float
    policy: FeedbackPolicy
    flow: MeasureFlow
    clouds: tuple

    def summary(self) -> dict:
        return {"kind": self.kind, "value": self.value, "clouds": len(self.clouds)}


def _mid_index(steps: int) -> int:
    return steps // 2


def build_reference(cfg: ExperimentConfig, model: ModelSpec, cache: ArtifactCache) -> Reference:
    """Oracle when one exists for the model, otherwise a converged McKean-Vlasov ensemble."""
    steps = cfg.sim.steps
    n_ref = max(cfg.schedule.n_reference, 4 * max(cfg.schedule.n_schedule))
    mid = _mid_index(steps)
    descriptor = {
        "model": model.describe(),
        "steps": steps,
        "seed": cfg.sim.seed,
        "n_reference": n_ref,
    }

    if model.name in ("lq_meanfield", "ou_chaos"):
        oracle = solve_lq_oracle(model, steps) if model.name == "lq_meanfield" else solve_ou_oracle(model, steps)

        def sample():
            return {
                "mid": oracle.reference_cloud(mid, n_ref, cfg.sim.seed).points,
                "terminal": oracle.reference_cloud(steps, n_ref, cfg.sim.seed).points,
            }

        arrays = cache.get_or_compute({**descriptor, "kind": "oracle_clouds"}, sample)
        kind, value, policy, flow = "oracle", oracle.value, oracle.policy, oracle.mean_flow
    else:
        ref_sim = cfg.sim.with_(n_particles=n_ref)
        opt = replace(cfg.optimize, trace_path=None, workers=cfg.schedule.workers)
        template = default_template(model, cfg.schedule.policy_knots)
        result = optimize_policy(model, ref_sim, opt, "mkv_fixed_point", template)
        policy = result.policy
        flow, _, converged, output = mkv_fixed_point_run(
            model, ref_sim, policy, max_iter=opt.picard_iters, tol=opt.picard_tol, check_lipschitz=False
        )
        if not converged:
            logger.warning("Reference McKean-Vlasov ensemble did not converge; distances are approximate")

        def ensemble():
            return {"mid": output.paths.marginal(mid).points, "terminal": output.paths.terminal().points}

        arrays = cache.get_or_compute({**descriptor, "kind": "mkv_clouds", "theta": policy.theta.tolist()}, ensemble)
        kind, value = "mkv_ensemble", estimate_gamma(model, output, flow).value

    clouds = [(EmpiricalLaw.uniform(arrays["mid"]), EmpiricalLaw.uniform(arrays["terminal"]))]
    grid = cfg.sim.time_grid(model.horizon)
    for path in cfg.schedule.reference_files:
        ensemble = PathEnsemble.load_binary(path)
        clouds.append((ensemble.marginal(ensemble.index_of(grid[mid])), ensemble.terminal()))
    return Reference(kind, float(value), policy, flow, tuple(clouds))


def distance_to_reference(law: EmpiricalLaw, reference: Reference, which: int, cap: int, seed: int) -> float:
    """W2 to the nearest reference cloud, both sides subsampled to a common size of at most ``cap``."""
    best = np.inf
    for clouds in reference.clouds:
        ref = clouds[which]
        size = min(cap, law.n, ref.n)
        best = min(best, wasserstein_exact(law.subsample(size, seed), ref.subsample(size, seed), 2.0, cap=cap))
    return float(best)


# ==============================================================================
# Runs
# ==============================================================================


@dataclass(frozen=True)
class CellRecord:
    kind: str
    n: int
    seed: int
    values: dict
    status: str = "ok"
    error: str | None = None

    @property
    def key(self) -> str:
        return f"{self.kind}/n={self.n}/seed={self.seed}"

    def row(self) -> dict:
        row = {"kind": self.kind, "n": self.n, "seed": self.seed, "status": self.status, "error": self.error or ""}
        row.update({k: v for k, v in self.values.items() if not isinstance(v, (list, dict))})
        return row


@dataclass
class ConvergenceRun:
    kind: str
    records: list
    medians: dict
    slopes: dict
    reference: dict
    partial: bool

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "partial": self.partial,
            "reference": self.reference,
            "medians": {str(n): m for n, m in self.medians.items()},
            "slopes": self.slopes,
            "records": [asdict(r) for r in self.records],
        }


def loglog_slope(ns, values) -> float | None:
    """Least-squares slope of log(value) against log(n); None when undefined."""
    ns, values = np.asarray(ns, dtype=float), np.asarray(values, dtype=float)
    keep = np.isfinite(values) & (values > 0)
    if keep.sum() < 2:
        return None
    slope, _ = np.polyfit(np.log(ns[keep]), np.log(values[keep]), 1)
    return float(slope)


def cell_seeds(cfg: ExperimentConfig) -> list[int]:
    return [cfg.sim.seed + i for i in range(cfg.schedule.seeds_per_n)]


def _run_cells(
    kind: str, cfg: ExperimentConfig, store: RecordStore, job: Callable[[int, int, np.ndarray | None], dict]
) -> list[CellRecord]:
    """Runs every (n, seed) cell in schedule order; cells of one n run on the worker pool."""
    records: list[CellRecord] = []
    fingerprint = cfg.fingerprint()
    warm: dict[int, np.ndarray | None] = {seed: None for seed in cell_seeds(cfg)}

    def one(n: int, seed: int) -> CellRecord:
        key = f"{fingerprint}/{CellRecord(kind, n, seed, {}).key}"
        cached = store.get(key)
        if cached is not None:
            return CellRecord(kind, n, seed, cached)
        try:
            values = job(n, seed, warm[seed] if cfg.schedule.warm_start else None)
        except MfclabError as e:
            logger.warning("Cell %s failed: %s", key, e)
            return CellRecord(kind, n, seed, {}, status="failed", error=str(e))
        store.put(key, values)
        return CellRecord(kind, n, seed, values)

    for n in cfg.schedule.n_schedule:
        seeds = cell_seeds(cfg)
        if cfg.schedule.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.schedule.workers) as pool:
                batch = list(pool.map(one, [n] * len(seeds), seeds))
        else:
            batch = [one(n, s) for s in seeds]
        for rec in batch:
            if rec.status == "ok" and "theta" in rec.values:
                warm[rec.seed] = np.asarray(rec.values["theta"])
        records.extend(batch)
    return records


def _medians(records: list[CellRecord], fields: tuple) -> dict:
    out: dict[int, dict] = {}
    for n in sorted({r.n for r in records}):
        ok = [r for r in records if r.n == n and r.status == "ok"]
        out[n] = {}
        for f in fields:
            present = ok and all(r.values.get(f) is not None for r in ok)
            out[n][f] = float(np.median([r.values[f] for r in ok])) if present else None
    return out


def _cell_optimize(cfg: ExperimentConfig, model: ModelSpec, n: int, seed: int, warm: np.ndarray | None):
    sim = cfg.sim.with_(n_particles=n, seed=seed)
    opt = replace(cfg.optimize, eval_seeds=(seed,), holdout_seeds=(seed + HOLDOUT_OFFSET,), workers=1, trace_path=None)
    template = default_template(model, cfg.schedule.policy_knots)
    if warm is not None and warm.shape == template.theta.shape:
        template = template.with_theta(warm)
    return sim, optimize_policy(model, sim, opt, "n_system", template)


def run_forward_limit(cfg: ExperimentConfig) -> ConvergenceRun:
    """
    For each n and seed: optimize the n-particle system, simulate at the optimum
    and record W2 to the reference law at mid-horizon and at the horizon, plus
    the epsilon gap to the reference value.
    """
    model = cfg.model.build()
    store = RecordStore(cfg.output.dir)
    reference = build_reference(cfg, model, ArtifactCache(cfg.output.cache))
    mid = _mid_index(cfg.sim.steps)

    def job(n: int, seed: int, warm) -> dict:
        sim, result = _cell_optimize(cfg, model, n, seed, warm)
        output = simulate_nsystem(model, sim.with_(seed=seed + HOLDOUT_OFFSET), result.policy)
        if output.diagnostics.blowup:
            _blowup(n, seed)
        eps = epsilon_report(result.best, reference.value)
        cap = cfg.schedule.subsample_cap
        return {
            "value": result.best.value,
            "std_error": result.best.std_error,
            "epsilon": eps.epsilon,
            "epsilon_se": eps.std_error,
            "w2_terminal": distance_to_reference(output.paths.terminal(), reference, 1, cap, seed),
            "w2_mid": distance_to_reference(output.paths.marginal(mid), reference, 0, cap, seed),
            "coupling_gap": None,
            "theta": result.policy.theta.tolist(),
        }

    records = _run_cells("forward", cfg, store, job)
    fields = ("w2_terminal", "w2_mid", "epsilon", "value")
    medians = _medians(records, fields)
    ns = list(medians)
    slopes = {
        "w2_terminal": loglog_slope(ns, [medians[n]["w2_terminal"] for n in ns]),
        "epsilon": loglog_slope(ns, [medians[n]["epsilon"] for n in ns]),
    }
    return _finish("forward", records, medians, slopes, reference)


def run_converse_limit(cfg: ExperimentConfig) -> ConvergenceRun:
    """
    For each n and seed: apply the fixed McKean-Vlasov optimal policy to the
    interacting system, compare with the optimized n-particle value and record
    the coupling gap to the decoupled system.
    """
    model = cfg.model.build()
    store = RecordStore(cfg.output.dir)
    reference = build_reference(cfg, model, ArtifactCache(cfg.output.cache))

    def job(n: int, seed: int, warm) -> dict:
        _, result = _cell_optimize(cfg, model, n, seed, warm)
        holdout = cfg.sim.with_(n_particles=n, seed=seed + HOLDOUT_OFFSET)
        interacting, _, gap = couple_from_mkv(model, holdout, reference.flow, reference.policy)
        if interacting.diagnostics.blowup:
            _blowup(n, seed)
        fixed = estimate_n_objective(model, interacting)
        eps = epsilon_report(fixed, result.best)
        return {
            "value_fixed": fixed.value,
            "value_fixed_se": fixed.std_error,
            "best_value": result.best.value,
            "epsilon": eps.epsilon,
            "epsilon_se": eps.std_error,
            "coupling_gap": gap,
            "w2_terminal": distance_to_reference(
                interacting.paths.terminal(), reference, 1, cfg.schedule.subsample_cap, seed
            ),
            "theta": result.policy.theta.tolist(),
        }

    records = _run_cells("converse", cfg, store, job)
    medians = _medians(records, ("epsilon", "coupling_gap", "w2_terminal", "value_fixed"))
    ns = list(medians)
    slopes = {
        "coupling_gap": loglog_slope(ns, [medians[n]["coupling_gap"] for n in ns]),
        "epsilon": loglog_slope(ns, [medians[n]["epsilon"] for n in ns]),
    }
    return _finish("converse", records, medians, slopes, reference)


def _blowup(n: int, seed: int):
    raise NumericalBlowup(f"Simulation blew up for n={n}, seed={seed}")


def _finish(kind, records, medians, slopes, reference: Reference) -> ConvergenceRun:
    partial = any(r.status != "ok" for r in records)
    if partial:
        logger.warning("%s run is partial: %d failed cell(s)", kind, sum(r.status != "ok" for r in records))
    return ConvergenceRun(kind, records, medians, slopes, reference.summary(), partial)


# ==============================================================================
# Chattering study
# ==============================================================================


@dataclass(frozen=True)
class ChatterRow:
    refinement: int
    value: float
    gap: float
    std_error: float


@dataclass(frozen=True, eq=False)
class ChatterStudy:
    relaxed: ObjectiveEstimate
    rows: tuple
    strict_optimized: ObjectiveEstimate | None = None

    @property
    def relaxation_margin(self) -> float | None:
        """(relaxed - optimized strict) in combined standard errors."""
        if self.strict_optimized is None:
            return None
        se = float(np.hypot(self.relaxed.std_error, self.strict_optimized.std_error))
        diff = self.relaxed.value - self.strict_optimized.value
        return diff / se if se > 0 else float("inf") * np.sign(diff)

    def to_dict(self) -> dict:
        return {
            "relaxed": self.relaxed.to_record(),
            "rows": [asdict(r) for r in self.rows],
            "strict_optimized": self.strict_optimized.to_record() if self.strict_optimized else None,
            "relaxation_margin": self.relaxation_margin,
        }


def relaxed_control_from_config(cfg: ExperimentConfig, model: ModelSpec) -> RelaxedControl:
    grid = np.linspace(0.0, model.horizon, cfg.chatter.base_intervals + 1)
    atoms = [[(np.atleast_1d(a), w) for a, w in cfg.chatter.atoms] for _ in range(cfg.chatter.base_intervals)]
    q = RelaxedControl.from_atoms(grid, atoms)
    q.validate_in(model.action_set)
    if cfg.chatter.truncate_radius is not None:
        q = truncate(q, cfg.chatter.truncate_radius, model.action_set)
    return q


def default_control(cfg: ExperimentConfig, model: ModelSpec):
    """
    Control used when none is supplied: the zero linear policy on convex action
    sets, otherwise the configured chatter atoms held over the whole horizon.
    """
    if model.action_set.is_convex:
        return default_template(model, cfg.schedule.policy_knots)
    grid = np.array([0.0, model.horizon])
    q = RelaxedControl.from_atoms(grid, [[(np.atleast_1d(a), w) for a, w in cfg.chatter.atoms]])
    q.validate_in(model.action_set)
    return q


def run_chattering_study(cfg: ExperimentConfig) -> ChatterStudy:
    """
    Gamma of a relaxed control against Gamma of its chattered strict
    approximations at refinements 2^first_level .. 2^levels, all under common random numbers
    on the finest grid.
    """
    model = cfg.model.build()
    q = relaxed_control_from_config(cfg, model)
    steps = cfg.chatter.base_intervals * 2**cfg.chatter.levels
    if steps != cfg.sim.steps:
        logger.info("chattering study runs on %d steps so every refinement lies on the grid", steps)
    sim = cfg.sim.with_(steps=steps)

    def gamma(control) -> ObjectiveEstimate:
        flow, _, _, output = mkv_fixed_point_run(
            model, sim, control, max_iter=cfg.chatter.picard_iters, tol=cfg.chatter.picard_tol, check_lipschitz=False
        )
        return estimate_gamma(model, output, flow)

    relaxed = gamma(q)
    rows = []
    for j in range(cfg.chatter.first_level, cfg.chatter.levels + 1):
        refinement = 2**j
        strict = gamma(chatter(q, refinement))
        rows.append(
            ChatterRow(
                refinement,
                strict.value,
                abs(strict.value - relaxed.value),
                float(np.hypot(strict.std_error, relaxed.std_error)),
            )
        )
        logger.debug("refinement %d: gap %.3e", refinement, rows[-1].gap)

    strict_optimized = None
    if cfg.chatter.optimize_strict:
        strict_optimized = _optimize_strict(cfg, model, sim)
    return ChatterStudy(relaxed, tuple(rows), strict_optimized)


def _optimize_strict(cfg: ExperimentConfig, model: ModelSpec, sim: SimConfig) -> ObjectiveEstimate:
    """Best table policy over the action set, evaluated on the study grid."""
    t_bins, x_bins, k = cfg.chatter.t_bins, cfg.chatter.x_bins, model.action_set.dim_action
    t_centers = (np.arange(t_bins) + 0.5) * model.horizon / t_bins
    x_centers = np.linspace(-1.0, 1.0, x_bins)
    template = FeedbackPolicy.table(np.zeros((t_bins, x_bins, k)), t_centers, x_centers, model.action_set)
    opt = replace(cfg.optimize, holdout_seeds=(sim.seed + HOLDOUT_OFFSET,), trace_path=None)
    result = optimize_policy(model, sim, opt, "n_system", template)
    return result.best
