"""Experiment configuration, seeded trials, aggregation and file outputs."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import ConfigurationError, discretize_prm
from .ddpg import DdpgParams, ddpg_train, random_baseline
from .dsl import FIXTURE_DIR, load_prm
from .envs import ENVIRONMENTS, make_env
from .nn import save_weights
from .oracle import ProductModel, greedy_policy
from .product import JointMachine, MachineTable, make_labeler
from .shaping import value_iteration
from .tabular import TabularParams, train_tabular

log = logging.getLogger(__name__)

# algorithm -> (learner, counterfactuals, shaping)
ALGORITHMS = {
    "ql": ("tabular", False, False),
    "ql_rs": ("tabular", False, True),
    "prme": ("tabular", True, False),
    "prme_rs": ("tabular", True, True),
    "ddpg": ("ddpg", False, False),
    "ddpg_rs": ("ddpg", False, True),
    "ddpg_prme": ("ddpg", True, False),
    "ddpg_prme_rs": ("ddpg", True, True),
}

PERCENTILE_METHOD = "linear"
DERIVED_PARAMS = {"use_prme", "use_shaping", "max_training_steps"}


@dataclass
class ExperimentConfig:
    env: str
    machines: list
    algorithm: str = "ql"
    trials: int = 1
    base_seed: int = 0
    max_training_steps: int = 10_000
    grid: list | None = None  # per machine: list of cell widths, or null for defaults
    aliases: list | None = None  # per machine: {machine symbol: environment symbol}
    output_dir: str = "runs/default"
    map: str | None = None
    noise: bool = True
    params: dict = field(default_factory=dict)
    policy_eval_every: int = 0  # tabular on office: exact greedy value every n steps
    oracle_limit: int = 2_000_000

    def __post_init__(self):
        if isinstance(self.machines, str):
            self.machines = [self.machines]
        if self.env not in ENVIRONMENTS:
            raise ConfigurationError(f"unknown environment {self.env!r}; choose from {sorted(ENVIRONMENTS)}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}; choose from {sorted(ALGORITHMS)}")
        if not self.machines:
            raise ConfigurationError("at least one machine file is required")
        if self.trials < 1:
            raise ConfigurationError("trials must be at least 1")
        if self.max_training_steps < 1:
            raise ConfigurationError("max_training_steps must be positive")
        for key in ("grid", "aliases"):
            value = getattr(self, key)
            if value is not None and len(value) != len(self.machines):
                raise ConfigurationError(f"{key} needs one entry per machine")
        discrete = ENVIRONMENTS[self.env].discrete
        if self.learner == "tabular" and not discrete:
            raise ConfigurationError(f"tabular algorithm {self.algorithm} needs a discrete environment")
        if self.learner == "ddpg" and discrete:
            raise ConfigurationError(f"{self.algorithm} needs a continuous environment")
        for m in self.machines:
            resolve_machine_path(m)
        if self.map is not None and not Path(self.map).is_file():
            raise ConfigurationError(f"map file {self.map} does not exist")
        self.learner_params()  # validates the hyperparameters

    @property
    def learner(self) -> str:
        return ALGORITHMS[self.algorithm][0]

    def learner_params(self):
        learner, prme, shaping = ALGORITHMS[self.algorithm]
        cls = TabularParams if learner == "tabular" else DdpgParams
        known = {f.name for f in fields(cls)}
        unknown = set(self.params) - known
        if unknown:
            raise ConfigurationError(f"unknown {learner} parameters {sorted(unknown)}")
        if DERIVED_PARAMS & set(self.params):
            raise ConfigurationError("use_prme, use_shaping and max_training_steps follow from the config")
        return cls(**self.params, use_prme=prme, use_shaping=shaping, max_training_steps=self.max_training_steps)

    def resolved(self) -> dict:
        """Every setting, including defaults, as plain JSON data."""
        out = asdict(self)
        out["machines"] = [str(resolve_machine_path(m)) for m in self.machines]
        params = asdict(self.learner_params())
        for key in DERIVED_PARAMS:
            params.pop(key)
        out["params"] = params
        return out


def resolve_machine_path(name) -> Path:
    p = Path(name)
    if p.is_file():
        return p
    q = FIXTURE_DIR / f"{name}.prm"
    if q.is_file():
        return q
    raise ConfigurationError(f"machine file {name} does not exist")


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict({**data, **overrides})


def config_from_dict(data: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    missing = {"env", "machines"} - set(data)
    if missing:
        raise ConfigurationError(f"config lacks {sorted(missing)}")
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


@dataclass
class Setup:
    env: object
    prms: list
    joint: JointMachine
    potentials: list


def build(config: ExperimentConfig) -> Setup:
    env = make_env(config.env, noise=config.noise, map_path=config.map)
    prms = [load_prm(resolve_machine_path(m)) for m in config.machines]
    tables, labelers = [], []
    for i, prm in enumerate(prms):
        widths = config.grid[i] if config.grid and config.grid[i] is not None else None
        tables.append(MachineTable(discretize_prm(prm, widths)))
        aliases = config.aliases[i] if config.aliases else None
        labelers.append(make_labeler(prm, aliases))
    joint = JointMachine(tables, labelers)
    params = config.learner_params()
    potentials = []
    if params.use_shaping:
        tol = getattr(params, "shaping_tol", 1e-6)
        potentials = [value_iteration(t, params.lam, tol) for t in tables]
        joint.set_potentials([p.values for p in potentials])
    return Setup(env, prms, joint, potentials)


_MODEL_CACHE: dict = {}


def product_model(config: ExperimentConfig, setup: Setup) -> ProductModel:
    key = json.dumps({k: v for k, v in config.resolved().items() if k in ("env", "machines", "grid", "aliases", "map")})
    model = _MODEL_CACHE.get(key)
    if model is None:
        model = ProductModel(setup.env, setup.joint, config.oracle_limit)
        _MODEL_CACHE.clear()
        _MODEL_CACHE[key] = model
    return model


def initial_index(setup: Setup) -> tuple[int, int]:
    return setup.env.initial_state(), setup.joint.index([p.initial_state() for p in setup.prms])


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    trial: int
    seed: int
    steps: list
    avg_reward: list
    runtime: float
    extras: dict = field(default_factory=dict)
    error: str | None = None


def run_trial(config: ExperimentConfig, trial: int, out_dir: Path | None = None) -> TrialResult:
    seed = config.base_seed + trial
    setup = build(config)
    params = config.learner_params()
    extras: dict = {}
    if config.learner == "tabular":
        snaps = ()
        if config.policy_eval_every:
            every = config.policy_eval_every
            snaps = list(range(every, config.max_training_steps + 1, every))
        res = train_tabular(setup.env, setup.prms, setup.joint, params, seed, snapshot_steps=snaps)
        if snaps:
            model = product_model(config, setup)
            x0, m0 = initial_index(setup)
            extras["policy_value"] = [
                [s, float(model.policy_value(greedy_policy(res.snapshots[s]), params.lam)[x0, m0])] for s in snaps
            ]
        extras["episodes"] = res.episodes
        extras["updates"] = res.updates
        if out_dir is not None:
            np.savez_compressed(out_dir / f"qtable_trial{trial}.npz", q=res.q.q, visits=res.q.visits)
    else:
        res = ddpg_train(setup.env, setup.prms, setup.joint, params, seed)
        extras["episodes"] = res.episodes
        extras["inserts"] = res.inserts
        extras["greedy_avg_reward"] = res.eval_reward
        if out_dir is not None:
            save_weights(res.actor, out_dir / f"actor_trial{trial}.prmw")
            save_weights(res.critic, out_dir / f"critic_trial{trial}.prmw")
    return TrialResult(trial, seed, res.steps.tolist(), res.avg_reward.tolist(), res.runtime, extras)


def _trial_job(args):
    config, trial, out_dir = args
    try:
        return run_trial(config, trial, out_dir)
    except Exception as exc:  # recorded per trial, aggregation continues
        return TrialResult(trial, config.base_seed + trial, [], [], 0.0, {}, f"{type(exc).__name__}: {exc}")


def percentiles(values, qs=(25, 50, 75)) -> np.ndarray:
    """Percentiles along axis 0 with linear interpolation between order statistics."""
    return np.percentile(np.asarray(values, dtype=float), qs, axis=0, method=PERCENTILE_METHOD)


@dataclass
class MetricSeries:
    trials: list
    steps: np.ndarray
    p25: np.ndarray
    median: np.ndarray
    p75: np.ndarray
    metadata: dict

    @property
    def completed(self) -> list:
        return [t for t in self.trials if t.error is None]


def aggregate(trials: list) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    done = [t for t in trials if t.error is None]
    if not done:
        raise RuntimeError("no trial completed")
    steps = np.asarray(done[0].steps, dtype=np.int64)
    values = np.array([t.avg_reward for t in done])
    p25, med, p75 = percentiles(values)
    return steps, p25, med, p75


def _fmt(v: float) -> str:
    return repr(float(v))


def write_metrics(trials: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "trial", "avg_reward"])
        for t in trials:
            if t.error is not None:
                continue
            for s, v in zip(t.steps, t.avg_reward):
                w.writerow([s, t.trial, _fmt(v)])


def write_aggregate(steps, p25, med, p75, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "p25", "median", "p75"])
        for row in zip(steps, p25, med, p75):
            w.writerow([int(row[0]), *(_fmt(v) for v in row[1:])])


def read_aggregate(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read either an aggregate file or a long-form metrics file."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigurationError(f"{path} has no rows")
    if "median" in rows[0]:
        cols = [np.array([float(r[k]) for r in rows]) for k in ("step", "p25", "median", "p75")]
        return cols[0].astype(np.int64), cols[1], cols[2], cols[3]
    if "avg_reward" not in rows[0]:
        raise ConfigurationError(f"{path} is not a metrics file")
    by_trial: dict = {}
    for r in rows:
        by_trial.setdefault(int(r["trial"]), []).append((int(r["step"]), float(r["avg_reward"])))
    series = [sorted(v) for _, v in sorted(by_trial.items())]
    steps = np.array([s for s, _ in series[0]], dtype=np.int64)
    p25, med, p75 = percentiles([[v for _, v in s] for s in series])
    return steps, p25, med, p75


def oracle_summary(config: ExperimentConfig, setup: Setup | None = None) -> dict:
    """Optimal value at the start state and reward rates of the optimal policy."""
    setup = setup or build(config)
    params = config.learner_params()
    model = product_model(config, setup)
    result = model.value_iteration(params.lam)
    x0, m0 = initial_index(setup)
    start = model.index(x0, m0)
    g = greedy_policy(result.q)
    eps = params.epsilon
    rate, ep_reward, ep_len = model.average_reward(g, start, params.episode_step_cap)
    rate_eps, _, _ = model.average_reward((1 - eps) * g + eps / model.n_a, start, params.episode_step_cap)
    return {
        "initial_value": float(result.v[x0, m0]),
        "optimal_rate": rate,
        "optimal_rate_epsilon": rate_eps,
        "optimal_episode_reward": ep_reward,
        "optimal_episode_length": ep_len,
        "epsilon": eps,
        "lam": params.lam,
        "product_states": model.n,
        "iterations": result.iterations,
    }


def oracle_product_vi(config: ExperimentConfig, potential_shaping: bool = False):
    """Exact value iteration on ``office x machines``; returns the result and model."""
    setup = build(config)
    params = config.learner_params()
    model = product_model(config, setup)
    pot = None
    if potential_shaping:
        tables = setup.joint.tables
        pots = [value_iteration(t, params.lam).values for t in tables]
        setup.joint.set_potentials(pots)
        pot = setup.joint.potential
    return model.value_iteration(params.lam, potential=pot), model, setup


def run_experiment(config: ExperimentConfig, jobs: int = 1, write: bool = True) -> MetricSeries:
    out_dir = Path(config.output_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    jobs_list = [(config, i, out_dir if write else None) for i in range(config.trials)]
    if jobs > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_trial_job, jobs_list))
    else:
        trials = [_trial_job(j) for j in jobs_list]
    trials.sort(key=lambda t: t.trial)
    failed = [t for t in trials if t.error is not None]
    for t in failed:
        log.warning("trial %d failed: %s", t.trial, t.error)
    if len(failed) == len(trials):
        raise RuntimeError(f"all {len(trials)} trials failed; first error: {failed[0].error}")
    steps, p25, med, p75 = aggregate(trials)
    params = config.learner_params()
    meta = {
        "config": config.resolved(),
        "percentile_method": PERCENTILE_METHOD,
        "metric": "average reward per training step over a trailing window",
        "metric_window": params.metric_window,
        "checkpoint_every": params.checkpoint_every,
        "completed_trials": len(trials) - len(failed),
        "failed_trials": [{"trial": t.trial, "error": t.error} for t in failed],
        "trial_runtimes": {str(t.trial): t.runtime for t in trials},
        "trial_extras": {str(t.trial): t.extras for t in trials if t.error is None},
        "wall_time": time.perf_counter() - t0,
    }
    if config.learner == "tabular" and config.env == "office":
        try:
            meta["oracle"] = oracle_summary(config)
        except ConfigurationError as exc:
            meta["oracle"] = {"skipped": str(exc)}
    if config.learner == "ddpg":
        setup = build(config)
        meta["random_baseline"] = random_baseline(
            setup.env, setup.prms, setup.joint.labelers, params.eval_episodes, params.episode_step_cap, config.base_seed
        )
    series = MetricSeries(trials, steps, p25, med, p75, meta)
    if write:
        write_metrics(trials, out_dir / "metrics.csv")
        write_aggregate(steps, p25, med, p75, out_dir / "metrics_aggregate.csv")
        (out_dir / "curve.svg").write_text(render_curve_svg(steps, p25, med, p75, title=config.algorithm))
        (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=float))
    return series


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------


def export_heatmap(q: np.ndarray, env, joint: JointMachine, prms, mode: str) -> list[list]:
    """Grid of ``max_u q`` at machine mode ``mode`` (machine 0).

    The other machine coordinates stay at their initial cell; walls are
    ``None``.  Rows and columns follow the map.
    """
    if not getattr(env, "discrete", False) or not hasattr(env, "cells"):
        raise ConfigurationError("heatmaps need a grid environment")
    states = [p.initial_state() for p in prms]
    try:
        mode_idx = prms[0].mode_index(mode)
    except KeyError as exc:
        raise ConfigurationError(f"machine {prms[0].name} has no mode {mode!r}") from exc
    states[0] = type(states[0])(mode_idx, states[0].psi, 0)
    m = joint.index(states)
    grid = [[None] * env.width for _ in range(env.height)]
    for x, (r, c) in enumerate(env.cells):
        grid[r][c] = float(np.max(q[x, m]))
    return grid


def write_heatmap_csv(grid, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for r, row in enumerate(grid):
            for c, v in enumerate(row):
                w.writerow([r, c, "" if v is None else _fmt(v)])


def render_heatmap_svg(grid, cell: int = 24) -> str:
    vals = [v for row in grid for v in row if v is not None]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    h, w = len(grid), len(grid[0]) if grid else 0
    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}">\n')
    for r, row in enumerate(grid):
        for c, v in enumerate(row):
            if v is None:
                color = "#444444"
            else:
                t = (v - lo) / span
                color = f"#{int(255 * (1 - t)):02x}{int(80):02x}{int(255 * t):02x}"
            out.write(f'<rect x="{c * cell}" y="{r * cell}" width="{cell}" height="{cell}" fill="{color}"/>\n')
    out.write("</svg>\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------


def render_curve_svg(steps, p25, med, p75, title: str = "", width: int = 640, height: int = 400) -> str:
    """Median curve with a 25-75 percentile band, as standalone SVG."""
    steps = np.asarray(steps, dtype=float)
    left, right, top, bottom = 60, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    x_hi = steps.max() if len(steps) else 1.0
    x_lo = steps.min() if len(steps) else 0.0
    y_hi = max(float(np.max(p75)) if len(p75) else 1.0, 1e-12)
    y_hi = _nice_ceiling(y_hi)
    x_span = x_hi - x_lo if x_hi > x_lo else 1.0

    def px(s):
        return left + (s - x_lo) / x_span * pw

    def py(v):
        return top + ph - v / y_hi * ph

    band = [(px(s), py(v)) for s, v in zip(steps, p75)] + [(px(s), py(v)) for s, v in zip(steps[::-1], p25[::-1])]
    line = [(px(s), py(v)) for s, v in zip(steps, med)]
    out = io.StringIO()
    out.write(f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">\n')
    out.write(f'<rect width="{width}" height="{height}" fill="white"/>\n')
    out.write(f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{_escape(title)}</text>\n')
    out.write(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>\n')
    out.write(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>\n')
    for i in range(5):
        v = y_hi * i / 4
        y = py(v)
        out.write(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>\n')
        s = x_lo + x_span * i / 4
        x = px(s)
        out.write(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">{s:.0f}</text>\n')
    out.write(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">training step</text>\n')
    if band:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in band)
        out.write(f'<polygon points="{pts}" fill="#9ecae1" fill-opacity="0.5" stroke="none"/>\n')
    if line:
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in line)
        out.write(f'<polyline points="{pts}" fill="none" stroke="#08519c" stroke-width="1.5"/>\n')
    out.write("</svg>\n")
    return out.getvalue()


def _nice_ceiling(v: float) -> float:
    exp = math.floor(math.log10(v))
    for m in (1, 2, 2.5, 5, 10):
        if m * 10**exp >= v:
            return m * 10**exp
    return 10 ** (exp + 1)


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
