"""Multi-trial exploration experiments, aggregation and CSV output.

Within one trial every criterion starts from the same initial data, the
same initial trained model and the same observation-noise stream, so
differences between criteria come from the chosen controls alone.
"""
from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .acquisition import (AcquisitionConfig, Criterion, EvaluationSet, al_session, evaluation_set, grid_points, rmse)
from .elbo import TrainConfig, train
from .kernels import KernelFamily
from .mi_total import DEFAULT_SAMPLES, TotalMiScorer
from .model import GpssmModel, Trajectory, init_model
from .systems import SystemSpec, make_system, observe

__all__ = [
    "ExperimentConfig", "AggregateResult", "TrialOutcome", "ExperimentResult", "parse_config",
    "run_experiment", "rmse", "emit_csv", "read_csv", "emit_steps_csv", "emit_mi_landscape",
    "write_csv", "landscape_session",
    "SYSTEM_DEFAULTS",
]

# kernel family, signal variance, lengthscale, epochs
SYSTEM_DEFAULTS = {
    "kink": (KernelFamily.SE, 1.0, 1.0, 100),
    "pendulum": (KernelFamily.MATERN32, 0.3, 5.0, 200),
    "cartpole": (KernelFamily.MATERN32, 1.0, 1.0, 200),
    "tras": (KernelFamily.SE, 1.0, 1.0, 500),
}


@dataclass(frozen=True)
class ExperimentConfig:
    system: str
    criteria: tuple = ("random", "latmi", "totmi")
    trials: int = 10
    T: int = 5
    N: int = 30
    kernel: KernelFamily | None = None
    sigma2: float | None = None
    lengthscale: float | None = None
    epochs: int | None = None
    master_seed: int = 0
    learning_rate: float = 0.01
    samples: int = 10
    mi_samples: int = DEFAULT_SAMPLES
    num_inducing: int = 20
    q_init: float = 0.01
    x0_std: float = 0.1
    workers: int = 1

    def __post_init__(self):
        name = self.system.strip().lower().replace("-", "").replace("_", "")
        if name not in SYSTEM_DEFAULTS:
            raise ValueError(f"no kernel settings for system {self.system!r}")
        fam, s2, ls, ep = SYSTEM_DEFAULTS[name]
        object.__setattr__(self, "system", name)
        object.__setattr__(self, "kernel", KernelFamily.parse(self.kernel or fam))
        object.__setattr__(self, "sigma2", float(s2 if self.sigma2 is None else self.sigma2))
        object.__setattr__(self, "lengthscale", float(ls if self.lengthscale is None else self.lengthscale))
        object.__setattr__(self, "epochs", int(ep if self.epochs is None else self.epochs))
        crit = self.criteria
        if isinstance(crit, str):
            crit = [c for c in crit.split(",") if c.strip()]
        object.__setattr__(self, "criteria", tuple(Criterion.parse(c) for c in crit))
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.T < 1 or self.N < 0:
            raise ValueError("need T >= 1 initial points and N >= 0 steps")
        if not self.criteria:
            raise ValueError("need at least one criterion")

    def train_config(self, seed) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                           samples=self.samples, seed=seed)


_INT_FIELDS = {"trials", "T", "N", "epochs", "master_seed", "samples", "mi_samples",
               "num_inducing", "workers"}
_FLOAT_FIELDS = {"sigma2", "lengthscale", "learning_rate", "q_init", "x0_std"}
_ALIASES = {"seed": "master_seed", "steps": "N", "initial_points": "T", "criterion": "criteria"}


def parse_config(text: str) -> ExperimentConfig:
    """Build a config from ``key = value`` lines; ``#`` starts a comment."""
    names = {f.name for f in fields(ExperimentConfig)}
    kv = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {n}: expected key = value, got {line!r}")
        key = _ALIASES.get(key.strip(), key.strip())
        if key not in names:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        value = value.strip()
        if key in _INT_FIELDS:
            kv[key] = int(value)
        elif key in _FLOAT_FIELDS:
            kv[key] = float(value)
        else:
            kv[key] = value
    if "system" not in kv:
        raise ValueError("config must name a system")
    return ExperimentConfig(**kv)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


def build_model(cfg: ExperimentConfig, system: SystemSpec, seed) -> GpssmModel:
    lo = np.concatenate([system.state_lower, system.box.lower])
    hi = np.concatenate([system.state_upper, system.box.upper])
    return init_model(
        system.d_x, system.d_c, cfg.kernel, cfg.sigma2, cfg.lengthscale,
        C=system.C, d=np.zeros(system.d_y), q_diag=cfg.q_init,
        r_diag=system.obs_noise_std**2, x0_mean=system.x0,
        x0_cov=cfg.x0_std**2 * np.eye(system.d_x),
        num_inducing=cfg.num_inducing, bounds=(lo, hi), seed=seed,
    )


def initial_data(system: SystemSpec, T: int, rng) -> Trajectory:
    """``T`` observations from the rest state under uniform random controls."""
    xs = [system.x0.copy()]
    ys, cs = [], []
    for _ in range(T):
        c = system.box.sample(rng)
        xs.append(system.step(xs[-1], c))
        ys.append(observe(system, xs[-1], rng))
        cs.append(c)
    return Trajectory(np.array(ys), np.array(cs), np.array(xs))


@dataclass
class TrialOutcome:
    trial: int
    sessions: dict  # criterion -> SessionResult
    initial_rmse: float
    failed: bool = False
    error: str = ""


def run_trial(cfg: ExperimentConfig, trial: int, seed_seq: np.random.SeedSequence,
              system: SystemSpec, eval_set: EvaluationSet, callback=None) -> TrialOutcome:
    data_seed, model_seed, train_seed, session_seed = seed_seq.spawn(4)
    traj = initial_data(system, cfg.T, np.random.default_rng(data_seed))
    model = build_model(cfg, system, np.random.default_rng(model_seed))
    model, trace = train(model, traj, cfg.train_config(int(train_seed.generate_state(1)[0])))
    s_acq, s_noise = (int(v) for v in session_seed.generate_state(2))
    train_cfg = cfg.train_config(int(train_seed.generate_state(2)[1]))
    sessions = {}
    outcome = TrialOutcome(trial, sessions, evaluation_score(model, eval_set))
    if trace.aborted:
        outcome.failed = True
        outcome.error = "initial training hit a non-finite gradient"
    for crit in cfg.criteria:
        acq = AcquisitionConfig(criterion=crit, mi_samples=cfg.mi_samples, seed=s_acq)
        cb = None if callback is None else (lambda k, m, t, sc, _c=crit: callback(trial, _c, k, m, t, sc))
        res = al_session(system, model, traj, cfg.N, acq, train_cfg, eval_set,
                         noise_seed=s_noise, callback=cb)
        sessions[crit] = res
        if res.failed or len(res.records) != cfg.N:
            outcome.failed = True
            outcome.error = outcome.error or f"{crit.value}: {res.error}"
    return outcome


def evaluation_score(model: GpssmModel, eval_set: EvaluationSet) -> float:
    return eval_set.score(model)


@dataclass
class AggregateResult:
    """Per criterion and step: mean and std of RMSE, and mean acquisition seconds."""

    criteria: tuple
    steps: int
    trials: int
    mean_rmse: dict = field(default_factory=dict)
    std_rmse: dict = field(default_factory=dict)
    mean_seconds: dict = field(default_factory=dict)

    def final_rmse(self, criterion) -> float:
        return float(self.mean_rmse[Criterion.parse(criterion)][-1])

    def __eq__(self, other):
        if not isinstance(other, AggregateResult):
            return NotImplemented
        if (self.criteria, self.steps, self.trials) != (other.criteria, other.steps, other.trials):
            return False
        for name in ("mean_rmse", "std_rmse", "mean_seconds"):
            a, b = getattr(self, name), getattr(other, name)
            if a.keys() != b.keys():
                return False
            if any(not np.array_equal(a[k], b[k], equal_nan=True) for k in a):
                return False
        return True


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    aggregate: AggregateResult
    trials: list

    @property
    def complete(self) -> bool:
        return not any(t.failed for t in self.trials)


def aggregate(cfg: ExperimentConfig, outcomes) -> AggregateResult:
    agg = AggregateResult(tuple(cfg.criteria), cfg.N, len(outcomes))
    for crit in cfg.criteria:
        r = np.full((len(outcomes), cfg.N), np.nan)
        s = np.full((len(outcomes), cfg.N), np.nan)
        for i, o in enumerate(outcomes):
            recs = o.sessions[crit].records
            r[i, : len(recs)] = [rec.rmse for rec in recs]
            s[i, : len(recs)] = [rec.seconds for rec in recs]
        with warnings.catch_warnings():
            # steps no trial reached stay NaN
            warnings.simplefilter("ignore", RuntimeWarning)
            agg.mean_rmse[crit] = np.nanmean(r, axis=0) if cfg.N else np.zeros(0)
            agg.std_rmse[crit] = np.nanstd(r, axis=0) if cfg.N else np.zeros(0)
            agg.mean_seconds[crit] = np.nanmean(s, axis=0) if cfg.N else np.zeros(0)
    return agg


def run_experiment(cfg: ExperimentConfig, callback=None) -> ExperimentResult:
    system = make_system(cfg.system)
    eval_set = evaluation_set(system)
    seeds = np.random.SeedSequence(cfg.master_seed).spawn(cfg.trials)

    def one(i):
        return run_trial(cfg, i, seeds[i], system, eval_set, callback)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(one, range(cfg.trials)))
    else:
        outcomes = [one(i) for i in range(cfg.trials)]
    return ExperimentResult(cfg, aggregate(cfg, outcomes), outcomes)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

AGG_HEADER = ("criterion", "step", "trials", "mean_rmse", "std_rmse")
TIMING_HEADER = ("criterion", "step", "mean_seconds")


def _f(v: float) -> str:
    return repr(float(v))


def write_csv(path, header, rows) -> None:
    """Write one CSV table; IO failures are re-raised with the offending path."""
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write results to {path}: {exc.strerror}") from exc


def emit_csv(result: AggregateResult, path, timing_path=None) -> None:
    """Aggregate RMSE table; wall-clock seconds go to the optional ``timing_path``.

    Keeping timings out of the main table leaves it byte-identical across
    reruns with the same seed.
    """
    write_csv(path, AGG_HEADER, (
        [crit.value, k + 1, result.trials, _f(result.mean_rmse[crit][k]), _f(result.std_rmse[crit][k])]
        for crit in result.criteria for k in range(result.steps)))
    if timing_path is not None:
        write_csv(timing_path, TIMING_HEADER, (
            [crit.value, k + 1, _f(result.mean_seconds[crit][k])]
            for crit in result.criteria for k in range(result.steps)))


def read_csv(path, timing_path=None) -> AggregateResult:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    criteria, seen = [], set()
    for r in rows:
        c = Criterion.parse(r["criterion"])
        if c not in seen:
            seen.add(c)
            criteria.append(c)
    steps = max((int(r["step"]) for r in rows), default=0)
    trials = int(rows[0]["trials"]) if rows else 0
    agg = AggregateResult(tuple(criteria), steps, trials)
    for c in criteria:
        sel = sorted((r for r in rows if Criterion.parse(r["criterion"]) is c), key=lambda r: int(r["step"]))
        agg.mean_rmse[c] = np.array([float(r["mean_rmse"]) for r in sel])
        agg.std_rmse[c] = np.array([float(r["std_rmse"]) for r in sel])
        agg.mean_seconds[c] = np.full(len(sel), np.nan)
    if timing_path is not None:
        with open(timing_path, newline="") as fh:
            for r in csv.DictReader(fh):
                c = Criterion.parse(r["criterion"])
                agg.mean_seconds[c][int(r["step"]) - 1] = float(r["mean_seconds"])
    return agg


def emit_steps_csv(result: ExperimentResult, path, timing_path=None) -> None:
    """Every step of every trial; seconds again live in a separate file."""
    d_c = make_system(result.config.system).d_c
    head = ["trial", "criterion", "step"] + [f"control_{i}" for i in range(d_c)] + [
        "criterion_value", "rmse", "elbo", "reverted"]
    rows = []
    for o in result.trials:
        for crit, sess in o.sessions.items():
            rows.append([o.trial, crit.value, 0] + [""] * d_c + ["", _f(o.initial_rmse), "", ""])
            for rec in sess.records:
                rows.append([o.trial, crit.value, rec.step] + [_f(v) for v in rec.control]
                            + [_f(rec.criterion_value), _f(rec.rmse), _f(rec.elbo), int(rec.reverted)])
    write_csv(path, head, rows)
    if timing_path is not None:
        write_csv(timing_path, ["trial", "criterion", "step", "seconds"], (
            [o.trial, crit.value, rec.step, _f(rec.seconds)]
            for o in result.trials for crit, sess in o.sessions.items() for rec in sess.records))


def mi_landscape(model: GpssmModel, traj: Trajectory, grid, S: int = DEFAULT_SAMPLES, seed=0) -> np.ndarray:
    return TotalMiScorer(model, traj, S, seed).batch(grid)


def emit_mi_landscape(model: GpssmModel, traj: Trajectory, grid, path, S: int = DEFAULT_SAMPLES,
                      seed=0, snapshots=None) -> None:
    """Write ``n_points, control..., totmi`` rows.

    ``snapshots`` is an optional list of ``(n_points, values)`` pairs taken
    during a session; when absent the landscape of ``model`` on ``traj`` is
    computed directly.
    """
    grid = np.asarray(grid, dtype=np.float64).reshape(len(grid), -1)
    if snapshots is None:
        snapshots = [(traj.T, mi_landscape(model, traj, grid, S, seed))]
    write_csv(path, ["n_points"] + [f"control_{i}" for i in range(grid.shape[1])] + ["totmi"],
              ([n] + [_f(x) for x in g] + [_f(v)] for n, vals in snapshots for g, v in zip(grid, vals)))


def landscape_session(system_name: str = "kink", snapshot_points=(9, 18, 27, 36), seed=0,
                      points_per_dim: int = 50, trial_cfg: ExperimentConfig | None = None):
    """Run one totMI session and record the score over the grid at the given data sizes.

    The values are the exact scores the acquisition step maximised.
    """
    cfg = trial_cfg or ExperimentConfig(system_name, criteria=("totmi",), trials=1,
                                        N=max(snapshot_points) - 5 + 1, master_seed=seed)
    cfg = replace(cfg, criteria=(Criterion.TOTMI,), trials=1,
                  N=max(cfg.N, max(snapshot_points) - cfg.T + 1))
    system = make_system(cfg.system)
    grid = grid_points(system.box, points_per_dim)
    wanted = set(snapshot_points)
    snaps = []

    def cb(trial, crit, k, model, traj, scorer):
        if traj.T in wanted and scorer is not None:
            snaps.append((traj.T, np.asarray(scorer.batch(grid))))

    result = run_experiment(cfg, callback=cb)
    return grid, snaps, result
