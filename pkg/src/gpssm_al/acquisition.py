"""Closed-loop exploration: pick a control, query the system, retrain.

Each step maximises the chosen criterion over the control box, applies the
control to the true system, appends the noisy observation and warm-starts
the ELBO optimiser from the previous parameters.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from .elbo import TrainConfig, elbo, padded_length, train
from .mi_latest import DEFAULT_NODES, latest_mi_score
from .mi_total import DEFAULT_SAMPLES, TotalMiScorer
from .model import GpssmModel, Trajectory, predict_mean_observation
from .systems import ControlBox, SystemSpec, observe

RETRAIN_FRACTION = 4  # warm-start epochs = initial epochs // RETRAIN_FRACTION
GUARD_TOLERANCE = 0.05


class NonFiniteScore(FloatingPointError):
    pass


class LengthMismatch(ValueError):
    pass


class Criterion(str, Enum):
    RANDOM = "random"
    LATMI = "latmi"
    TOTMI = "totmi"

    @classmethod
    def parse(cls, name) -> "Criterion":
        if isinstance(name, Criterion):
            return name
        try:
            return cls(name.strip().lower().replace("_", "").replace("-", ""))
        except ValueError:
            raise ValueError(f"unknown criterion {name!r}") from None


@dataclass(frozen=True)
class Grid:
    points_per_dim: int = 50

    def __post_init__(self):
        if self.points_per_dim < 2:
            raise ValueError("a grid needs at least two points per dimension")


@dataclass(frozen=True)
class MultiStartLocal:
    starts: int = 8
    iters: int = 60

    def __post_init__(self):
        if self.starts < 1 or self.iters < 1:
            raise ValueError("need at least one start and one iteration")


@dataclass(frozen=True)
class AcquisitionConfig:
    criterion: Criterion = Criterion.TOTMI
    optimizer: Grid | MultiStartLocal | None = None
    mi_samples: int = DEFAULT_SAMPLES
    seed: int = 0
    nodes: int = DEFAULT_NODES

    def __post_init__(self):
        object.__setattr__(self, "criterion", Criterion.parse(self.criterion))
        if self.mi_samples < 1:
            raise ValueError("mi_samples must be at least 1")

    def optimizer_for(self, d_c: int):
        if self.optimizer is not None:
            return self.optimizer
        return Grid() if d_c == 1 else MultiStartLocal()


# ---------------------------------------------------------------------------
# Control optimisation
# ---------------------------------------------------------------------------


def grid_points(box: ControlBox, points_per_dim: int) -> np.ndarray:
    """Lattice in lexicographic order (last dimension varies fastest)."""
    axes = [np.linspace(lo, hi, points_per_dim) for lo, hi in zip(box.lower, box.upper)]
    return np.array(list(itertools.product(*axes)))


def _score_many(score, points: np.ndarray) -> np.ndarray:
    if hasattr(score, "batch"):
        vals = np.asarray(score.batch(points), dtype=np.float64)
    else:
        vals = np.array([float(score(p)) for p in points])
    if not np.all(np.isfinite(vals)):
        bad = points[~np.isfinite(vals)][0]
        raise NonFiniteScore(f"criterion is not finite at control {bad}")
    return vals


def optimize_control(score, box: ControlBox, optimizer=None, seed=0):
    """Maximise ``score`` over the box; returns ``(c*, value)``.

    Grid ties go to the lowest lattice index. Local search runs bounded
    Nelder-Mead from seeded uniform starts and keeps the best endpoint.
    """
    optimizer = Grid() if optimizer is None else optimizer
    if isinstance(optimizer, Grid):
        pts = grid_points(box, optimizer.points_per_dim)
        vals = _score_many(score, pts)
        i = int(np.argmax(vals))
        return pts[i].copy(), float(vals[i])

    rng = np.random.default_rng(seed)
    width = box.upper - box.lower
    bounds = list(zip(box.lower, box.upper))
    best_c, best_v = None, -np.inf

    def neg(c):
        v = float(score(box.clip(c)))
        if not np.isfinite(v):
            raise NonFiniteScore(f"criterion is not finite at control {c}")
        return -v

    for _ in range(optimizer.starts):
        x0 = box.sample(rng)
        simplex = np.vstack([x0] + [x0 + 0.1 * width * np.eye(box.dim)[k] * (1 if x0[k] < (box.lower[k] + box.upper[k]) / 2 else -1)
                                    for k in range(box.dim)])
        res = minimize(neg, x0, method="Nelder-Mead", bounds=bounds,
                       options={"maxiter": optimizer.iters, "initial_simplex": simplex,
                                "xatol": 1e-6, "fatol": 1e-10})
        c = box.clip(res.x)
        v = -neg(c)
        if v > best_v:
            best_c, best_v = c, v
    return best_c, float(best_v)


# ---------------------------------------------------------------------------
# Evaluation protocol
# ---------------------------------------------------------------------------


def rmse(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if len(pred) == 0 or len(truth) == 0:
        raise LengthMismatch("need at least one pair")
    pred = pred.reshape(len(pred), -1)
    truth = truth.reshape(len(truth), -1)
    if pred.shape != truth.shape:
        raise LengthMismatch(f"prediction shape {pred.shape} differs from truth {truth.shape}")
    return float(np.sqrt(np.mean(np.sum((pred - truth) ** 2, axis=1) / pred.shape[1])))


@dataclass(frozen=True)
class EvaluationSet:
    inputs: np.ndarray  # (n, d_x + d_c)
    targets: np.ndarray  # (n, d_y) noiseless next observation

    def score(self, model: GpssmModel) -> float:
        return rmse(predict_mean_observation(model, self.inputs), self.targets)


def evaluation_set(system: SystemSpec) -> EvaluationSet:
    """Lattice over the state bounds and control box with true next observations."""
    counts = system.lattice_points
    lo = np.concatenate([system.state_lower, system.box.lower])
    hi = np.concatenate([system.state_upper, system.box.upper])
    axes = [np.linspace(a, b, n) for a, b, n in zip(lo, hi, counts)]
    X = np.array(list(itertools.product(*axes)))
    targets = np.array([system.C @ system.step(row[: system.d_x], row[system.d_x:]) for row in X])
    return EvaluationSet(X, targets)


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    step: int
    control: np.ndarray
    criterion_value: float
    rmse: float
    seconds: float
    elbo: float
    reverted: bool = False


@dataclass
class SessionResult:
    criterion: Criterion
    seed: int
    config: dict
    records: list = field(default_factory=list)
    initial_rmse: float = float("nan")
    model: GpssmModel | None = None
    trajectory: Trajectory | None = None
    failed: bool = False
    error: str = ""

    @property
    def controls(self) -> np.ndarray:
        return np.array([r.control for r in self.records])

    @property
    def rmse(self) -> np.ndarray:
        return np.array([r.rmse for r in self.records])


def make_scorer(model: GpssmModel, traj: Trajectory, cfg: AcquisitionConfig, seed):
    if cfg.criterion is Criterion.TOTMI:
        return TotalMiScorer(model, traj, cfg.mi_samples, seed)
    if cfg.criterion is Criterion.LATMI:
        return lambda c: latest_mi_score(model, traj, c, cfg.nodes)
    raise ValueError("the random criterion has no score")


def warm_up(model: GpssmModel, box: ControlBox, cfg: AcquisitionConfig, T_values) -> None:
    """Compile the totMI kernel for every padded length a session will use."""
    if cfg.criterion is not Criterion.TOTMI:
        return
    opt = cfg.optimizer_for(box.dim)
    lengths = sorted({padded_length(T + 1) for T in T_values})
    for P in lengths:
        T = P - 1
        dummy = Trajectory(np.zeros((T, model.d_y)), np.zeros((T, model.d_c)))
        scorer = TotalMiScorer(model, dummy, cfg.mi_samples, 0)
        if isinstance(opt, Grid):
            scorer.batch(grid_points(box, opt.points_per_dim))
        else:
            scorer(box.lower)


def _reference_elbo(model, traj, train_cfg):
    return elbo(model, None, traj, S=train_cfg.samples, seed=train_cfg.seed).value


def al_session(system: SystemSpec, model: GpssmModel, init_traj: Trajectory, N: int,
               acq_cfg: AcquisitionConfig, train_cfg: TrainConfig,
               eval_set: EvaluationSet | None = None, noise_seed=0, callback=None) -> SessionResult:
    """Run ``N`` exploration steps starting from an already trained ``model``.

    ``init_traj`` must carry the true states so the simulator can continue
    from the last one. ``seconds`` in each record is the wall time spent
    selecting the control. ``callback(k, model, traj, scorer)`` is invoked
    right after the control for step ``k`` has been chosen.
    """
    if init_traj.x is None:
        raise ValueError("the initial trajectory must include the true states")
    eval_set = evaluation_set(system) if eval_set is None else eval_set
    seeds = np.random.SeedSequence([acq_cfg.seed, noise_seed])
    acq_seed, obs_seed, retrain_seed = seeds.spawn(3)
    acq_rng = np.random.default_rng(acq_seed)
    obs_rng = np.random.default_rng(obs_seed)
    retrain_seeds = retrain_seed.generate_state(max(N, 1))
    retrain_epochs = max(1, train_cfg.epochs // RETRAIN_FRACTION)
    optimizer = acq_cfg.optimizer_for(system.d_c)
    result = SessionResult(
        criterion=acq_cfg.criterion, seed=acq_cfg.seed,
        config={"acquisition": _snapshot(acq_cfg), "train": _snapshot(train_cfg), "system": system.name},
        initial_rmse=eval_set.score(model), model=model, trajectory=init_traj,
    )
    if N <= 0:
        return result
    warm_up(model, system.box, acq_cfg, range(init_traj.T, init_traj.T + N))

    traj = init_traj
    for k in range(1, N + 1):
        try:
            t0 = time.perf_counter()
            scorer = None
            if acq_cfg.criterion is Criterion.RANDOM:
                c, value = system.box.sample(acq_rng), float("nan")
            else:
                scorer = make_scorer(model, traj, acq_cfg, int(acq_rng.integers(2**31)))
                c, value = optimize_control(scorer, system.box, optimizer,
                                            seed=int(acq_rng.integers(2**31)))
            seconds = time.perf_counter() - t0
            if callback is not None:
                callback(k, model, traj, scorer)

            x_next = system.step(traj.x[-1], c)
            y_next = observe(system, x_next, obs_rng)
            new_traj = traj.append(y_next, c, x_next)

            step_cfg = TrainConfig(epochs=retrain_epochs, learning_rate=train_cfg.learning_rate,
                                   samples=train_cfg.samples, seed=int(retrain_seeds[k - 1]),
                                   trainable=train_cfg.trainable)
            candidate, trace = train(model, new_traj, step_cfg)
            before = _reference_elbo(model, traj, train_cfg)
            after = _reference_elbo(candidate, traj, train_cfg)
            reverted = trace.aborted or not np.isfinite(after) or after < before - GUARD_TOLERANCE * abs(before)
            if not reverted:
                model = candidate
            traj = new_traj
            result.records.append(StepRecord(
                step=k, control=np.asarray(c, dtype=np.float64), criterion_value=float(value),
                rmse=eval_set.score(model), seconds=seconds,
                elbo=_reference_elbo(model, traj, train_cfg), reverted=bool(reverted),
            ))
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            result.failed = True
            result.error = f"step {k}: {type(exc).__name__}: {exc}"
            break
    result.model = model
    result.trajectory = traj
    return result


def _snapshot(cfg) -> dict:
    out = {}
    for k, v in asdict(cfg).items():
        if isinstance(v, Enum):
            v = v.value
        elif isinstance(v, dict):
            v = {kk: vv for kk, vv in v.items()}
        out[k] = v
    return out
