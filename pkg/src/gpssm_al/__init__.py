"""Active learning of Gaussian-process state-space models."""
from .acquisition import (AcquisitionConfig, Criterion, Grid, MultiStartLocal, SessionResult,
                          StepRecord, al_session, optimize_control)
from .elbo import ElboEstimate, TrainConfig, TrainTrace, elbo, train
from .kernels import KernelFamily, KernelSpec
from .mi_latest import MomentBelief, latest_mi, latest_mi_score
from .mi_total import TotalMiEstimate, TotalMiScorer, total_mi
from .model import GpssmModel, InducingSet, Trajectory, VariationalChain, init_model
from .numerics import GaussianDist
from .systems import SystemSpec, make_system

__version__ = "0.1.0"

__all__ = [
    "AcquisitionConfig", "Criterion", "Grid", "MultiStartLocal", "SessionResult", "StepRecord",
    "al_session", "optimize_control", "ElboEstimate", "TrainConfig", "TrainTrace", "elbo", "train",
    "KernelFamily", "KernelSpec", "MomentBelief", "latest_mi", "latest_mi_score",
    "TotalMiEstimate", "TotalMiScorer", "total_mi", "GpssmModel", "InducingSet", "Trajectory",
    "VariationalChain", "init_model", "GaussianDist", "SystemSpec", "make_system",
]
