from .base import EnvSpec, EnvStep, Environment
from .density_walk import DensityWalkEnv
from .linear import LinearGaussianEnv
from .traffic import (
    Episode,
    EpisodeStream,
    TrafficConfig,
    TrafficDensityEnv,
    bundled_data_path,
    ground_truth_density,
    ingest_trajectories,
    read_trajectories,
)

__all__ = [
    "DensityWalkEnv",
    "EnvSpec",
    "EnvStep",
    "Environment",
    "Episode",
    "EpisodeStream",
    "LinearGaussianEnv",
    "TrafficConfig",
    "TrafficDensityEnv",
    "bundled_data_path",
    "ground_truth_density",
    "ingest_trajectories",
    "read_trajectories",
]
