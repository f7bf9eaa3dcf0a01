"""Latent ODE modelling of grouped image trajectories."""

__version__ = "0.1.0"

from .data import SynthSpec, TrajectoryBundle, generate_synthetic, read_bundle, write_bundle  # noqa: E402
from .mixture import GaussianMixture, GaussianMixtureEM, select_k  # noqa: E402
from .model import LatentTrajectoryModel  # noqa: E402
from .traits import TraitRegressor  # noqa: E402

__all__ = [
    "LatentTrajectoryModel", "GaussianMixtureEM", "GaussianMixture", "TraitRegressor",
    "TrajectoryBundle", "SynthSpec", "generate_synthetic", "read_bundle", "write_bundle",
    "select_k", "__version__",
]
