"""Estimator wrapper around the codec, temporal backbone and trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import __version__
from . import autodiff as ad
from .checkpoint import read_checkpoint, write_checkpoint
from .codec import CodecConfig, decode_frames, decode_group, encode_frames, encode_variational, reparametrize
from .data import TrajectoryBundle
from .dynamics import OdeConfig, SolverConfig, pure_frame_rollout
from .errors import ConfigurationError, DataError
from .metrics import batch_spatial_correlation
from .training import (ModelSpec, TrainConfig, group_trajectory, latent_codes, latent_rollout,
                       predict_groups, train)
from .validation import check_trajectories

# estimator parameter <-> checkpoint config key
_CONFIG_KEYS = {
    "backbone": "backbone",
    "solver": "solver.method",
    "solver_steps": "solver.steps",
    "augment_dim": "ode.augment",
    "augment_mode": "ode.augment_mode",
}


class LatentTrajectoryModel(BaseEstimator):
    """Grouped-frame latent dynamics model.

    ``fit`` takes subjects as raw sequences (S, L, H, W), pre-grouped frames
    (S, G, T, H, W) or a :class:`~trajode.data.TrajectoryBundle` (its train
    split is used). Group 0 of each subject is encoded and rolled forward by
    the backbone; ``predict`` returns the decoded (S, G, T, H, W) trajectory.

    Parameters
    ----------
    backbone : {"ode", "latent-rnn", "pure-rnn"}
    objective : {"forward", "bidirectional"}
    variational : bool
        Encode to a Gaussian and train with the KL term.
    learning_rate, beta1, beta2 : float
        Adam settings (defaults 1e-4, 0.9, 0.99).
    """

    def __init__(self, backbone="ode", objective="forward", variational=False,
                 num_groups=4, group_length=20, downsample=1,
                 spatial_dim=8, latent_dim=16, spatial_hidden=64, temporal_hidden=64,
                 augment_dim=None, ode_hidden=None, augment_mode="evolving",
                 solver="rk4", solver_steps=10, nonlinearity="tanh",
                 epochs=100, phase1_epochs=None, batch_size=8, learning_rate=1e-4,
                 beta1=0.9, beta2=0.99, kl_weight=1.0, clip_norm=None, random_state=0):
        self.backbone = backbone
        self.objective = objective
        self.variational = variational
        self.num_groups = num_groups
        self.group_length = group_length
        self.downsample = downsample
        self.spatial_dim = spatial_dim
        self.latent_dim = latent_dim
        self.spatial_hidden = spatial_hidden
        self.temporal_hidden = temporal_hidden
        self.augment_dim = augment_dim
        self.ode_hidden = ode_hidden
        self.augment_mode = augment_mode
        self.solver = solver
        self.solver_steps = solver_steps
        self.nonlinearity = nonlinearity
        self.epochs = epochs
        self.phase1_epochs = phase1_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.kl_weight = kl_weight
        self.clip_norm = clip_norm
        self.random_state = random_state

    # -- configuration ----------------------------------------------------------

    def _model_spec(self, height, width) -> ModelSpec:
        codec = CodecConfig(height, width, self.group_length, self.spatial_dim, self.latent_dim,
                            self.spatial_hidden, self.temporal_hidden, bool(self.variational),
                            self.nonlinearity)
        ode = OdeConfig(self.latent_dim, self.augment_dim, self.ode_hidden, self.nonlinearity)
        solver = SolverConfig(int(self.solver_steps), self.solver, self.augment_mode)
        return ModelSpec(codec, ode, solver, self.backbone, self.num_groups)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.objective, int(self.epochs), self.phase1_epochs,
                           int(self.batch_size), float(self.learning_rate), self.beta1,
                           self.beta2, int(self.random_state), float(self.kl_weight),
                           self.clip_norm)

    def _grouped(self, X) -> np.ndarray:
        if isinstance(X, TrajectoryBundle):
            X = X.frames
        X = check_trajectories(X)
        G, T = self.num_groups, self.group_length
        if X.ndim == 5:
            if X.shape[1:3] != (G, T):
                raise DataError(f"grouped frames are {X.shape[1:3]}, model expects {(G, T)}")
            return X
        return np.stack([group_trajectory(s, self.downsample, G, T).groups for s in X])

    # -- fitting ----------------------------------------------------------------

    def fit(self, X, y=None):
        if isinstance(X, TrajectoryBundle):
            X = X.subset(X.indices("train"))
            if X.num_subjects == 0:
                raise DataError("bundle has no training subjects")
        groups = self._grouped(X)
        self.spec_ = self._model_spec(*groups.shape[-2:])
        result = train(groups, self.spec_, self._train_config())
        self.params_ = result.params
        self.phase1_params_ = result.phase1_params
        self.history_ = result.history
        self.n_features_in_ = int(np.prod(groups.shape[-2:]))
        return self

    def _check(self, X):
        check_is_fitted(self, "params_")
        g = self._grouped(X)
        c = self.spec_.codec
        if g.shape[-2:] != (c.height, c.width):
            raise DataError(f"frames are {g.shape[-2:]}, model expects {(c.height, c.width)}")
        return g

    def transform(self, X) -> np.ndarray:
        """Encoded z0 of each subject, (S, d). Variational models return the mean."""
        g = self._check(X)
        if self.backbone == "pure-rnn":
            raise ConfigurationError("pure-rnn model has no group latent code")
        return latent_codes(g[:, 0], self.params_, self.spec_)[0].value

    def encode_groups(self, groups) -> np.ndarray:
        """Encode each (T, H, W) group of an (N, T, H, W) stack independently, (N, d)."""
        check_is_fitted(self, "params_")
        if self.backbone == "pure-rnn":
            raise ConfigurationError("pure-rnn model has no group latent code")
        g = check_trajectories(groups)
        c = self.spec_.codec
        if g.ndim != 4 or g.shape[1:] != (c.group_length, c.height, c.width):
            raise DataError(f"expected groups of shape (N, {c.group_length}, {c.height}, {c.width})")
        return latent_codes(g, self.params_, self.spec_)[0].value

    def rollout_codes(self, X) -> np.ndarray:
        """Core latent codes for every group, (S, G, d)."""
        g = self._check(X)
        if self.backbone == "pure-rnn":
            raise ConfigurationError("pure-rnn model has no group latent code")
        z0 = latent_codes(g[:, 0], self.params_, self.spec_)[0]
        d = self.latent_dim
        states = latent_rollout(z0, self.params_, self.spec_)
        return np.stack([s.value[:, :d] for s in states], axis=1)

    def predict(self, X, rng=None) -> np.ndarray:
        """Predicted (S, G, T, H, W) trajectory from group 0.

        With a variational model and ``rng`` given, z0 is sampled rather
        than taken at the mean.
        """
        g = self._check(X)
        c = self.spec_.codec
        if self.backbone == "pure-rnn":
            S = g.shape[0]
            recon = decode_frames(encode_frames(g[:, 0], self.params_, c), self.params_, c).value
            future = pure_frame_rollout(g[:, 0, -1], (self.num_groups - 1) * c.group_length,
                                        self.params_, c)
            frames = np.concatenate([recon.reshape(S, -1, c.height, c.width), future], axis=1)
            return frames.reshape(g.shape)
        pred, _ = predict_groups(g[:, 0], self.params_, self.spec_,
                                 ad.make_rng(rng) if rng is not None else None)
        return np.moveaxis(pred.value, 0, 1)

    def sample_predictions(self, X, n_samples: int, rng) -> np.ndarray:
        """``n_samples`` predictions with fresh reparametrization draws, (N, S, G, T, H, W)."""
        if not self.variational:
            raise ConfigurationError("sampling requires a variational model")
        rngs = ad.split_rng(ad.make_rng(rng), n_samples)
        return np.stack([self.predict(X, r) for r in rngs])

    def decode(self, z) -> np.ndarray:
        check_is_fitted(self, "params_")
        return decode_group(np.asarray(z, dtype=np.float64), self.params_, self.spec_.codec).value

    def latent_distribution(self, X):
        g = self._check(X)
        mu, logvar = encode_variational(g[:, 0], self.params_, self.spec_.codec)
        return mu.value, logvar.value

    def frame_correlations(self, X) -> np.ndarray:
        """Per-frame spatial correlation of the prediction against truth, (S, G, T)."""
        g = self._check(X)
        return batch_spatial_correlation(self.predict(g), g)

    def score(self, X, y=None) -> float:
        """Mean spatial correlation over predicted groups 1..G-1."""
        r = self.frame_correlations(X)[:, 1:]
        return float(np.nanmean(r))

    # -- persistence ------------------------------------------------------------

    def checkpoint_config(self) -> dict:
        check_is_fitted(self, "params_")
        cfg = {}
        for key, val in self.get_params().items():
            cfg[_CONFIG_KEYS.get(key, key)] = val
        cfg["frame.height"] = self.spec_.codec.height
        cfg["frame.width"] = self.spec_.codec.width
        cfg["tool.version"] = __version__
        return cfg

    def save(self, path, extra_params=None):
        params = dict(self.params_)
        if extra_params:
            params.update(extra_params)
        write_checkpoint(path, params, self.checkpoint_config())

    @classmethod
    def load(cls, path) -> "LatentTrajectoryModel":
        params, cfg = read_checkpoint(path)
        reverse = {v: k for k, v in _CONFIG_KEYS.items()}
        names = cls._get_param_names()
        kwargs = {reverse.get(k, k): v for k, v in cfg.items() if reverse.get(k, k) in names}
        model = cls(**kwargs)
        model.spec_ = model._model_spec(int(cfg["frame.height"]), int(cfg["frame.width"]))
        model.params_ = {k: v for k, v in params.items() if not k.startswith(("gmm.", "head."))}
        model.extra_params_ = {k: v for k, v in params.items() if k.startswith(("gmm.", "head."))}
        model.history_ = []
        model.n_features_in_ = model.spec_.codec.pixels
        return model

