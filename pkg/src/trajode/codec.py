"""Two-stage frame-group encoder/decoder and its variational variant.

The spatial stage maps every frame of a group to a short code with shared
weights; the temporal stage compresses the stacked ``T x s`` codes into one
latent vector. The decoder mirrors this.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigurationError, DimensionError

LOGVAR_BOUNDS = (-10.0, 10.0)


@dataclass(frozen=True)
class CodecConfig:
    height: int = 16
    width: int = 16
    group_length: int = 20
    spatial_dim: int = 8
    latent_dim: int = 16
    spatial_hidden: int = 64
    temporal_hidden: int = 64
    variational: bool = False
    nonlinearity: str = "tanh"

    def __post_init__(self):
        for name in ("height", "width", "group_length", "spatial_dim", "latent_dim",
                     "spatial_hidden", "temporal_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.latent_dim > self.group_length * self.spatial_dim:
            raise ConfigurationError("latent_dim may not exceed group_length * spatial_dim")
        if self.nonlinearity not in ("tanh", "relu"):
            raise ConfigurationError(f"unknown nonlinearity {self.nonlinearity!r}")

    @classmethod
    def full_scale(cls, variational=False):
        """Sizes used for 192x192 inputs. Recorded for reference; not trained here."""
        return cls(height=192, width=192, group_length=100, spatial_dim=256, latent_dim=64,
                   spatial_hidden=1024, temporal_hidden=1024, variational=variational)

    @property
    def pixels(self):
        return self.height * self.width

    def to_dict(self):
        return asdict(self)


def _layer(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=fan_out)
    return W, b


def _add_layer(params, rng, name, fan_in, fan_out):
    params[f"{name}.W"], params[f"{name}.b"] = _layer(rng, fan_in, fan_out)


def init_spatial_params(cfg: CodecConfig, rng) -> dict[str, np.ndarray]:
    rng = ad.make_rng(rng)
    p = {}
    _add_layer(p, rng, "enc.s0", cfg.pixels, cfg.spatial_hidden)
    _add_layer(p, rng, "enc.s1", cfg.spatial_hidden, cfg.spatial_dim)
    _add_layer(p, rng, "dec.s0", cfg.spatial_dim, cfg.spatial_hidden)
    _add_layer(p, rng, "dec.s1", cfg.spatial_hidden, cfg.pixels)
    return p


def init_codec_params(cfg: CodecConfig, rng) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization of every layer."""
    rng = ad.make_rng(rng)
    p = init_spatial_params(cfg, rng)
    ts = cfg.group_length * cfg.spatial_dim
    _add_layer(p, rng, "enc.t0", ts, cfg.temporal_hidden)
    if cfg.variational:
        _add_layer(p, rng, "enc.mu", cfg.temporal_hidden, cfg.latent_dim)
        _add_layer(p, rng, "enc.logvar", cfg.temporal_hidden, cfg.latent_dim)
    else:
        _add_layer(p, rng, "enc.t1", cfg.temporal_hidden, cfg.latent_dim)
    _add_layer(p, rng, "dec.t0", cfg.latent_dim, cfg.temporal_hidden)
    _add_layer(p, rng, "dec.t1", cfg.temporal_hidden, ts)
    return p


def _dense(x, params, name):
    return ad.affine(x, params[f"{name}.W"], params[f"{name}.b"])


def encode_frames(frames, params, cfg: CodecConfig) -> Var:
    """Spatial stage: (..., H, W) frames -> (N, s) codes, one row per frame."""
    flat = ad.reshape(frames, (-1, cfg.pixels))
    h = ad.nonlinearity(_dense(flat, params, "enc.s0"), cfg.nonlinearity)
    return _dense(h, params, "enc.s1")


def decode_frames(codes, params, cfg: CodecConfig) -> Var:
    """Inverse spatial stage: (N, s) codes -> (N, H, W) frames."""
    h = ad.nonlinearity(_dense(codes, params, "dec.s0"), cfg.nonlinearity)
    out = _dense(h, params, "dec.s1")
    return ad.reshape(out, (-1, cfg.height, cfg.width))


def _check_group(frames, cfg):
    shape = ad.value_of(frames).shape
    expect = (cfg.group_length, cfg.height, cfg.width)
    if shape[-3:] != expect or len(shape) not in (3, 4):
        raise DimensionError(f"frame group has shape {shape}, expected (B?, {expect})")
    return len(shape) == 3


def _temporal_trunk(frames, params, cfg):
    single = _check_group(frames, cfg)
    codes = encode_frames(frames, params, cfg)
    stacked = ad.reshape(codes, (-1, cfg.group_length * cfg.spatial_dim))
    return ad.nonlinearity(_dense(stacked, params, "enc.t0"), cfg.nonlinearity), single


def encode_group(frames, params, cfg: CodecConfig) -> Var:
    """Encode a (T, H, W) group to z of shape (d,), or a (B, T, H, W) batch to (B, d)."""
    if cfg.variational:
        mu, _ = encode_variational(frames, params, cfg)
        return mu
    h, single = _temporal_trunk(frames, params, cfg)
    z = _dense(h, params, "enc.t1")
    return ad.reshape(z, (cfg.latent_dim,)) if single else z


def encode_variational(frames, params, cfg: CodecConfig) -> tuple[Var, Var]:
    """Return ``(mu, logvar)``; logvar is clamped to ``LOGVAR_BOUNDS``."""
    if not cfg.variational:
        raise ConfigurationError("encode_variational requires a variational codec")
    h, single = _temporal_trunk(frames, params, cfg)
    mu = _dense(h, params, "enc.mu")
    logvar = ad.clip(_dense(h, params, "enc.logvar"), *LOGVAR_BOUNDS)
    if single:
        mu = ad.reshape(mu, (cfg.latent_dim,))
        logvar = ad.reshape(logvar, (cfg.latent_dim,))
    return mu, logvar


def decode_group(z, params, cfg: CodecConfig) -> Var:
    """Decode z of shape (d,) to (T, H, W), or (B, d) to (B, T, H, W)."""
    zv = ad.value_of(z)
    if zv.shape[-1] != cfg.latent_dim or zv.ndim not in (1, 2):
        raise DimensionError(f"latent code has shape {zv.shape}, expected (B?, {cfg.latent_dim})")
    single = zv.ndim == 1
    zb = ad.reshape(z, (-1, cfg.latent_dim))
    h = ad.nonlinearity(_dense(zb, params, "dec.t0"), cfg.nonlinearity)
    codes = ad.reshape(_dense(h, params, "dec.t1"), (-1, cfg.spatial_dim))
    frames = decode_frames(codes, params, cfg)
    shape = (cfg.group_length, cfg.height, cfg.width)
    return ad.reshape(frames, shape if single else (-1,) + shape)


def reparametrize(mu, logvar, rng) -> Var:
    """``mu + exp(logvar / 2) * eps`` with ``eps ~ N(0, I)`` drawn from ``rng``."""
    rng = ad.make_rng(rng)
    noise = rng.standard_normal(ad.value_of(mu).shape)
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), noise))


def kl_to_standard_normal(mu, logvar) -> Var:
    """Closed-form KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over all entries."""
    terms = ad.sub(ad.add(ad.exp(logvar), ad.square(mu)), ad.add(logvar, 1.0))
    return ad.mul(ad.sum(terms), 0.5)
