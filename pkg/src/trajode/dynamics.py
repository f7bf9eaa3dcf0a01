"""Temporal backbones: augmented ODE vector field, gated latent RNN, per-frame RNN.

All state arrays may carry a leading batch axis. The ODE state has ``d + a``
components: the latent code followed by the augmentation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .codec import CodecConfig, decode_frames, encode_frames
from .errors import ConfigurationError, DimensionError, DivergenceError, NumericError

BACKBONES = ("ode", "latent-rnn", "pure-rnn")


@dataclass(frozen=True)
class SolverConfig:
    steps: int = 10
    method: str = "rk4"
    augment_mode: str = "evolving"

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ConfigurationError("solver steps per unit time must be >= 1")
        if self.method not in ("rk4", "euler"):
            raise ConfigurationError(f"unknown solver method {self.method!r}")
        if self.augment_mode not in ("evolving", "constant-zero"):
            raise ConfigurationError(f"unknown augment mode {self.augment_mode!r}")


@dataclass(frozen=True)
class OdeConfig:
    latent_dim: int = 16
    augment_dim: int | None = None
    hidden: int | None = None
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.augment_dim is None:
            object.__setattr__(self, "augment_dim", self.latent_dim // 4)
        if self.hidden is None:
            object.__setattr__(self, "hidden", 4 * self.latent_dim)
        if self.latent_dim < 1 or self.augment_dim < 0 or self.hidden < 1:
            raise ConfigurationError("invalid ODE dimensions")
        if self.nonlinearity not in ("tanh", "relu"):
            raise ConfigurationError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def state_dim(self):
        return self.latent_dim + self.augment_dim

    def to_dict(self):
        return asdict(self)


def init_ode_params(cfg: OdeConfig, rng) -> dict[str, np.ndarray]:
    rng = ad.make_rng(rng)
    n, h = cfg.state_dim, cfg.hidden
    b1, b2 = 1.0 / np.sqrt(n), 1.0 / np.sqrt(h)
    return {
        "ode.W1": rng.uniform(-b1, b1, (h, n)),
        "ode.b1": rng.uniform(-b1, b1, h),
        "ode.W2": rng.uniform(-b2, b2, (n, h)),
        "ode.b2": rng.uniform(-b2, b2, n),
    }


def augment(z, cfg: OdeConfig) -> Var:
    """Append ``a`` zeros to a core latent code."""
    zv = ad.value_of(z)
    if zv.shape[-1] != cfg.latent_dim:
        raise DimensionError(f"latent code has {zv.shape[-1]} components, expected {cfg.latent_dim}")
    if cfg.augment_dim == 0:
        return ad.Var(zv) if not isinstance(z, Var) else z
    return ad.concat([z, np.zeros(zv.shape[:-1] + (cfg.augment_dim,))], axis=-1)


def ode_rhs(state, params, cfg: OdeConfig, augment_mode: str = "evolving") -> Var:
    """``W2 phi(W1 s + b1) + b2`` on the augmented state ``s``.

    In ``constant-zero`` mode the augmentation is replaced by zeros on input
    and its derivative is discarded, so only the core evolves.
    """
    sv = ad.value_of(state)
    if sv.shape[-1] != cfg.state_dim:
        raise DimensionError(f"state has {sv.shape[-1]} components, expected {cfg.state_dim}")
    d, a = cfg.latent_dim, cfg.augment_dim
    if augment_mode == "constant-zero" and a:
        core = ad.take(state, (..., slice(0, d)))
        state = ad.concat([core, np.zeros(sv.shape[:-1] + (a,))], axis=-1)
    elif augment_mode not in ("evolving", "constant-zero"):
        raise ConfigurationError(f"unknown augment mode {augment_mode!r}")
    h = ad.nonlinearity(ad.affine(state, params["ode.W1"], params["ode.b1"]), cfg.nonlinearity)
    out = ad.affine(h, params["ode.W2"], params["ode.b2"])
    if augment_mode == "constant-zero" and a:
        out = ad.concat([ad.take(out, (..., slice(0, d))), np.zeros(sv.shape[:-1] + (a,))],
                        axis=-1)
    return out


def integrate_field(state, t0: float, t1: float, rhs: Callable[[Var], Var],
                    steps_per_unit: int = 10, method: str = "rk4") -> Var:
    """Fixed-step integration of an autonomous field from ``t0`` to ``t1``.

    Runs ``round((t1 - t0) * steps_per_unit)`` steps, at least one when
    ``t1 > t0``. Every stage is an ordinary taped operation, so gradients
    flow through the discretization.
    """
    if t1 < t0:
        raise ConfigurationError("integration end time precedes start time")
    if t1 == t0:
        return state if isinstance(state, Var) else Var(state)
    n = max(1, int(round((t1 - t0) * steps_per_unit)))
    h = (t1 - t0) / n
    z = state
    for i in range(n):
        try:
            if method == "rk4":
                k1 = rhs(z)
                k2 = rhs(z + k1 * (0.5 * h))
                k3 = rhs(z + k2 * (0.5 * h))
                k4 = rhs(z + k3 * h)
                z = z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
            elif method == "euler":
                z = z + rhs(z) * h
            else:
                raise ConfigurationError(f"unknown solver method {method!r}")
        except DivergenceError:
            raise
        except NumericError as exc:
            raise DivergenceError(f"integration diverged at step {i}: {exc}") from exc
    return z


def integrate(state, t0: float, t1: float, params, cfg: OdeConfig,
              solver: SolverConfig = SolverConfig()) -> Var:
    return integrate_field(
        state, t0, t1,
        lambda s: ode_rhs(s, params, cfg, solver.augment_mode),
        solver.steps, solver.method)


def rollout(z0, num_groups: int, params, cfg: OdeConfig,
            solver: SolverConfig = SolverConfig()) -> list[Var]:
    """Augmented states at t = 0 .. num_groups-1, starting from core code ``z0``."""
    if num_groups < 1:
        raise ConfigurationError("num_groups must be >= 1")
    states = [augment(z0, cfg)]
    for t in range(num_groups - 1):
        try:
            states.append(integrate(states[-1], t, t + 1, params, cfg, solver))
        except DivergenceError as exc:
            raise DivergenceError(f"group {t + 1}: {exc}") from exc
    return states


# -- gated recurrent backbones ------------------------------------------------

def init_gru_params(dim: int, rng, prefix: str = "rnn") -> dict[str, np.ndarray]:
    rng = ad.make_rng(rng)
    bound = 1.0 / np.sqrt(dim)
    p = {}
    for gate in ("u", "r", "n"):
        p[f"{prefix}.W{gate}"] = rng.uniform(-bound, bound, (dim, dim))
        p[f"{prefix}.b{gate}"] = rng.uniform(-bound, bound, dim)
    return p


def gru_step(z, params, prefix: str = "rnn") -> Var:
    """Gated update whose input and hidden state are both the current code.

    ``u = sigma(Wu z + bu)``, ``r = sigma(Wr z + br)``,
    ``n = tanh(Wn (r * z) + bn)``, output ``(1 - u) * n + u * z``.
    """
    W = params[f"{prefix}.Wu"]
    dim = ad.value_of(W).shape[0]
    if ad.value_of(z).shape[-1] != dim:
        raise DimensionError(f"code has {ad.value_of(z).shape[-1]} components, cell expects {dim}")
    u = ad.sigmoid(ad.affine(z, params[f"{prefix}.Wu"], params[f"{prefix}.bu"]))
    r = ad.sigmoid(ad.affine(z, params[f"{prefix}.Wr"], params[f"{prefix}.br"]))
    n = ad.tanh(ad.affine(r * z, params[f"{prefix}.Wn"], params[f"{prefix}.bn"]))
    return n + u * (z - n)


def recurrent_latent_step(z, params) -> Var:
    return gru_step(z, params, "rnn")


def recurrent_rollout(z0, num_groups: int, params) -> list[Var]:
    if num_groups < 1:
        raise ConfigurationError("num_groups must be >= 1")
    codes = [z0 if isinstance(z0, Var) else Var(z0)]
    for _ in range(num_groups - 1):
        codes.append(recurrent_latent_step(codes[-1], params))
    return codes


def pure_frame_step(frame, params, cfg: CodecConfig) -> Var:
    """One frame to the next: spatial encode, recurrent step, spatial decode."""
    fv = ad.value_of(frame)
    if fv.shape[-2:] != (cfg.height, cfg.width):
        raise DimensionError(f"frame has shape {fv.shape}, expected (.., {cfg.height}, {cfg.width})")
    code = encode_frames(frame, params, cfg)
    out = decode_frames(gru_step(code, params, "prnn"), params, cfg)
    return ad.reshape(out, fv.shape)


def pure_frame_rollout(frame, num_frames: int, params, cfg: CodecConfig) -> np.ndarray:
    """Recursively generate ``num_frames`` frames after ``frame`` (inference only)."""
    frames = []
    cur = ad.value_of(frame)
    for _ in range(num_frames):
        cur = pure_frame_step(cur, params, cfg).value
        frames.append(cur)
    return np.stack(frames, axis=-3) if frames else np.zeros(cur.shape[:-2] + (0,) + cur.shape[-2:])
