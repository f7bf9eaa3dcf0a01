"""Grouping, training objectives and the two-phase training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Var
from .codec import (CodecConfig, decode_frames, decode_group, encode_frames, encode_group,
                    encode_variational, init_codec_params, kl_to_standard_normal, reparametrize)
from .dynamics import (BACKBONES, OdeConfig, SolverConfig, init_gru_params, init_ode_params,
                       pure_frame_step, recurrent_rollout, rollout)
from .errors import ConfigurationError, DataError, DivergenceError, NumericError
from .metrics import batch_spatial_correlation

log = logging.getLogger(__name__)

SPATIAL_PREFIXES = ("enc.s", "dec.s")


@dataclass
class GroupedSubject:
    subject_id: int
    groups: np.ndarray
    traits: np.ndarray | None = None


def group_trajectory(frames, downsample: int = 1, num_groups: int = 4, group_length: int = 100,
                     subject_id: int = 0, traits=None) -> GroupedSubject:
    """Keep every ``downsample``-th frame, truncate to G*T, split into G consecutive groups."""
    frames = np.asarray(frames, dtype=np.float64)
    if downsample < 1 or num_groups < 1 or group_length < 1:
        raise ConfigurationError("downsample, num_groups and group_length must be positive")
    need = downsample * num_groups * group_length
    if len(frames) < need:
        raise DataError(f"trajectory has {len(frames)} frames; {need} required "
                        f"(downsample {downsample} x {num_groups} groups x {group_length})")
    kept = frames[::downsample][:num_groups * group_length]
    return GroupedSubject(subject_id, kept.reshape((num_groups, group_length) + frames.shape[1:]),
                          None if traits is None else np.asarray(traits, dtype=np.float64))


@dataclass(frozen=True)
class ModelSpec:
    """Architecture: codec, temporal backbone and solver."""

    codec: CodecConfig
    ode: OdeConfig
    solver: SolverConfig = SolverConfig()
    backbone: str = "ode"
    num_groups: int = 4

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if self.ode.latent_dim != self.codec.latent_dim:
            raise ConfigurationError("ODE and codec latent dimensions differ")
        if self.num_groups < 1:
            raise ConfigurationError("num_groups must be >= 1")


def init_params(spec: ModelSpec, rng) -> dict[str, np.ndarray]:
    rng = ad.make_rng(rng)
    codec_rng, dyn_rng = ad.split_rng(rng, 2)
    if spec.backbone == "pure-rnn":
        from .codec import init_spatial_params
        p = init_spatial_params(spec.codec, codec_rng)
        p.update(init_gru_params(spec.codec.spatial_dim, dyn_rng, "prnn"))
        return p
    p = init_codec_params(spec.codec, codec_rng)
    if spec.backbone == "ode":
        p.update(init_ode_params(spec.ode, dyn_rng))
    else:
        p.update(init_gru_params(spec.codec.latent_dim, dyn_rng, "rnn"))
    return p


@dataclass
class TrainConfig:
    objective: str = "forward"
    epochs: int = 100
    phase1_epochs: int | None = None
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    seed: int = 0
    kl_weight: float = 1.0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.objective not in ("forward", "bidirectional"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("epochs and batch size must be >= 1, learning rate > 0")
        if self.phase1_epochs is None:
            self.phase1_epochs = self.epochs // 4
        if not 0 <= self.phase1_epochs <= self.epochs:
            raise ConfigurationError("phase1_epochs must lie in [0, epochs]")

    def to_dict(self):
        return asdict(self)


# -- forward passes -----------------------------------------------------------------

def latent_codes(groups0, params, spec: ModelSpec, rng=None):
    """Encode group 0 of each subject. Returns ``(z0, kl)``; kl is None unless variational.

    A variational codec samples ``z0`` when ``rng`` is given, else uses the mean.
    """
    if not spec.codec.variational:
        return encode_group(groups0, params, spec.codec), None
    mu, logvar = encode_variational(groups0, params, spec.codec)
    z0 = reparametrize(mu, logvar, rng) if rng is not None else mu
    return z0, kl_to_standard_normal(mu, logvar)


def latent_rollout(z0, params, spec: ModelSpec) -> list[Var]:
    """Codes for groups 0..G-1 (augmented states for the ODE backbone)."""
    if spec.backbone == "ode":
        return rollout(z0, spec.num_groups, params, spec.ode, spec.solver)
    if spec.backbone == "latent-rnn":
        return recurrent_rollout(z0, spec.num_groups, params)
    raise ConfigurationError("pure-rnn has no latent rollout")


def predict_groups(groups0, params, spec: ModelSpec, rng=None):
    """Decode every rolled-out code. ``groups0``: (B, T, H, W). Returns ((G, B, T, H, W), kl)."""
    z0, kl = latent_codes(groups0, params, spec, rng)
    d = spec.codec.latent_dim
    codes = [ad.take(s, (..., slice(0, d))) for s in latent_rollout(z0, params, spec)]
    B = ad.value_of(z0).shape[0]
    c = spec.codec
    frames = decode_group(ad.concat(codes, axis=0), params, c)
    return ad.reshape(frames, (spec.num_groups, B, c.group_length, c.height, c.width)), kl


def loss_terms(objective: str, num_groups: int) -> tuple[int, ...]:
    if objective == "forward":
        return tuple(range(num_groups))
    if objective == "bidirectional":
        if num_groups != 4:
            raise ConfigurationError("bidirectional objective needs exactly 4 groups")
        return (0, 1, 3)
    raise ConfigurationError(f"unknown objective {objective!r}")


def _as_batch(groups, spec):
    g = np.asarray(groups, dtype=np.float64)
    if g.ndim == 4:
        g = g[None]
    if g.shape[1] != spec.num_groups:
        raise DataError(f"expected {spec.num_groups} groups, got {g.shape[1]}")
    return g


def objective_loss(groups, params, spec: ModelSpec, objective: str = "forward",
                   kl_weight: float = 1.0, rng=None, return_pred=False):
    """Sum over loss groups of frame MSE, averaged over the batch, plus weighted KL.

    ``groups`` is (G, T, H, W) for one subject or (B, G, T, H, W).
    """
    g = _as_batch(groups, spec)
    terms = loss_terms(objective, spec.num_groups)
    pred, kl = predict_groups(g[:, 0], params, spec, rng)
    loss = None
    for t in terms:
        term = ad.mse(ad.take(pred, t), g[:, t])
        loss = term if loss is None else loss + term
    if kl is not None:
        loss = loss + ad.mul(kl, kl_weight / g.shape[0])
    return (loss, pred) if return_pred else loss


def forward_loss(subject, params, spec: ModelSpec, kl_weight: float = 1.0, rng=None) -> Var:
    groups = subject.groups if isinstance(subject, GroupedSubject) else subject
    return objective_loss(groups, params, spec, "forward", kl_weight, rng)


def bidirectional_loss(subject, params, spec: ModelSpec, kl_weight: float = 1.0, rng=None) -> Var:
    groups = subject.groups if isinstance(subject, GroupedSubject) else subject
    return objective_loss(groups, params, spec, "bidirectional", kl_weight, rng)


def spatial_loss(frames, params, cfg: CodecConfig) -> Var:
    """Per-frame autoencoder reconstruction MSE (phase 1)."""
    frames = np.asarray(frames, dtype=np.float64).reshape(-1, cfg.height, cfg.width)
    return ad.mse(decode_frames(encode_frames(frames, params, cfg), params, cfg), frames)


def pure_rnn_loss(sequences, params, cfg: CodecConfig, return_pred=False):
    """One-step-ahead frame prediction MSE over (B, L, H, W) sequences."""
    seq = np.asarray(sequences, dtype=np.float64)
    pred = pure_frame_step(seq[:, :-1], params, cfg)
    loss = ad.mse(pred, seq[:, 1:])
    return (loss, pred) if return_pred else loss


# -- training loop ------------------------------------------------------------

@dataclass
class TrainingResult:
    params: dict
    history: list = field(default_factory=list)
    phase1_params: dict | None = None


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return ad.make_rng([seed, epoch]).permutation(n)


def _clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads


def _mean_corr(pred, truth):
    r = batch_spatial_correlation(pred, truth)
    r = r[np.isfinite(r)]
    return float(r.mean()) if r.size else float("nan")


def train(groups, spec: ModelSpec, cfg: TrainConfig, params=None) -> TrainingResult:
    """Phase 1 fits the per-frame autoencoder; phase 2 fits the full objective.

    ``groups``: training data as (N, G, T, H, W). Each history row is
    ``(epoch, phase, loss, mean_spatial_correlation)``.
    """
    data = np.asarray(groups, dtype=np.float64)
    if data.ndim != 5 or data.shape[1] != spec.num_groups:
        raise DataError(f"training data must be (N, {spec.num_groups}, T, H, W), got {data.shape}")
    if spec.backbone == "pure-rnn" and cfg.objective != "forward":
        raise ConfigurationError("pure-rnn backbone supports only the forward objective")
    loss_terms(cfg.objective, spec.num_groups)
    n = data.shape[0]
    params = dict(params) if params is not None else init_params(spec, cfg.seed)
    history = []
    phase1_names = [k for k in params if k.startswith(SPATIAL_PREFIXES)]
    phases = [(1, cfg.phase1_epochs, phase1_names), (2, cfg.epochs - cfg.phase1_epochs, list(params))]
    epoch = 0
    phase1_params = None
    for phase, n_epochs, trainable in phases:
        state = AdamState(cfg.learning_rate, cfg.beta1, cfg.beta2)
        for _ in range(n_epochs):
            epoch += 1
            order = batch_order(cfg.seed, epoch, n)
            total, corrs = 0.0, []
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                batch = data[order[start:start + cfg.batch_size]]
                tape = Tape()
                P = dict(params)
                P.update(tape.watch_all({k: params[k] for k in trainable}))
                try:
                    loss, corr = _batch_loss(batch, P, spec, cfg, phase, epoch, b)
                    grads = tape.gradient(loss)
                except NumericError as exc:
                    raise DivergenceError(f"epoch {epoch} (phase {phase}) batch {b}: {exc}") from exc
                lv = float(loss.value)
                if not np.isfinite(lv):
                    raise DivergenceError(f"epoch {epoch} (phase {phase}) batch {b}: loss {lv}")
                if cfg.clip_norm:
                    grads = _clip(grads, cfg.clip_norm)
                updated, state = ad.adam_step({k: params[k] for k in trainable}, grads, state)
                if not all(np.all(np.isfinite(v)) for v in updated.values()):
                    raise DivergenceError(f"epoch {epoch} (phase {phase}) batch {b}: "
                                          "non-finite parameter update")
                params.update(updated)
                total += lv * len(batch)
                corrs.append((corr, len(batch)))
            mean_corr = sum(c * w for c, w in corrs) / sum(w for _, w in corrs)
            history.append((epoch, phase, total / n, mean_corr))
            log.debug("epoch %d phase %d loss %.6g corr %.4f", epoch, phase, total / n, mean_corr)
        if phase == 1:
            phase1_params = {k: v.copy() for k, v in params.items()}
    return TrainingResult(params, history, phase1_params)


def _batch_loss(batch, P, spec, cfg, phase, epoch, b):
    c = spec.codec
    if phase == 1:
        frames = batch.reshape(-1, c.height, c.width)
        recon = decode_frames(encode_frames(frames, P, c), P, c)
        return ad.mse(recon, frames), _mean_corr(recon.value, frames)
    if spec.backbone == "pure-rnn":
        seq = batch.reshape(batch.shape[0], -1, c.height, c.width)
        loss, pred = pure_rnn_loss(seq, P, c, return_pred=True)
        return loss, _mean_corr(pred.value, seq[:, 1:])
    rng = ad.make_rng([cfg.seed, epoch, b, 1]) if c.variational else None
    loss, pred = objective_loss(batch, P, spec, cfg.objective, cfg.kl_weight, rng,
                                return_pred=True)
    pv = np.moveaxis(pred.value, 0, 1)
    return loss, _mean_corr(pv[:, 1:], batch[:, 1:])
