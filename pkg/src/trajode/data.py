"""Trajectory bundles: synthetic generation, binary file format, subject splits.

Bundle file layout (all integers little-endian)::

    b"FMTJ"  u32 version  u32 S, G, T, L, H, W
    u8[S] split codes          (0 train, 1 val, 2 test)
    u32 m, then m x (u32 length, UTF-8 trait name)
    per subject: L*H*W float64 frames (row-major), m float64 traits
    u32 CRC32 of every preceding byte

``G`` and ``T`` are 0 for a raw sequence; otherwise ``L == G * T``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.linalg import expm

from .autodiff import make_rng
from .errors import ConfigurationError, DataError, ParseError, UnsupportedVersionError

MAGIC = b"FMTJ"
VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class TrajectoryBundle:
    frames: np.ndarray
    splits: np.ndarray
    trait_names: list = field(default_factory=list)
    traits: np.ndarray | None = None
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        if self.frames.ndim not in (4, 5):
            raise DataError(f"frames must be (S, L, H, W) or (S, G, T, H, W), got {self.frames.shape}")
        if self.splits.shape != (self.frames.shape[0],):
            raise DataError("one split code per subject required")
        if np.any(self.splits > 2):
            raise DataError("split codes must be 0 (train), 1 (val) or 2 (test)")
        self.trait_names = list(self.trait_names)
        if len(set(self.trait_names)) != len(self.trait_names):
            raise DataError("trait names must be unique")
        if self.trait_names:
            self.traits = np.asarray(self.traits, dtype=np.float64)
            if self.traits.shape != (self.num_subjects, len(self.trait_names)):
                raise DataError("trait table must hold one value per (subject, trait)")
        else:
            self.traits = None

    def __eq__(self, other):
        if not isinstance(other, TrajectoryBundle):
            return NotImplemented
        same_traits = (self.traits is None and other.traits is None) or (
            self.traits is not None and other.traits is not None
            and np.array_equal(self.traits, other.traits))
        return (self.frames.shape == other.frames.shape
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.splits, other.splits)
                and self.trait_names == other.trait_names and same_traits)

    @property
    def num_subjects(self):
        return self.frames.shape[0]

    @property
    def is_grouped(self):
        return self.frames.ndim == 5

    @property
    def height(self):
        return self.frames.shape[-2]

    @property
    def width(self):
        return self.frames.shape[-1]

    @property
    def sequence_length(self):
        s = self.frames.shape
        return s[1] * s[2] if self.is_grouped else s[1]

    def sequences(self) -> np.ndarray:
        """Frames as (S, L, H, W) regardless of grouping."""
        return self.frames.reshape(self.num_subjects, -1, self.height, self.width)

    def indices(self, split: str) -> np.ndarray:
        try:
            code = SPLITS.index(split)
        except ValueError:
            raise ConfigurationError(f"unknown split {split!r}") from None
        return np.flatnonzero(self.splits == code)

    def subset(self, idx) -> "TrajectoryBundle":
        idx = np.asarray(idx)
        return TrajectoryBundle(self.frames[idx], self.splits[idx], self.trait_names,
                                None if self.traits is None else self.traits[idx],
                                dict(self.metadata))


# -- binary format ------------------------------------------------------------

def bundle_to_bytes(bundle: TrajectoryBundle) -> bytes:
    S = bundle.num_subjects
    G, T = bundle.frames.shape[1:3] if bundle.is_grouped else (0, 0)
    parts = [MAGIC, struct.pack("<7I", VERSION, S, G, T, bundle.sequence_length,
                                bundle.height, bundle.width)]
    parts.append(bundle.splits.astype("<u1").tobytes())
    parts.append(struct.pack("<I", len(bundle.trait_names)))
    for name in bundle.trait_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    seqs = bundle.sequences()
    for i in range(S):
        parts.append(seqs[i].astype("<f8").tobytes())
        if bundle.traits is not None:
            parts.append(bundle.traits[i].astype("<f8").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def bundle_from_bytes(buf: bytes) -> TrajectoryBundle:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad magic, not a trajectory bundle", 0)
    version = r.u32("version")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported bundle version {version}", 4)
    S, G, T, L, H, W = (r.u32(n) for n in ("S", "G", "T", "L", "H", "W"))
    if (G == 0) != (T == 0) or (G and G * T != L) or min(H, W, L) == 0:
        raise ParseError(f"inconsistent shape header S={S} G={G} T={T} L={L} H={H} W={W}", 8)
    splits = np.frombuffer(r.take(S, "split codes"), dtype="<u1").copy()
    m = r.u32("trait count")
    names = []
    for _ in range(m):
        n = r.u32("trait name length")
        start = r.pos
        try:
            names.append(r.take(n, "trait name").decode("utf-8"))
        except UnicodeDecodeError:
            raise ParseError("trait name is not valid UTF-8", start) from None
    per = L * H * W
    frames = np.empty((S, per))
    traits = np.empty((S, m))
    for i in range(S):
        frames[i] = np.frombuffer(r.take(8 * per, f"frames of subject {i}"), dtype="<f8")
        traits[i] = np.frombuffer(r.take(8 * m, f"traits of subject {i}"), dtype="<f8")
    end = r.pos
    crc = r.u32("checksum")
    if r.pos != len(buf):
        raise ParseError("trailing bytes after checksum", r.pos)
    if zlib.crc32(buf[:end]) != crc:
        raise ParseError("checksum mismatch", end)
    shape = (S, G, T, H, W) if G else (S, L, H, W)
    try:
        return TrajectoryBundle(frames.reshape(shape), splits, names, traits if m else None)
    except DataError as exc:
        raise ParseError(str(exc), 8) from exc


def write_bundle(bundle: TrajectoryBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_to_bytes(bundle))


def read_bundle(path) -> TrajectoryBundle:
    with open(path, "rb") as fh:
        return bundle_from_bytes(fh.read())


# -- splits ---------------------------------------------------------------------

def split_counts(n: int, fractions) -> list[int]:
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError("split fractions must be three non-negative values summing to 1")
    if n < sum(1 for f in fractions if f > 0):
        raise DataError(f"{n} subjects cannot fill {sum(1 for f in fractions if f > 0)} splits")
    counts = [int(np.floor(f * n + 1e-9)) for f in fractions]
    counts[0] += n - sum(counts)
    return counts


def make_splits(bundle: TrajectoryBundle, fractions=(0.6, 0.1, 0.3), seed=0) -> TrajectoryBundle:
    """Shuffle subjects with ``seed`` and assign train/val/test by ``fractions``.

    Counts are floored; whatever is left over goes to train.
    """
    counts = split_counts(bundle.num_subjects, fractions)
    order = make_rng(seed).permutation(bundle.num_subjects)
    labels = np.empty(bundle.num_subjects, dtype=np.uint8)
    start = 0
    for code, c in enumerate(counts):
        labels[order[start:start + c]] = code
        start += c
    out = bundle.subset(np.arange(bundle.num_subjects))
    out.splits = labels
    return out


# -- synthetic generator --------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    latent_dim: int = 4
    spectral_scale: float = 0.12
    min_frequency_ratio: float = 0.5
    decay: float = 0.004
    cosines_per_basis: int = 3
    max_spatial_frequency: float = 2.0
    noise: float = 0.05
    n_traits: int = 6
    trait_noise: float = 0.01
    n_train: int = 64
    n_val: int = 8
    n_test: int = 16
    length: int = 80
    height: int = 16
    width: int = 16

    def __post_init__(self):
        if self.latent_dim < 1 or self.length < 1 or self.height < 1 or self.width < 1:
            raise ConfigurationError("synthetic dimensions must be positive")
        if self.noise < 0 or self.trait_noise < 0 or self.decay < 0:
            raise ConfigurationError("noise levels and decay must be non-negative")
        if min(self.n_train, self.n_val, self.n_test) < 0 or self.num_subjects < 1:
            raise ConfigurationError("subject counts must be non-negative with at least one subject")

    @property
    def num_subjects(self):
        return self.n_train + self.n_val + self.n_test

    @classmethod
    def from_mapping(cls, values: dict) -> "SynthSpec":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigurationError(f"unknown synthetic spec key {key!r}")
            caster = int if known[key] in ("int", int) else float
            try:
                kwargs[key] = caster(raw)
            except ValueError:
                raise ConfigurationError(f"bad value {raw!r} for key {key!r}") from None
        return cls(**kwargs)

    def to_dict(self):
        return asdict(self)


def dynamics_matrix(spec: SynthSpec, rng) -> np.ndarray:
    """Random skew-symmetric rotation generator minus a non-negative diagonal decay."""
    q = spec.latent_dim
    blocks = np.zeros((q, q))
    for i in range(q // 2):
        w = spec.spectral_scale * rng.uniform(spec.min_frequency_ratio, 1.0)
        blocks[2 * i, 2 * i + 1], blocks[2 * i + 1, 2 * i] = w, -w
    Q, R = np.linalg.qr(rng.standard_normal((q, q)))
    Q = Q * np.sign(np.diag(R))
    skew = Q @ blocks @ Q.T
    skew = 0.5 * (skew - skew.T)
    return skew - np.diag(rng.uniform(0.0, spec.decay, q))


def smooth_bases(spec: SynthSpec, rng) -> np.ndarray:
    """Low-frequency random fields, one per latent dimension, zero mean and unit RMS."""
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    out = np.zeros((spec.latent_dim, spec.height, spec.width))
    for j in range(spec.latent_dim):
        for _ in range(spec.cosines_per_basis):
            fy, fx = rng.uniform(0.0, spec.max_spatial_frequency, 2)
            phase = rng.uniform(0.0, 2 * np.pi)
            out[j] += rng.standard_normal() * np.cos(
                2 * np.pi * (fx * xx / spec.width + fy * yy / spec.height) + phase)
        out[j] -= out[j].mean()
        out[j] /= np.sqrt(np.mean(out[j] ** 2))
    return out


def latent_trajectory(A: np.ndarray, u0: np.ndarray, length: int) -> np.ndarray:
    """Exact samples u(0), u(1), ... of du/dt = A u via the matrix exponential."""
    step = expm(A)
    out = np.empty((length,) + u0.shape)
    u = u0
    for t in range(length):
        out[t] = u
        u = step @ u
    return out


def generate_synthetic(spec: SynthSpec = SynthSpec(), seed=0) -> TrajectoryBundle:
    """Render a bundle whose frames follow known linear latent dynamics."""
    root = make_rng(seed)
    structure_rng, trait_rng, *subject_rngs = root.spawn(2 + spec.num_subjects)
    A = dynamics_matrix(spec, structure_rng)
    if np.max(np.linalg.eigvals(A).real) > 1e-12:
        raise ConfigurationError("generator dynamics are unstable")
    bases = smooth_bases(spec, structure_rng)
    frames = np.empty((spec.num_subjects, spec.length, spec.height, spec.width))
    u0s = np.empty((spec.num_subjects, spec.latent_dim))
    for i, rng in enumerate(subject_rngs):
        u0s[i] = rng.standard_normal(spec.latent_dim)
        traj = latent_trajectory(A, u0s[i], spec.length)
        frames[i] = np.tensordot(traj, bases, axes=1)
        if spec.noise:
            frames[i] += spec.noise * rng.standard_normal(frames[i].shape)
    splits = np.repeat(np.arange(3, dtype=np.uint8), [spec.n_train, spec.n_val, spec.n_test])
    names, traits, B = [], None, None
    if spec.n_traits:
        B = trait_rng.standard_normal((spec.n_traits, spec.latent_dim))
        clean = u0s @ B.T
        span = clean.max(axis=0) - clean.min(axis=0)
        traits = clean + spec.trait_noise * span * trait_rng.standard_normal(clean.shape)
        names = [f"trait_{k + 1}" for k in range(spec.n_traits)]
    meta = {"seed": seed, "spec": spec.to_dict(), "dynamics": A, "bases": bases,
            "initial_states": u0s, "trait_matrix": B}
    return TrajectoryBundle(frames, splits, names, traits, meta)
