"""Equilibria, flow walks and vector-field grids of a trained latent vector field."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import make_rng
from .dynamics import OdeConfig
from .errors import ConfigurationError, DimensionError
from .metrics import TemporalCorrelationMap, temporal_correlation_map

log = logging.getLogger(__name__)

MAX_HALVINGS = 30
STALL_NORM = 1e-12


@dataclass
class VectorField:
    """An autonomous field ``f`` on R^dim together with its Jacobian."""

    f: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    dim: int


def _activation(kind):
    if kind == "tanh":
        return np.tanh, lambda x: 1.0 - np.tanh(x) ** 2
    if kind == "relu":
        return (lambda x: np.maximum(x, 0.0)), (lambda x: (x > 0).astype(float))
    raise ConfigurationError(f"unknown nonlinearity {kind!r}")


def ode_field(params, cfg: OdeConfig, augment_mode: str = "evolving") -> VectorField:
    """The learned field, on the augmented state (evolving) or the core (constant-zero)."""
    W1, b1 = np.asarray(params["ode.W1"]), np.asarray(params["ode.b1"])
    W2, b2 = np.asarray(params["ode.W2"]), np.asarray(params["ode.b2"])
    phi, dphi = _activation(cfg.nonlinearity)
    if augment_mode == "constant-zero":
        d = cfg.latent_dim
        W1, W2, b2 = W1[:, :d], W2[:d], b2[:d]
    elif augment_mode != "evolving":
        raise ConfigurationError(f"unknown augment mode {augment_mode!r}")

    def f(z):
        return W2 @ phi(W1 @ z + b1) + b2

    def jac(z):
        return (W2 * dphi(W1 @ z + b1)) @ W1

    return VectorField(f, jac, W1.shape[1])


def linear_field(A, b=None) -> VectorField:
    """``dz/dt = A z + b``; a test harness for the analysis routines."""
    A = np.asarray(A, dtype=np.float64)
    b = np.zeros(A.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return VectorField(lambda z: A @ z + b, lambda z: A.copy(), A.shape[0])


def numerical_jacobian(f, z, eps=1e-6) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = eps
        cols.append((f(z + e) - f(z - e)) / (2 * eps))
    return np.stack(cols, axis=1)


def classify(eigenvalues, tol: float = 1e-9) -> str:
    re = np.real(eigenvalues)
    if np.any(np.abs(re) <= tol):
        return "marginal"
    if np.all(re < 0):
        return "stable"
    if np.all(re > 0):
        return "unstable"
    return "saddle"


@dataclass
class Equilibrium:
    point: np.ndarray
    residual: float
    classification: str
    eigenvalues: np.ndarray


def newton_root(fld: VectorField, z0, tol=1e-8, max_iter=100):
    """Damped Newton with step halving. Returns the root or None on failure."""
    z = np.asarray(z0, dtype=np.float64).copy()
    r = fld.f(z)
    rn = np.linalg.norm(r)
    for _ in range(max_iter):
        if rn < 0.1 * tol:
            return z
        step = np.linalg.lstsq(fld.jacobian(z), -r, rcond=None)[0]
        alpha = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = z + alpha * step
            rc = fld.f(cand)
            rcn = np.linalg.norm(rc)
            if np.isfinite(rcn) and rcn < rn:
                break
            alpha *= 0.5
        else:
            return z if rn < tol else None
        z, r, rn = cand, rc, rcn
    return z if rn < tol else None


def find_equilibria(fld: VectorField, num_starts: int = 64, rng=0, tol: float = 1e-8,
                    start_scale: float = np.sqrt(2.0), max_iter: int = 100) -> list[Equilibrium]:
    """Roots of the field from seeded N(0, start_scale^2 I) starts, deduplicated.

    Every returned root is re-checked to satisfy ``||f(z*)|| < tol``.
    """
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    rng = make_rng(rng)
    starts = start_scale * rng.standard_normal((num_starts, fld.dim))
    roots, failures = [], 0
    for s in starts:
        z = newton_root(fld, s, tol, max_iter)
        if z is None:
            failures += 1
            continue
        if any(np.linalg.norm(z - q) < 10 * tol for q in roots):
            continue
        roots.append(z)
    if failures:
        log.info("%d of %d Newton starts did not converge", failures, num_starts)
    out = []
    for z in roots:
        res = float(np.linalg.norm(fld.f(z)))
        if res >= tol:
            continue
        eig = np.linalg.eigvals(fld.jacobian(z))
        out.append(Equilibrium(z, res, classify(eig), eig))
    return out


def equilibria_to_csv(eqs, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        dim = len(eqs[0].point) if eqs else 0
        w.writerow([f"z{i}" for i in range(dim)] + ["residual", "classification"])
        for e in eqs:
            w.writerow([repr(float(v)) for v in e.point] + [repr(e.residual), e.classification])


def escape_direction(fld: VectorField, z) -> np.ndarray:
    """Unit eigenvector of the Jacobian's eigenvalue with the largest real part."""
    vals, vecs = np.linalg.eig(fld.jacobian(z))
    v = np.real(vecs[:, int(np.argmax(np.real(vals)))])
    if np.linalg.norm(v) == 0:
        v = np.imag(vecs[:, int(np.argmax(np.real(vals)))])
    v = v / np.linalg.norm(v)
    return v if v[np.argmax(np.abs(v))] > 0 else -v


@dataclass
class FlowWalk:
    start: np.ndarray
    step_size: float
    codes: list = field(default_factory=list)
    maps: list = field(default_factory=list)
    stalled_at: int | None = None


def flow_walk(start, fld: VectorField, step_size: float, num_steps: int,
              decoder: Callable[[np.ndarray], np.ndarray] | None = None, seed_pixel=None,
              latent_dim: int | None = None, equilibrium_tol: float = 1e-8) -> FlowWalk:
    """Step ``z <- z + h f(z) / ||f(z)||``, decoding each code when ``decoder`` is given.

    A start with ``||f|| < equilibrium_tol`` leaves along :func:`escape_direction`.
    """
    if step_size <= 0:
        raise ConfigurationError("step size must be positive")
    z = np.asarray(start, dtype=np.float64).copy()
    walk = FlowWalk(z.copy(), step_size, [z.copy()])
    for n in range(num_steps):
        fz = fld.f(z)
        norm = np.linalg.norm(fz)
        if n == 0 and norm < equilibrium_tol:
            direction = escape_direction(fld, z)
        elif norm < STALL_NORM:
            log.warning("flow walk stalled at step %d (||f|| = %.3g)", n, norm)
            walk.stalled_at = n
            break
        else:
            direction = fz / norm
        z = z + step_size * direction
        walk.codes.append(z.copy())
    if decoder is not None:
        if seed_pixel is None:
            raise ConfigurationError("seed_pixel required to compute correlation maps")
        d = latent_dim or len(z)
        walk.maps = [temporal_correlation_map(decoder(c[:d]), seed_pixel) for c in walk.codes]
    return walk


def vector_field_grid(fld: VectorField, dims=(0, 1), grid_range=3.0, resolution: int = 20,
                      anchor=None, core_dim: int | None = None) -> np.ndarray:
    """Rows ``(z_i, z_j, dz_i, dz_j)`` over a resolution x resolution grid.

    Coordinates other than ``dims`` are held at ``anchor`` (zeros by default).
    """
    i, j = dims
    limit = core_dim if core_dim is not None else fld.dim
    if i == j or not (0 <= i < limit and 0 <= j < limit):
        raise DimensionError(f"grid dims {dims} invalid for latent dimension {limit}")
    lo, hi = (-grid_range, grid_range) if np.isscalar(grid_range) else grid_range
    anchor = np.zeros(fld.dim) if anchor is None else np.asarray(anchor, dtype=np.float64)
    if anchor.shape != (fld.dim,):
        raise DimensionError(f"anchor must have {fld.dim} components")
    axis = np.linspace(lo, hi, resolution)
    rows = []
    for a in axis:
        for b in axis:
            z = anchor.copy()
            z[i], z[j] = a, b
            fz = fld.f(z)
            rows.append((a, b, fz[i], fz[j]))
    return np.array(rows)


def grid_to_csv(grid, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z_i", "z_j", "dz_i", "dz_j"])
        for row in grid:
            w.writerow([repr(float(v)) for v in row])


def decode_cluster_centers(means, decoder, seed_pixel) -> list[tuple[np.ndarray, TemporalCorrelationMap]]:
    """Decode each mixture mean to a frame group and its seed-based correlation map."""
    out = []
    for mu in np.atleast_2d(means):
        frames = decoder(mu)
        out.append((frames, temporal_correlation_map(frames, seed_pixel)))
    return out
