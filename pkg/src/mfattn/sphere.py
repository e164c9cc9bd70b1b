"""Differential-geometric primitives on the unit sphere S^{d-1} embedded in R^d."""

from __future__ import annotations

import numpy as np

EPS_NORM = 1e-12
SYMMETRY_TOL = 1e-9
UNIT_TOL = 1e-9


class NearZeroVector(ValueError):
    """Raised when a vector is too short to be radially normalized."""


class DimensionMismatch(ValueError):
    pass


def _check_dims(x, v):
    if x.shape[-1] != v.shape[-1]:
        raise DimensionMismatch(
            f"dimension mismatch: base has d={x.shape[-1]}, vector has d={v.shape[-1]}"
        )


def project_tangent(x, v):
    """Orthogonal projection of ``v`` onto the tangent space at ``x``.

    Both arguments may be stacked along leading axes, e.g. ``x`` of shape
    (n, d) and ``v`` of shape (n, d) or (H, n, d).
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_dims(x, v)
    return v - np.sum(v * x, axis=-1, keepdims=True) * x


def radial_normalize(z):
    """Map ``z`` (or each row of a stack) to the sphere by z / |z|."""
    z = np.asarray(z, dtype=float)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise NearZeroVector(
            f"cannot normalize a vector of norm {float(norms.min()):.3e} "
            f"(threshold {EPS_NORM:g}); degenerate Euler step?"
        )
    return z / norms


def kernel_value(x, y, D):
    """Boltzmann kernel exp(<x, D y>)."""
    return float(np.exp(np.asarray(x) @ np.asarray(D) @ np.asarray(y)))


def kernel_gradient(x, y, D):
    """Riemannian gradient in ``x`` of exp(<x, D y>) on the sphere."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    D = np.asarray(D, dtype=float)
    _check_dims(x, y)
    if D.shape != (x.shape[-1], x.shape[-1]):
        raise DimensionMismatch(f"D has shape {D.shape}, expected {(x.shape[-1],) * 2}")
    Dy = D @ y
    return project_tangent(x, np.exp(x @ Dy) * Dy)


def is_unit(x, tol=UNIT_TOL):
    return bool(np.all(np.abs(np.linalg.norm(x, axis=-1) - 1.0) <= tol))


def as_cloud(points, tol=UNIT_TOL):
    """Validate a token cloud: an (n, d) array of unit vectors, n >= 1."""
    X = np.array(points, dtype=float, ndmin=2)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError(f"token cloud must have shape (n, d) with n >= 1, got {X.shape}")
    if not is_unit(X, tol):
        worst = float(np.max(np.abs(np.linalg.norm(X, axis=-1) - 1.0)))
        raise ValueError(f"token cloud is not unit-norm (max deviation {worst:.3e})")
    return X


def as_ensemble(heads, d=None, tol=SYMMETRY_TOL):
    """Validate a head ensemble: (H, d, d) symmetric matrices, H >= 1.

    A single (d, d) matrix is promoted to an ensemble of one head.
    """
    Ds = np.array(heads, dtype=float)
    if Ds.ndim == 2:
        Ds = Ds[None]
    if Ds.ndim != 3 or Ds.shape[1] != Ds.shape[2] or Ds.shape[0] < 1:
        raise ValueError(f"head ensemble must have shape (H, d, d), got {Ds.shape}")
    if d is not None and Ds.shape[1] != d:
        raise DimensionMismatch(f"heads act on R^{Ds.shape[1]}, tokens live in R^{d}")
    asym = np.max(np.abs(Ds - Ds.transpose(0, 2, 1)))
    if asym > tol:
        raise ValueError(f"head matrices are not symmetric (max asymmetry {asym:.3e})")
    return Ds


def uniform_cloud(n, d, rng):
    """Sample n points uniformly on S^{d-1} (normalized Gaussians)."""
    return radial_normalize(rng.standard_normal((n, d)))


def random_tangent(x, rng):
    """Random unit tangent directions at each row of ``x``."""
    v = project_tangent(x, rng.standard_normal(np.shape(x)))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)
