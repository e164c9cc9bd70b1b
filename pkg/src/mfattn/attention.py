"""Softmax self-attention on token clouds, head velocities and mobilities.

Tokens are rows of an (n, d) array; a head ensemble is an (H, d, d) stack of
symmetric matrices.  Value and key-query matrices coincide (V = D).

The per-index functions mirror the textbook formulas and are used as
reference implementations; :func:`evaluate_field` is the vectorized kernel
used by the integrators and diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sphere import as_cloud, as_ensemble, project_tangent

MOBILITY_KERNELS = ("softmax", "constant")


def _check_index(n, i):
    if not 0 <= i < n:
        raise IndexError(f"token index {i} out of range for a cloud of {n} tokens")


def attention_row(cloud, D, i):
    """Softmax attention weights of token ``i`` over the cloud."""
    X = np.asarray(cloud, dtype=float)
    _check_index(len(X), i)
    logits = X @ (np.asarray(D, dtype=float) @ X[i])
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def head_velocity(cloud, D, i):
    X = np.asarray(cloud, dtype=float)
    D = np.asarray(D, dtype=float)
    A = attention_row(X, D, i)
    return project_tangent(X[i], D @ (A @ X))


def multihead_velocity(cloud, ens, i):
    Ds = np.asarray(ens, dtype=float)
    if Ds.ndim == 2:
        Ds = Ds[None]
    return np.mean([head_velocity(cloud, D, i) for D in Ds], axis=0)


def mobility(cloud, D, x, kernel="softmax"):
    """Mean of exp(<x, D x_j>) over the cloud; identically 1 for the constant kernel."""
    if kernel == "constant":
        return 1.0
    if kernel != "softmax":
        raise ValueError(f"unknown mobility kernel {kernel!r}; expected one of {MOBILITY_KERNELS}")
    X = np.asarray(cloud, dtype=float)
    return float(np.mean(np.exp(X @ (np.asarray(D, dtype=float) @ np.asarray(x, dtype=float)))))


def effective_mobility(cloud, ens, x, kernel="softmax"):
    """Harmonic mean over heads of the per-head mobilities at ``x``."""
    Ds = np.asarray(ens, dtype=float)
    if Ds.ndim == 2:
        Ds = Ds[None]
    inv = [1.0 / mobility(cloud, D, x, kernel) for D in Ds]
    return 1.0 / float(np.mean(inv))


@dataclass
class FieldEval:
    """Everything one pass over the attention logits provides.

    ``grad`` is n times the Euclidean gradient of the interaction energy with
    respect to each token, i.e. the head average of m_h(x_i) D_h abar_i^h.
    ``power`` is the exact rate of change of the energy when tokens move with
    ``velocity`` and the weights are held fixed.
    """

    velocity: np.ndarray  # (n, d) head-averaged tangent velocity
    head_velocities: np.ndarray  # (H, n, d)
    mobility: np.ndarray  # (H, n)
    energy: float
    grad: np.ndarray  # (n, d)
    moments: np.ndarray | None = None  # (H, d, d): sum_ij e^{L_ij} x_i x_j^T
    kernel_sum: float | None = None  # sum_hij e^{L_ij}
    kernel_c2_sum: float | None = None  # sum_hij e^{L_ij} <x_i, x_j>^2

    @property
    def effective_mobility(self):
        return 1.0 / np.mean(1.0 / self.mobility, axis=0)

    @property
    def g2(self):
        return float(np.mean(np.sum(self.velocity**2, axis=-1)))

    @property
    def g2_weighted(self):
        return float(np.mean(self.effective_mobility * np.sum(self.velocity**2, axis=-1)))

    @property
    def power(self):
        return float(np.mean(np.sum(self.grad * self.velocity, axis=-1)))


def _chunk_size(n, H, budget=1_000_000):
    return int(max(1, min(H, budget // max(n * n, 1))))


def evaluate_field(X, Ds, *, moments=False, quadratic=False):
    """Vectorized attention field of the whole cloud under all heads.

    Logits are shifted by the Frobenius norm of each head, an upper bound on
    |<x, D y>| for unit vectors, so every exponential is <= 1.  The shift is a
    per-head constant and cancels in the softmax.
    """
    X = np.asarray(X, dtype=float)
    Ds = np.asarray(Ds, dtype=float)
    n, d = X.shape
    H = Ds.shape[0]
    ones = np.ones((n, 1))
    Xa = np.hstack([X, ones])
    right = [X, ones]
    if quadratic:
        right.append((X[:, :, None] * X[:, None, :]).reshape(n, d * d))
    R = np.hstack(right)
    shift = np.sqrt(np.sum(Ds * Ds, axis=(1, 2)))

    abar = np.empty((H, n, d))
    rowsum = np.empty((H, n))
    S = np.empty((H, d, d)) if moments else None
    c2 = 0.0
    step = _chunk_size(n, H)
    for s in range(0, H, step):
        Dc = Ds[s:s + step]
        h = len(Dc)
        Y = np.empty((h, n, d + 1))
        Y[..., :d] = X @ Dc
        Y[..., d] = -shift[s:s + h, None]
        W = Y.reshape(h * n, d + 1) @ Xa.T
        np.exp(W, out=W)
        WR = (W @ R).reshape(h, n, R.shape[1])
        rs = WR[..., d]
        rowsum[s:s + h] = rs
        abar[s:s + h] = WR[..., :d] / rs[..., None]
        scale = np.exp(shift[s:s + h])
        if moments:
            S[s:s + h] = np.einsum("ni,hnj->hij", X, WR[..., :d]) * scale[:, None, None]
        if quadratic:
            per_head = np.tensordot(WR[..., d + 1:], R[:, d + 1:], axes=([1, 2], [0, 1]))
            c2 += float(per_head @ scale)

    m = rowsum * np.exp(shift)[:, None] / n
    u = np.einsum("hab,hnb->hna", Ds, abar)
    V = project_tangent(X, u)
    energy = float(np.sum(m)) / (2.0 * H * n)
    out = FieldEval(
        velocity=V.mean(axis=0),
        head_velocities=V,
        mobility=m,
        energy=energy,
        grad=np.mean(m[..., None] * u, axis=0),
        moments=S,
    )
    if quadratic:
        out.kernel_sum = float(np.sum(m)) * n
        out.kernel_c2_sum = c2
    return out


def velocity_field(cloud, ens):
    """Head-averaged tangent velocity of every token, shape (n, d)."""
    X = as_cloud(cloud)
    Ds = as_ensemble(ens, d=X.shape[1])
    return evaluate_field(X, Ds).velocity
