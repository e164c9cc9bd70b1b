"""Projected explicit Euler integration of the coupled token/weight system."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import evaluate_field
from .diagnostics import EnergyLedger
from .sphere import as_cloud, as_ensemble, radial_normalize, uniform_cloud
from .weights import STREAM_TOKENS, HeadNoise, drift_all, rng_stream

UPDATE_ORDERS = ("tokens_first", "weights_first")


@dataclass
class Trajectory:
    """Recorded snapshots of one run plus per-step diagnostics.

    ``steps`` are the grid indices of the snapshots (t = step * dt).  The
    ledger and ``m_theta`` cover every grid point, not only snapshots.
    """

    dt: float
    steps: np.ndarray
    clouds: np.ndarray  # (K, n, d)
    ensembles: np.ndarray  # (K, H, d, d)
    ledger: EnergyLedger | None = None
    m_theta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def times(self):
        return self.steps * self.dt

    @property
    def grid_times(self):
        return np.arange(int(self.steps[-1]) + 1) * self.dt

    @property
    def final_cloud(self):
        return self.clouds[-1]


def default_stride(dt):
    return max(1, int(np.floor(0.1 / dt + 1e-9)))


def initial_cloud(n, d, seed=0, trajectory=0):
    """Uniform tokens on S^{d-1} from the token stream of ``(seed, trajectory)``."""
    return uniform_cloud(n, d, rng_stream(seed, trajectory, STREAM_TOKENS, 0))


def step_tokens(cloud, ens, dt):
    """x_i <- (x_i + dt v_i) / |x_i + dt v_i|, all tokens from the same pre-step cloud."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    X = np.asarray(cloud, dtype=float)
    Ds = np.asarray(ens, dtype=float)
    if Ds.ndim == 2:
        Ds = Ds[None]
    return radial_normalize(X + dt * evaluate_field(X, Ds).velocity)


def n_steps(T, dt):
    if dt <= 0 or T <= 0:
        raise ValueError(f"need dt > 0 and T > 0, got dt={dt}, T={T}")
    if dt > T * (1 + 1e-12):
        raise ValueError(f"dt={dt} exceeds the horizon T={T}")
    N = int(round(T / dt))
    if abs(N * dt - T) > 1e-9 * max(T, 1.0):
        raise ValueError(f"T={T} is not an integer multiple of dt={dt}")
    return N


def simulate(cloud0, ens0, spec, dt, T, seed=0, trajectory=0, record_stride=None,
             update_order="tokens_first", ledger=True, dissipation="power", noise=None):
    """Integrate tokens and heads on the grid t_k = k dt up to T.

    With ``tokens_first`` both updates of a step read the state at t_k, so
    tokens move with D_{t_k} as in the plain explicit Euler scheme.  With
    ``weights_first`` the heads are advanced first and the tokens use
    D_{t_{k+1}}.  Snapshots are kept every ``record_stride`` steps and at T.
    """
    if update_order not in UPDATE_ORDERS:
        raise ValueError(f"update_order must be one of {UPDATE_ORDERS}, got {update_order!r}")
    X = as_cloud(cloud0).copy()
    Ds = as_ensemble(ens0, d=X.shape[1]).copy()
    N = n_steps(T, dt)
    stride = default_stride(dt) if record_stride is None else int(record_stride)
    if stride < 1:
        raise ValueError("record_stride must be >= 1")
    H, d = Ds.shape[0], Ds.shape[1]
    noisy = spec.sigma2 > 0
    if noisy and noise is None:
        noise = HeadNoise(seed, trajectory, H, d)
    g = spec.diffusion
    book = EnergyLedger(mode=dissipation) if ledger else None

    steps, clouds, ensembles = [0], [X.copy()], [Ds.copy()]
    sqnorm = np.empty(N + 1)
    for k in range(N):
        t = k * dt
        ev = evaluate_field(X, Ds, moments=ledger, quadratic=ledger and noisy)
        W = noise.next(dt) if noisy else None
        f = drift_all(spec, Ds, t)
        if book is not None:
            book.record(ev, f, W, g, dt)
        sqnorm[k] = np.mean(np.sum(Ds * Ds, axis=(1, 2)))
        if spec.kind == "frozen":
            Ds_next = Ds
        else:
            Ds_next = Ds + f * dt
            if noisy:
                Ds_next = Ds_next + g * W
        if update_order == "tokens_first":
            v = ev.velocity
        else:
            v = evaluate_field(X, Ds_next).velocity
        X = radial_normalize(X + dt * v)
        Ds = Ds_next
        if (k + 1) % stride == 0 or k + 1 == N:
            steps.append(k + 1)
            clouds.append(X.copy())
            ensembles.append(Ds.copy())
    sqnorm[N] = np.mean(np.sum(Ds * Ds, axis=(1, 2)))
    if book is not None:
        book.close(evaluate_field(X, Ds))
    m_theta = np.concatenate([[0.0], np.cumsum(sqnorm[:-1] * dt)])
    return Trajectory(
        dt=dt,
        steps=np.asarray(steps),
        clouds=np.asarray(clouds),
        ensembles=np.asarray(ensembles),
        ledger=book,
        m_theta=m_theta,
        meta={"seed": int(seed), "trajectory": int(trajectory), "record_stride": stride,
              "update_order": update_order, "dissipation": dissipation,
              "dissipation_sign": book.sign if book is not None else None},
    )
