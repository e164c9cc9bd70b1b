"""Minimizing-movement (JKO) steps for the interaction energy over particle clouds.

Each outer step approximately solves

    min_u  (1/n) sum_i w_i |u_i - p_i|^2 / (2 tau) + E(u, t_k)

over clouds u on the sphere, starting from the previous cloud p.  The
weights are w_i = 1 for the plain W2 scheme and w_i = b(p_i) (effective
mobility frozen at the previous cloud) for the mobility-weighted surrogate.
The energy is maximized by the attention flow, so the minimizing movement
and its limit flow descend it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import evaluate_field
from .diagnostics import w2, w2_squared
from .dynamics import n_steps
from .sphere import as_cloud, as_ensemble, project_tangent, radial_normalize
from .weights import HeadNoise, step_weights

COUPLINGS = ("identity", "assignment")
MOBILITY_MODES = ("constant", "softmax")
DIVERGENCE_PATIENCE = 5


class JkoDivergence(RuntimeError):
    """Inner descent increased the objective too many times in a row."""


@dataclass(frozen=True)
class JkoConfig:
    tau: float
    inner_iters: int = 50
    inner_lr: float | None = None  # None -> tau / 2
    coupling: str = "identity"
    mobility_mode: str = "constant"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.inner_iters < 1:
            raise ValueError(f"inner_iters must be >= 1, got {self.inner_iters}")
        if self.inner_lr is not None and not self.inner_lr > 0:
            raise ValueError(f"inner_lr must be positive, got {self.inner_lr}")
        if self.coupling not in COUPLINGS:
            raise ValueError(f"coupling must be one of {COUPLINGS}, got {self.coupling!r}")
        if self.mobility_mode not in MOBILITY_MODES:
            raise ValueError(f"mobility_mode must be one of {MOBILITY_MODES}, got {self.mobility_mode!r}")

    @property
    def lr(self):
        return self.tau / 2 if self.inner_lr is None else self.inner_lr


@dataclass
class JkoStep:
    cloud: np.ndarray
    objective_start: float  # J(prev) = E(prev)
    objective_end: float
    energy_prev: float
    energy_new: float
    w2_sq: float  # optimal-assignment W2^2 between the new and previous cloud
    iterations: int
    minimality_slack: float  # E(prev) - E(new) - W2^2(new, prev) / (2 tau)
    identity_optimal: bool | None = None  # only checked with coupling="assignment"

    @property
    def decrease(self):
        return self.objective_start - self.objective_end


def transport_weights(prev, Ds, mode):
    if mode == "constant":
        return np.ones(len(prev))
    return evaluate_field(prev, Ds).effective_mobility


def _objective(u, prev, Ds, w, tau):
    ev = evaluate_field(u, Ds)
    transport = float(np.mean(w * np.sum((u - prev) ** 2, axis=-1))) / (2 * tau)
    return transport + ev.energy, ev


def jko_step(prev, ens, cfg):
    """One minimizing movement from ``prev`` with the heads of time t_k.

    Projected gradient descent with a per-particle preconditioner 1/w_i;
    returns the best iterate seen.  Raises :class:`JkoDivergence` when the
    objective rises ``DIVERGENCE_PATIENCE`` times in a row.
    """
    P = as_cloud(prev)
    Ds = as_ensemble(ens, d=P.shape[1])
    tau = cfg.tau
    w = transport_weights(P, Ds, cfg.mobility_mode)

    u = P.copy()
    J, ev = _objective(u, P, Ds, w, tau)
    J0 = E0 = J
    best_J, best_u = J, u
    rises = 0
    for it in range(cfg.inner_iters):
        G = (u - P) / tau + ev.grad / w[:, None]
        u = radial_normalize(u - cfg.lr * project_tangent(u, G))
        J_new, ev = _objective(u, P, Ds, w, tau)
        rises = rises + 1 if J_new > J else 0
        if rises >= DIVERGENCE_PATIENCE:
            raise JkoDivergence(
                f"jko_step: objective increased {rises} consecutive times "
                f"(iteration {it + 1}, J={J_new:.6e}, start {J0:.6e}); reduce inner_lr"
            )
        J = J_new
        if J < best_J:
            best_J, best_u = J, u

    E_new = evaluate_field(best_u, Ds).energy
    w2sq, plan = w2_squared(best_u, P, return_plan=True)
    identity_optimal = None
    if cfg.coupling == "assignment":
        identity_cost = float(np.mean(np.sum((best_u - P) ** 2, axis=-1)))
        identity_optimal = bool(np.all(plan == np.arange(len(P))) or identity_cost <= w2sq + 1e-12)
    out = JkoStep(
        cloud=best_u,
        objective_start=J0,
        objective_end=best_J,
        energy_prev=E0,
        energy_new=E_new,
        w2_sq=w2sq,
        iterations=cfg.inner_iters,
        minimality_slack=E0 - E_new - w2sq / (2 * tau),
        identity_optimal=identity_optimal,
    )
    return out


@dataclass
class JkoTrajectory:
    tau: float
    clouds: np.ndarray  # (K+1, n, d) at t_k = k tau
    ensembles: np.ndarray  # (K+1, H, d, d)
    steps: list

    @property
    def times(self):
        return np.arange(len(self.clouds)) * self.tau

    def at(self, t):
        """Piecewise-constant interpolation: the cloud of the last step at or before t."""
        k = int(np.floor(t / self.tau + 1e-9))
        return self.clouds[min(max(k, 0), len(self.clouds) - 1)]


def jko_trajectory(cloud0, ens0, spec, cfg, T, seed=0, trajectory=0):
    """Iterate minimizing movements on t_k = k tau with heads evolved by ``spec``.

    Step k minimizes against u_{k-1} using the heads at t_k.
    """
    X = as_cloud(cloud0).copy()
    Ds = as_ensemble(ens0, d=X.shape[1]).copy()
    K = n_steps(T, cfg.tau)
    noise = HeadNoise(seed, trajectory, Ds.shape[0], Ds.shape[1]) if spec.sigma2 > 0 else None
    clouds, ensembles, steps = [X.copy()], [Ds.copy()], []
    for k in range(1, K + 1):
        Ds = step_weights(Ds, spec, (k - 1) * cfg.tau, cfg.tau, noise=noise)
        res = jko_step(X, Ds, cfg)
        X = res.cloud
        clouds.append(X.copy())
        ensembles.append(Ds.copy())
        steps.append(res)
    return JkoTrajectory(cfg.tau, np.asarray(clouds), np.asarray(ensembles), steps)


def descent_velocity(cloud, ens, mobility_mode="constant"):
    """Limit velocity of the minimizing movement: -P(grad) or -P(grad) / b."""
    X = np.asarray(cloud, dtype=float)
    Ds = np.asarray(ens, dtype=float)
    if Ds.ndim == 2:
        Ds = Ds[None]
    ev = evaluate_field(X, Ds)
    v = -project_tangent(X, ev.grad)
    if mobility_mode == "softmax":
        v = v / ev.effective_mobility[:, None]
    elif mobility_mode != "constant":
        raise ValueError(f"mobility_mode must be one of {MOBILITY_MODES}, got {mobility_mode!r}")
    return v


def gradient_flow_reference(cloud0, ens, dt, T, mobility_mode="constant", record_every=None):
    """Projected forward Euler of the descent flow with frozen heads.

    Returns (times, clouds) at every ``record_every``-th step (default: every step).
    """
    X = as_cloud(cloud0).copy()
    Ds = as_ensemble(ens, d=X.shape[1])
    N = n_steps(T, dt)
    every = 1 if record_every is None else int(record_every)
    times, clouds = [0.0], [X.copy()]
    for k in range(1, N + 1):
        X = radial_normalize(X + dt * descent_velocity(X, Ds, mobility_mode))
        if k % every == 0:
            times.append(k * dt)
            clouds.append(X.copy())
    return np.asarray(times), np.asarray(clouds)


def sup_distance_to_reference(traj, ref_times, ref_clouds):
    """sup over the JKO grid of W2(JKO cloud, reference cloud at the same time)."""
    lookup = {round(t, 9): c for t, c in zip(ref_times, ref_clouds)}
    dists = []
    for t, c in zip(traj.times, traj.clouds):
        key = round(t, 9)
        if key not in lookup:
            raise ValueError(f"reference has no snapshot at t={t}")
        dists.append(w2(c, lookup[key]))
    return float(max(dists))


def self_convergence_study(cloud0, ens, taus, T=1.0, ref_dt=1e-4, inner_iters=50,
                           mobility_mode="constant", coupling="identity"):
    """JKO trajectories for several tau against one forward-Euler reference (frozen heads)."""
    from .weights import WeightProcessSpec

    frozen = WeightProcessSpec(kind="frozen")
    grid = min(taus)
    every = int(round(grid / ref_dt))
    ref_t, ref_c = gradient_flow_reference(cloud0, ens, ref_dt, T, mobility_mode, record_every=every)
    rows = []
    for tau in taus:
        cfg = JkoConfig(tau=tau, inner_iters=inner_iters, coupling=coupling, mobility_mode=mobility_mode)
        traj = jko_trajectory(cloud0, ens, frozen, cfg, T)
        rows.append({
            "tau": float(tau),
            "sup_w2": sup_distance_to_reference(traj, ref_t, ref_c),
            "min_slack": float(min(s.minimality_slack for s in traj.steps)),
            "min_decrease": float(min(s.decrease for s in traj.steps)),
            "identity_optimal": all(s.identity_optimal is not False for s in traj.steps),
        })
    return rows
