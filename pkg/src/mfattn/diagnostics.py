"""Energy, upper-gradient and transport diagnostics for token clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .attention import evaluate_field
from .sphere import as_cloud, as_ensemble, radial_normalize
from .weights import drift_all, head_law_sample

DISSIPATION_MODES = ("power", "unweighted", "weighted")

# Sign of the cumulative dissipation in the residual, pinned by
# calibrate_dissipation_sign(): the attention flow increases the energy, so
# E_T - E_0 = drift + ito + sum(dissipation) + M and the residual subtracts it.
DISSIPATION_SIGN = -1


def interaction_energy(cloud, ens):
    """(1 / (2 H n^2)) * sum_{i,j,h} exp(<x_i, D_h x_j>)."""
    X = np.asarray(cloud, dtype=float)
    Ds = np.asarray(ens, dtype=float)
    if Ds.ndim == 2:
        Ds = Ds[None]
    return evaluate_field(X, Ds).energy


def strong_upper_gradient_sq(cloud, ens, weighted=False):
    """Squared strong upper gradient of the empirical token measure.

    Unweighted: mean over tokens of |v_i|^2.  Weighted: each token's term
    is multiplied by its effective (harmonic-mean) mobility.
    """
    X = np.asarray(cloud, dtype=float)
    Ds = np.asarray(ens, dtype=float)
    if Ds.ndim == 2:
        Ds = Ds[None]
    ev = evaluate_field(X, Ds)
    return ev.g2_weighted if weighted else ev.g2


def dissipation_rate(ev, mode="power"):
    if mode == "power":
        return ev.power
    if mode == "unweighted":
        return ev.g2
    if mode == "weighted":
        return ev.g2_weighted
    raise ValueError(f"unknown dissipation mode {mode!r}; expected one of {DISSIPATION_MODES}")


@dataclass
class EnergyLedger:
    """Term-by-term record of the discrete stochastic energy balance.

    ``energy`` holds E_k at every visited state; the other term lists hold
    per-step increments evaluated at the pre-step state (x at t_k, D at t_k).
    ``g2``, ``g2_weighted`` and ``power`` are the three candidate dissipation
    rates, always recorded; ``mode`` selects which one enters the balance.
    """

    mode: str = "power"
    sign: int = DISSIPATION_SIGN
    energy: list = field(default_factory=list)
    drift: list = field(default_factory=list)
    ito: list = field(default_factory=list)
    dissipation: list = field(default_factory=list)
    martingale: list = field(default_factory=list)
    g2: list = field(default_factory=list)
    g2_weighted: list = field(default_factory=list)
    power: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in DISSIPATION_MODES:
            raise ValueError(f"unknown dissipation mode {self.mode!r}; expected one of {DISSIPATION_MODES}")
        if self.sign not in (-1, 1):
            raise ValueError("dissipation sign must be +1 or -1")

    def record(self, ev, f, increments, diffusion, dt):
        """Append the terms of one step from a field evaluation with moments."""
        H = ev.mobility.shape[0]
        n = ev.velocity.shape[0]
        if ev.moments is None:
            raise ValueError("energy ledger needs a field evaluation with moments")
        pref = 1.0 / (2.0 * H * n * n)
        self.energy.append(ev.energy)
        self.drift.append(pref * float(np.sum(f * ev.moments)) * dt)
        if increments is None or diffusion == 0.0:
            self.ito.append(0.0)
            self.martingale.append(0.0)
        else:
            increments = np.asarray(increments)
            if increments.shape[0] != H:
                raise ValueError(
                    f"got {increments.shape[0]} noise increments for {H} heads"
                )
            # E[(x_i x_j^T : g W)^2] = 2 sigma2 dt |sym(x_i x_j^T)|_F^2 = g^2 dt (1 + c_ij^2) / 2
            frob = 0.5 * (ev.kernel_sum + ev.kernel_c2_sum)
            self.ito.append(diffusion**2 * frob * dt / (4.0 * H * n * n))
            self.martingale.append(pref * diffusion * float(np.sum(increments * ev.moments)))
        self.g2.append(ev.g2)
        self.g2_weighted.append(ev.g2_weighted)
        self.power.append(ev.power)
        self.dissipation.append(dissipation_rate(ev, self.mode) * dt)

    def close(self, ev):
        """Record energy and rates of the final state (no step follows it)."""
        self.energy.append(ev.energy)
        self.g2.append(ev.g2)
        self.g2_weighted.append(ev.g2_weighted)
        self.power.append(ev.power)

    def cumulative(self, name):
        """Running sums of a term aligned with ``energy`` (0 at the first state)."""
        inc = np.asarray(getattr(self, name), dtype=float)
        out = np.concatenate([[0.0], np.cumsum(inc)])
        return out[: len(self.energy)]

    def residual(self):
        E = np.asarray(self.energy, dtype=float)
        return (
            (E - E[0])
            - self.cumulative("drift")
            - self.cumulative("ito")
            + self.sign * self.cumulative("dissipation")
            - self.cumulative("martingale")
        )

    def as_arrays(self):
        out = {name: np.asarray(getattr(self, name), dtype=float) for name in (
            "energy", "drift", "ito", "dissipation", "martingale", "g2", "g2_weighted", "power")}
        out["residual"] = self.residual()
        return out


def energy_ledger_step(ledger, cloud, ens, spec, t, dt, increments=None):
    """Evaluate the balance terms at (cloud, ens, t) and append them to ``ledger``."""
    X = np.asarray(cloud, dtype=float)
    Ds = np.asarray(ens, dtype=float)
    noisy = spec.sigma2 > 0
    ev = evaluate_field(X, Ds, moments=True, quadratic=noisy)
    ledger.record(ev, drift_all(spec, Ds, t), increments if noisy else None, spec.diffusion, dt)
    return ledger


def calibrate_dissipation_sign(cloud, ens, dt=1e-3, steps=50, mode="power"):
    """Pick the dissipation sign that makes the frozen-weight balance close.

    Runs the token flow with fixed heads and compares the energy increments
    with +rate and -rate; returns the sign (as used in the residual) with the
    smaller accumulated mismatch.
    """
    X = as_cloud(cloud)
    Ds = as_ensemble(ens, d=X.shape[1])
    energies, rates = [], []
    for _ in range(steps):
        ev = evaluate_field(X, Ds)
        energies.append(ev.energy)
        rates.append(dissipation_rate(ev, mode))
        X = radial_normalize(X + dt * ev.velocity)
    energies.append(evaluate_field(X, Ds).energy)
    dE = np.diff(energies)
    rates = np.asarray(rates) * dt
    mismatch = {s: float(np.sum(np.abs(dE + s * rates))) for s in (-1, 1)}
    return min(mismatch, key=mismatch.get)


def w2_squared(cloudA, cloudB, return_plan=False):
    """Squared 2-Wasserstein distance between two equal-size uniform clouds.

    Ground cost is the ambient (chordal) squared distance; the optimal
    permutation comes from an exact linear assignment solver.
    """
    A = np.asarray(cloudA, dtype=float)
    B = np.asarray(cloudB, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"clouds must have the same size and dimension, got {A.shape} and {B.shape}")
    cost = np.sum((A[:, None, :] - B[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    value = float(cost[rows, cols].mean())
    if return_plan:
        return value, cols
    return value


def w2(cloudA, cloudB):
    return float(np.sqrt(max(w2_squared(cloudA, cloudB), 0.0)))


@dataclass
class VarianceDecomposition:
    """Single-head velocity statistics for the i.i.d. head decomposition."""

    var_term: float
    mean_term: float
    n_samples: int
    _influence_var: np.ndarray = field(repr=False)
    _influence_mean: np.ndarray = field(repr=False)

    def predict(self, H):
        """Expected unweighted squared gradient for H i.i.d. heads."""
        return self.var_term / H + self.mean_term

    def se(self, H):
        phi = self._influence_var / H + self._influence_mean
        return float(np.std(phi, ddof=1) / np.sqrt(len(phi)))


def variance_decomposition(cloud, spec, t, n_samples, rng, D0=None):
    """Per-token variance and squared mean of one head's tangent velocity.

    Heads are drawn i.i.d. from the single-head law of ``spec`` at time t.
    Returns token-averaged ``var_term`` (unbiased sample variance) and
    ``mean_term`` (squared norm of the sample mean).
    """
    if n_samples < 2:
        raise ValueError("variance decomposition needs at least 2 head samples")
    X = np.asarray(cloud, dtype=float)
    d = X.shape[1]
    heads = head_law_sample(spec, t, n_samples, rng, d, D0=D0)
    V = evaluate_field(X, heads).head_velocities  # (N, n, d)
    mu = V.mean(axis=0)
    dev2 = np.sum((V - mu) ** 2, axis=-1)  # (N, n)
    var_term = float(np.mean(dev2.sum(axis=0) / (n_samples - 1)))
    mean_term = float(np.mean(np.sum(mu**2, axis=-1)))
    infl_var = dev2.mean(axis=1)
    infl_mean = np.mean(2.0 * np.einsum("knd,nd->kn", V, mu) - np.sum(mu**2, axis=-1), axis=1)
    return VarianceDecomposition(var_term, mean_term, n_samples, infl_var, infl_mean)
