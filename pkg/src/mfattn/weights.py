"""Stochastic evolution of the attention heads.

Each head matrix D follows dD = f(D, t) dt + sqrt(2 sigma2) dW with W a
symmetric matrix Brownian motion, discretized by Euler-Maruyama with
symmetrized Gaussian increments (Z + Z^T) / 2, Z ~ N(0, dt Id).

Random streams are derived from one root seed through
``SeedSequence(seed, spawn_key=(trajectory, purpose, head))`` so that every
head of every trajectory owns an independent, reproducible stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("ou", "oscillating", "frozen", "schedule")

# purpose codes of the stream derivation
STREAM_TOKENS = 0
STREAM_INIT = 1
STREAM_NOISE = 2
STREAM_AUX = 3


def rng_stream(seed, *stream_id):
    """Independent generator for ``(seed, stream_id)``; identical keys give identical draws."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream_id))
    return np.random.Generator(np.random.PCG64(ss))


def sym(Z):
    return (Z + np.swapaxes(Z, -1, -2)) / 2


@dataclass(frozen=True)
class WeightProcessSpec:
    """Drift/diffusion of the weight SDE.

    kind:
        ``ou``          f = F - D, constant target F.
        ``oscillating`` f = F_h(t) - D with the periodic 3x3 targets; phase of
                        head h (0-based) is 2 pi h / H when ``phase_spread``.
        ``frozen``      f = 0, no noise.
        ``schedule``    f = F(t) - D, F linearly interpolated between
                        ``schedule_times``.
    init:
        ``random`` draws D_0 = init_scale * sym(Z), Z ~ N(0, Id) per head;
        ``target`` starts every head at the target at t = 0.
    """

    kind: str = "ou"
    F: np.ndarray | None = None
    sigma2: float = 0.0
    phase_spread: bool = True
    schedule_times: np.ndarray | None = None
    schedule_values: np.ndarray | None = None
    init: str = "random"
    init_scale: float = 1.0
    _F: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown weight process kind {self.kind!r}; expected one of {KINDS}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be nonnegative, got {self.sigma2}")
        if self.kind == "frozen" and self.sigma2 != 0:
            raise ValueError("frozen weights cannot carry diffusion (sigma2 must be 0)")
        if self.init not in ("random", "target"):
            raise ValueError(f"init must be 'random' or 'target', got {self.init!r}")
        if self.F is not None:
            F = np.array(self.F, dtype=float)
            if F.ndim != 2 or F.shape[0] != F.shape[1]:
                raise ValueError(f"target F must be a square matrix, got shape {F.shape}")
            if np.max(np.abs(F - F.T)) > 1e-9:
                raise ValueError("target F must be symmetric")
            object.__setattr__(self, "_F", sym(F))
        if self.kind == "ou" and self._F is None:
            raise ValueError("OU weights need a target matrix F")
        if self.kind == "schedule":
            if self.schedule_times is None or self.schedule_values is None:
                raise ValueError("schedule weights need schedule_times and schedule_values")
            ts = np.asarray(self.schedule_times, dtype=float)
            vals = sym(np.asarray(self.schedule_values, dtype=float))
            if vals.ndim != 3 or len(ts) != len(vals) or np.any(np.diff(ts) <= 0):
                raise ValueError("schedule needs increasing times and one matrix per time")
            object.__setattr__(self, "schedule_times", ts)
            object.__setattr__(self, "schedule_values", vals)

    @property
    def diffusion(self):
        return float(np.sqrt(2.0 * self.sigma2))

    def phase(self, h, H):
        h = np.asarray(h, dtype=float)
        return 2.0 * np.pi * h / H if self.phase_spread else np.zeros_like(h)


def oscillating_target(t, phase=0.0):
    """Periodic symmetric 3x3 target; an array of phases gives a (len, 3, 3) stack."""
    phase = np.asarray(phase, dtype=float)
    a, b = t + phase, 2.0 * t + phase
    sa, sb, cb = np.sin(a), np.sin(b), np.cos(b)
    out = np.empty(phase.shape + (3, 3))
    out[..., 0, 0] = 2.0 + 1.5 * np.cos(a)
    out[..., 1, 1] = 2.0 + 1.5 * sa
    out[..., 2, 2] = 2.0 + 1.5 * np.cos(a + np.pi / 4)
    out[..., 0, 1] = out[..., 1, 0] = sb
    out[..., 0, 2] = out[..., 2, 0] = sa
    out[..., 1, 2] = out[..., 2, 1] = cb
    return out


def _relaxed_harmonic(t, omega, phase, fn):
    # int_0^t e^{-(t-s)} fn(omega s + phase) ds, fn in {cos, sin}
    den = 1.0 + omega * omega
    c1, s1 = np.cos(omega * t + phase), np.sin(omega * t + phase)
    c0, s0 = np.cos(phase), np.sin(phase)
    decay = np.exp(-t)
    if fn == "cos":
        return ((c1 + omega * s1) - decay * (c0 + omega * s0)) / den
    return ((s1 - omega * c1) - decay * (s0 - omega * c0)) / den


def oscillating_orbit(t, phase=0.0, D0=None):
    """Exact solution of dD/dt = F(t) - D for the oscillating target."""
    const = 2.0 * (1.0 - np.exp(-t))
    ca = _relaxed_harmonic(t, 1.0, phase, "cos")
    sa = _relaxed_harmonic(t, 1.0, phase, "sin")
    sb = _relaxed_harmonic(t, 2.0, phase, "sin")
    cb = _relaxed_harmonic(t, 2.0, phase, "cos")
    c4 = _relaxed_harmonic(t, 1.0, phase + np.pi / 4, "cos")
    out = np.array([
        [const + 1.5 * ca, sb, sa],
        [sb, const + 1.5 * sa, cb],
        [sa, cb, const + 1.5 * c4],
    ])
    if D0 is not None:
        out = out + np.exp(-t) * np.asarray(D0, dtype=float)
    return out


def target(spec, t, h=0, H=1, d=None):
    """Target matrix F_h(t) the drift relaxes head ``h`` towards."""
    if spec.kind == "ou":
        return spec._F
    if spec.kind == "oscillating":
        if d is not None and d != 3:
            raise ValueError(f"oscillating targets are 3x3; cannot drive heads in dimension d={d}")
        return oscillating_target(t, spec.phase(h, H))
    if spec.kind == "schedule":
        ts, vals = spec.schedule_times, spec.schedule_values
        k = vals.shape[1]
        flat = vals.reshape(len(ts), -1)
        return np.array([np.interp(t, ts, flat[:, j]) for j in range(k * k)]).reshape(k, k)
    if d is None:
        raise ValueError("frozen weights have no target; pass d")
    return np.zeros((d, d))


def targets(spec, t, H, d):
    """Stacked targets of all heads, shape (H, d, d)."""
    if spec.kind == "oscillating":
        if d != 3:
            raise ValueError(f"oscillating targets are 3x3; cannot drive heads in dimension d={d}")
        return oscillating_target(t, spec.phase(np.arange(H), H))
    F = target(spec, t, 0, H, d)
    if F.shape != (d, d):
        raise ValueError(f"target has shape {F.shape}, heads are {d}x{d}")
    return np.broadcast_to(F, (H, d, d))


def drift(spec, D, t, h=0, H=1):
    D = np.asarray(D, dtype=float)
    if spec.kind == "frozen":
        return np.zeros_like(D)
    return target(spec, t, h, H, D.shape[0]) - D


def drift_all(spec, Ds, t):
    Ds = np.asarray(Ds, dtype=float)
    if spec.kind == "frozen":
        return np.zeros_like(Ds)
    H, d, _ = Ds.shape
    return targets(spec, t, H, d) - Ds


def symmetrized_increment(rng, d, dt):
    """One symmetric Brownian increment (Z + Z^T)/2 with Z_ij ~ N(0, dt)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    Z = rng.standard_normal((d, d)) * np.sqrt(dt)
    return (Z + Z.T) / 2


class HeadNoise:
    """Per-head Brownian increments, drawn in blocks from independent streams.

    Draws are identical to calling :func:`symmetrized_increment` step by step
    on ``rng_stream(seed, trajectory, STREAM_NOISE, h)``.
    """

    def __init__(self, seed, trajectory, H, d, block=256, heads=None):
        self.heads = list(range(H)) if heads is None else list(heads)
        self.d = d
        self.block = block
        self._rngs = [rng_stream(seed, trajectory, STREAM_NOISE, h) for h in self.heads]
        self._buf = None
        self._pos = block

    def _refill(self):
        d = self.d
        self._buf = np.stack([r.standard_normal((self.block, d, d)) for r in self._rngs], axis=1)
        self._pos = 0

    def next(self, dt):
        if self._pos >= self.block:
            self._refill()
        Z = self._buf[self._pos] * np.sqrt(dt)
        self._pos += 1
        return (Z + np.swapaxes(Z, -1, -2)) / 2


def initial_ensemble(spec, H, d, seed=0, trajectory=0, heads=None):
    heads = range(H) if heads is None else heads
    if spec.init == "target":
        return np.array(targets(spec, 0.0, H, d), dtype=float)
    out = []
    for h in heads:
        Z = rng_stream(seed, trajectory, STREAM_INIT, h).standard_normal((d, d))
        out.append(spec.init_scale * (Z + Z.T) / 2)
    return np.array(out)


def step_weights(ens, spec, t, dt, noise=None, increments=None):
    """Euler-Maruyama step of every head; ``increments`` overrides ``noise``."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    Ds = np.asarray(ens, dtype=float)
    if spec.kind == "frozen":
        return Ds.copy()
    out = Ds + drift_all(spec, Ds, t) * dt
    if spec.sigma2 > 0:
        if increments is None:
            if noise is None:
                raise ValueError("a noisy weight process needs a noise source or explicit increments")
            increments = noise.next(dt)
        out = out + spec.diffusion * increments
    return out


def m_theta_integral(ensembles, dt):
    """Running left Riemann sum of the head-averaged squared Frobenius norm.

    Returns one value per snapshot, starting from 0 at the first one.
    """
    E = np.asarray(ensembles, dtype=float)
    if E.ndim == 3:
        E = E[:, None]
    integrand = np.mean(np.sum(E * E, axis=(-1, -2)), axis=-1)
    return np.concatenate([[0.0], np.cumsum(integrand[:-1] * dt)])


def head_law_sample(spec, t, size, rng, d, D0=None):
    """i.i.d. draws of a single head's matrix at time t, shape (size, d, d).

    OU uses the exact Gaussian transition (from D0 if given, else from the
    initial law); oscillating heads take a random initial matrix and, with
    ``phase_spread``, a uniform random phase.
    """
    if spec.kind == "frozen":
        if D0 is None:
            return spec.init_scale * sym(rng.standard_normal((size, d, d)))
        return np.broadcast_to(np.asarray(D0, dtype=float), (size, d, d)).copy()
    if spec.kind == "ou":
        F = spec._F
        decay = np.exp(-t)
        if D0 is None:
            mean = F * (1.0 - decay)
            var = spec.init_scale ** 2 * decay ** 2 + spec.sigma2 * (1.0 - decay ** 2)
        else:
            mean = F + decay * (np.asarray(D0, dtype=float) - F)
            var = spec.sigma2 * (1.0 - decay ** 2)
        return mean + np.sqrt(var) * sym(rng.standard_normal((size, d, d)))
    if spec.kind == "oscillating":
        if d != 3:
            raise ValueError("oscillating targets are 3x3")
        phases = rng.uniform(0, 2 * np.pi, size) if spec.phase_spread else np.zeros(size)
        out = np.empty((size, d, d))
        for k in range(size):
            D0k = spec.init_scale * sym(rng.standard_normal((d, d))) if D0 is None else D0
            out[k] = oscillating_orbit(t, phases[k], D0k)
        return out
    raise NotImplementedError(f"no closed-form head law for kind {spec.kind!r}")
