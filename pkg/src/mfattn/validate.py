"""Fast self-checks of the numerical invariants, run by ``mfattn validate``."""

from __future__ import annotations

import itertools

import numpy as np

from .attention import attention_row, evaluate_field, head_velocity
from .diagnostics import DISSIPATION_SIGN, calibrate_dissipation_sign, w2_squared
from .dynamics import initial_cloud, simulate
from .sphere import kernel_gradient, project_tangent, radial_normalize, uniform_cloud
from .weights import WeightProcessSpec, initial_ensemble, m_theta_integral, sym


def _softmax_rows(rng):
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 12))
        X = uniform_cloud(n, 3, rng)
        D = sym(rng.standard_normal((3, 3)))
        D *= rng.uniform(0, 50) / np.linalg.norm(D, 2)
        for i in range(n):
            worst = max(worst, abs(attention_row(X, D, i).sum() - 1.0))
    return worst <= 1e-12, f"max |row sum - 1| = {worst:.2e}"


def _tangency(rng):
    X = uniform_cloud(40, 3, rng)
    Ds = np.stack([sym(rng.standard_normal((3, 3))) * 3 for _ in range(5)])
    ev = evaluate_field(X, Ds)
    worst = float(np.max(np.abs(np.sum(ev.head_velocities * X, axis=-1))))
    return worst <= 1e-10, f"max |<v, x>| = {worst:.2e}"


def _unit_norm(rng):
    spec = WeightProcessSpec(kind="ou", F=np.eye(3), sigma2=1.0)
    X0 = initial_cloud(30, 3, 1, 0)
    D0 = initial_ensemble(spec, 4, 3, 1, 0)
    traj = simulate(X0, D0, spec, 0.05, 5.0, seed=1, ledger=False)
    worst = float(np.max(np.abs(np.linalg.norm(traj.clouds, axis=-1) - 1)))
    return worst <= 1e-9, f"max |‖x‖ - 1| = {worst:.2e}"


def _kernel_fd(rng):
    worst = 0.0
    h = 1e-4
    for _ in range(50):
        x, y = uniform_cloud(2, 3, rng)
        D = sym(rng.standard_normal((3, 3)))
        g = kernel_gradient(x, y, D)
        basis = np.linalg.svd(project_tangent(x, np.eye(3)))[0][:, :2].T
        for e in basis:
            f = [np.exp(radial_normalize(x + s * h * e) @ D @ y) for s in (1, -1)]
            fd = (f[0] - f[1]) / (2 * h)
            worst = max(worst, abs(fd - g @ e) / max(1.0, abs(g @ e)))
    return worst < 1e-4, f"max relative error = {worst:.2e}"


def _w2_bruteforce(rng):
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(1, 6))
        A, B = uniform_cloud(n, 3, rng), uniform_cloud(n, 3, rng)
        brute = min(np.mean(np.sum((A - B[list(p)]) ** 2, axis=1)) for p in itertools.permutations(range(n)))
        worst = max(worst, abs(w2_squared(A, B) - brute))
    return worst <= 1e-10, f"max |assignment - brute force| = {worst:.2e}"


def _symmetry_and_determinism(rng):
    spec = WeightProcessSpec(kind="ou", F=np.eye(3), sigma2=1.0)
    X0 = initial_cloud(10, 3, 7, 0)
    D0 = initial_ensemble(spec, 3, 3, 7, 0)
    a = simulate(X0, D0, spec, 0.1, 2.0, seed=7, ledger=False)
    b = simulate(X0, D0, spec, 0.1, 2.0, seed=7, ledger=False)
    sym_ok = bool(np.all(a.ensembles == np.swapaxes(a.ensembles, -1, -2)))
    same = bool(np.array_equal(a.clouds, b.clouds) and np.array_equal(a.ensembles, b.ensembles))
    return sym_ok and same, f"symmetric={sym_ok} bit-identical={same}"


def _m_theta(rng):
    ens = np.broadcast_to(np.eye(3), (101, 1, 3, 3))
    M = m_theta_integral(ens, 0.01)
    return abs(M[-1] - 3.0) <= 1e-9, f"M(1) = {M[-1]:.12f}"


def _dissipation_sign(rng):
    X = uniform_cloud(20, 3, rng)
    Ds = np.stack([sym(rng.standard_normal((3, 3))) for _ in range(3)])
    sign = calibrate_dissipation_sign(X, Ds)
    return sign == DISSIPATION_SIGN, f"calibrated {sign:+d}, pinned {DISSIPATION_SIGN:+d}"


def _brute_velocity(rng):
    X = uniform_cloud(5, 3, rng)
    D = sym(rng.standard_normal((3, 3)))
    worst = 0.0
    for i in range(5):
        w = np.array([np.exp(X[i] @ D @ xj) for xj in X])
        ref = sum(wj * project_tangent(X[i], D @ xj) for wj, xj in zip(w, X)) / w.sum()
        worst = max(worst, float(np.max(np.abs(head_velocity(X, D, i) - ref))))
    return worst <= 1e-12, f"max deviation from double loop = {worst:.2e}"


CHECKS = {
    "softmax rows sum to one": _softmax_rows,
    "velocities are tangent": _tangency,
    "clouds stay unit-norm": _unit_norm,
    "kernel gradient vs finite differences": _kernel_fd,
    "W2 assignment vs brute force": _w2_bruteforce,
    "weights symmetric and runs deterministic": _symmetry_and_determinism,
    "M_theta of a frozen identity head": _m_theta,
    "head velocity vs double loop": _brute_velocity,
    "dissipation sign calibration": _dissipation_sign,
}


def run_checks(seed=0):
    """Return a list of (name, passed, detail)."""
    out = []
    for name, fn in CHECKS.items():
        rng = np.random.default_rng([seed, len(out)])
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
