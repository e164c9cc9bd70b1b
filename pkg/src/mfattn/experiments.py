"""Monte Carlo sweeps over the head count, power-law fits, robustness and
stability experiments, and the clustering metric."""

from __future__ import annotations

import hashlib
import json
import os
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from . import __version__
from .attention import evaluate_field
from .diagnostics import DISSIPATION_SIGN, variance_decomposition, w2
from .dynamics import initial_cloud, simulate
from .sphere import radial_normalize, random_tangent
from .weights import STREAM_AUX, head_law_sample, initial_ensemble, rng_stream


def clustering_metric(cloud):
    """Mean angular distance (radians) from each token to its nearest neighbour."""
    X = np.asarray(cloud, dtype=float)
    if X.shape[0] < 2:
        raise ValueError("clustering metric needs at least 2 tokens")
    sq = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(sq, np.inf)
    chord = np.sqrt(np.min(sq, axis=1))
    # 2 arcsin(c/2) stays accurate for nearly coincident tokens, unlike arccos
    return float(np.mean(2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))))


def uniform_nn_angle_expectation(n, d=3):
    """E[nearest-neighbour angle] for n i.i.d. uniform points on S^{d-1}.

    P(angle > s) = (1 - cap(s))^{n-1} where cap(s) is the normalized area of
    a spherical cap of angular radius s.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    norm = integrate.quad(lambda a: np.sin(a) ** (d - 2), 0.0, np.pi)[0]

    def cap(s):
        return integrate.quad(lambda a: np.sin(a) ** (d - 2), 0.0, s)[0] / norm

    return integrate.quad(lambda s: (1.0 - cap(s)) ** (n - 1), 0.0, np.pi, limit=200)[0]


@dataclass(frozen=True)
class FitResult:
    a: float
    b: float
    ci_a: tuple
    ci_b: tuple
    pearson_r: float
    n_points: int

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


def fit_power_law(H_values, means, level=0.95):
    """OLS of log(mean) on log(H): mean ~ a * H^b, t-intervals with n-2 dof."""
    H = np.asarray(H_values, dtype=float)
    y = np.asarray(means, dtype=float)
    if H.shape != y.shape or H.ndim != 1:
        raise ValueError("H_values and means must be 1-D arrays of equal length")
    if len(H) < 3:
        raise ValueError(f"a power-law fit with intervals needs at least 3 points, got {len(H)}")
    if np.any(H <= 0) or np.any(y <= 0):
        raise ValueError("power-law fit needs positive H values and positive means")
    lx, ly = np.log(H), np.log(y)
    res = stats.linregress(lx, ly)
    q = stats.t.ppf(0.5 + level / 2, len(H) - 2)
    b_lo, b_hi = res.slope - q * res.stderr, res.slope + q * res.stderr
    c_lo, c_hi = res.intercept - q * res.intercept_stderr, res.intercept + q * res.intercept_stderr
    r = float(np.clip(res.rvalue, -1.0, 1.0))
    return FitResult(
        a=float(np.exp(res.intercept)),
        b=float(res.slope),
        ci_a=(float(np.exp(c_lo)), float(np.exp(c_hi))),
        ci_b=(float(b_lo), float(b_hi)),
        pearson_r=r,
        n_points=len(H),
    )


def _window_mask(times, window, T):
    t0, t1 = (0.0, T) if not window else window
    return (times >= t0 - 1e-9) & (times <= t1 + 1e-9)


def run_trajectory(cfg, H, r):
    """One seeded trajectory of the scenario with H heads; returns plain arrays."""
    spec = cfg.spec
    X0 = initial_cloud(cfg.n, cfg.d, cfg.seed, r)
    D0 = initial_ensemble(spec, H, cfg.d, cfg.seed, r)
    traj = simulate(X0, D0, spec, cfg.dt, cfg.T, seed=cfg.seed, trajectory=r,
                    record_stride=cfg.stride, update_order=cfg.update_order,
                    dissipation=cfg.dissipation)
    led = traj.ledger
    arr = led.as_arrays()
    idx = traj.steps
    grid_t = traj.grid_times
    mask = _window_mask(grid_t, cfg.g2_window, cfg.T)
    g2_key = "g2_weighted" if cfg.g2_weighted else "g2"
    series = {
        "energy": arr["energy"][idx],
        "g2": arr["g2"][idx],
        "g2_weighted": arr["g2_weighted"][idx],
        "power": arr["power"][idx],
        "residual": arr["residual"][idx],
        "cum_drift": led.cumulative("drift")[idx],
        "cum_ito": led.cumulative("ito")[idx],
        "cum_dissipation": led.cumulative("dissipation")[idx],
        "cum_martingale": led.cumulative("martingale")[idx],
        "m_theta": traj.m_theta[idx],
        "clustering": np.array([clustering_metric(c) for c in traj.clouds]) if cfg.n >= 2 else np.zeros(len(idx)),
    }
    g2_grid = arr[g2_key]
    N = len(g2_grid) - 1
    quarter = max(1, N // 4)
    return {
        "H": H,
        "trajectory": r,
        "times": traj.times,
        "series": series,
        "g2_time_mean": float(np.mean(g2_grid[mask])),
        "g2_first_quarter": float(np.mean(g2_grid[:quarter])),
        "g2_last_quarter": float(np.mean(g2_grid[-quarter:])),
        "snapshots": {"0": traj.clouds[0], "T": traj.clouds[-1]} if r == 0 else None,
    }


_KEY_EXCLUDE = ("name", "out", "N_MC", "H_list", "bootstrap", "jko", "gronwall", "stability")


def trajectory_key(cfg, H, r):
    """Content hash of everything that determines one trajectory's result."""
    relevant = {k: v for k, v in cfg.to_dict().items() if k not in _KEY_EXCLUDE}
    blob = json.dumps({"cfg": relevant, "H": H, "r": r, "version": __version__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def _run_task(args):
    cfg, H, r, cache_dir = args
    if cache_dir is None:
        return run_trajectory(cfg, H, r)
    path = Path(cache_dir) / f"traj-{trajectory_key(cfg, H, r)}.pkl"
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    res = run_trajectory(cfg, H, r)
    tmp = path.with_suffix(f".{os.getpid()}.tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(res, fh)
    os.replace(tmp, path)
    return res


def _mean_se(values, bootstrap=0, rng=None):
    v = np.asarray(values, dtype=float)
    m = v.mean(axis=0)
    if len(v) < 2:
        return m, np.full_like(m, np.nan)
    if bootstrap:
        idx = rng.integers(0, len(v), size=(bootstrap, len(v)))
        return m, v[idx].mean(axis=1).std(axis=0, ddof=1)
    return m, v.std(axis=0, ddof=1) / np.sqrt(len(v))


def _stat(values, bootstrap=0, rng=None):
    m, s = _mean_se(values, bootstrap, rng)
    return {"mean": float(m), "se": float(s)}


def resolve_threads(threads=None):
    if threads is None:
        threads = os.environ.get("MFATTN_THREADS", 1)
    threads = int(threads)
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def mc_sweep(cfg, H_list=None, N_MC=None, threads=1, cache_dir=None):
    """Monte Carlo over seeded trajectories for every H; returns a JSON-ready report.

    Trajectory r uses the streams of (cfg.seed, r) for every H, so token
    initializations are shared across head counts.  Results are reduced in
    (H, r) order whatever the execution order was.  With ``cache_dir`` each
    trajectory's summary is stored under a content hash and reused.
    """
    H_list = list(cfg.H_list if H_list is None else H_list)
    N_MC = cfg.N_MC if N_MC is None else int(N_MC)
    if N_MC < 2:
        raise ValueError(f"a Monte Carlo sweep needs N_MC >= 2, got {N_MC}")
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, H, r, cache_dir) for H in H_list for r in range(N_MC)]
    results = {}
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for res in pool.map(_run_task, tasks):
                results[(res["H"], res["trajectory"])] = res
    else:
        for task in tasks:
            res = _run_task(task)
            results[(res["H"], res["trajectory"])] = res
    return reduce_sweep(cfg, H_list, N_MC, results)


def reduce_sweep(cfg, H_list, N_MC, results):
    boot = cfg.bootstrap
    per_H = {}
    g2_means = []
    for H in H_list:
        runs = [results[(H, r)] for r in range(N_MC)]
        rng = rng_stream(cfg.seed, 0, STREAM_AUX, H) if boot else None
        times = runs[0]["times"]
        series = {}
        for key in runs[0]["series"]:
            m, s = _mean_se([run["series"][key] for run in runs], boot, rng)
            series[key] = {"mean": m.tolist(), "se": s.tolist()}
        g2_tm = _stat([run["g2_time_mean"] for run in runs], boot, rng)
        g2_means.append(g2_tm["mean"])
        clus0 = _stat([run["series"]["clustering"][0] for run in runs], boot, rng)
        clusT = _stat([run["series"]["clustering"][-1] for run in runs], boot, rng)
        snaps = runs[0]["snapshots"]
        per_H[str(H)] = {
            "N_MC": N_MC,
            "times": times.tolist(),
            "series": series,
            "g2_time_mean": g2_tm,
            "g2_time_mean_values": [run["g2_time_mean"] for run in runs],
            "g2_first_quarter": _stat([run["g2_first_quarter"] for run in runs], boot, rng),
            "g2_last_quarter": _stat([run["g2_last_quarter"] for run in runs], boot, rng),
            "clustering_t0": clus0,
            "clustering_T": clusT,
            "clustering_ratio": clusT["mean"] / clus0["mean"] if clus0["mean"] > 0 else None,
            "snapshots": {k: v.tolist() for k, v in snaps.items()} if snaps else None,
        }
    report = {
        "kind": "mc_sweep",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "N_MC": N_MC,
        "H_list": H_list,
        "se_method": f"bootstrap({boot})" if boot else "sample_sd/sqrt(N_MC)",
        "dissipation": {"mode": cfg.dissipation, "sign": DISSIPATION_SIGN},
        "ito_contraction": "2*sigma2*|sym(x_i x_j^T)|_F^2",
        "g2_variant": "weighted" if cfg.g2_weighted else "unweighted",
        "uniform_nn_angle": uniform_nn_angle_expectation(cfg.n, cfg.d) if cfg.n >= 2 else None,
        "per_H": per_H,
        "fit": None,
    }
    if len(H_list) >= 3 and all(m > 0 for m in g2_means):
        report["fit"] = fit_power_law(H_list, g2_means).to_dict()
    return report


def gronwall_experiment(cfg, eta_list=None, n_seeds=None):
    """Perturbed-initial-datum runs sharing the weight path with a base run.

    For each seed a fixed unit tangent field xi is drawn; the perturbed
    cloud is Pi(x + eta xi).  The envelope W2(t) <= W2(0) C1 exp(C2 M(t)) is
    fitted with C1 = 1 and the smallest C2 that makes it hold on the grid.
    """
    g = cfg.gronwall
    eta_list = list(g.eta_list if eta_list is None else eta_list)
    n_seeds = g.n_seeds if n_seeds is None else int(n_seeds)
    spec = cfg.spec
    out = {"kind": "gronwall", "version": __version__, "seed": cfg.seed, "config": cfg.to_dict(),
           "eta_list": eta_list, "runs": []}

    def run(X0, D0, r):
        return simulate(X0, D0, spec, g.dt, g.T, seed=cfg.seed, trajectory=r,
                        record_stride=cfg.stride, ledger=False)

    for r in range(n_seeds):
        X0 = initial_cloud(g.n, cfg.d, cfg.seed, r)
        D0 = initial_ensemble(spec, g.H, cfg.d, cfg.seed, r)
        xi = random_tangent(X0, rng_stream(cfg.seed, r, STREAM_AUX, 0))
        base = run(X0, D0, r)
        times = base.times
        M = base.m_theta[base.steps]
        early = times <= g.early_time + 1e-9
        cache = {}

        def distances(eta):
            if eta not in cache:
                pert = run(radial_normalize(X0 + eta * xi), D0, r) if eta > 0 else base
                cache[eta] = np.array([w2(a, b) for a, b in zip(pert.clouds, base.clouds)])
            return cache[eta]

        for eta in eta_list:
            W = distances(eta)
            row = {"seed_index": r, "eta": eta, "times": times.tolist(), "m_theta": M.tolist(),
                   "w2": W.tolist()}
            if eta == 0:
                row.update(C1=1.0, C2=0.0, envelope_holds=bool(np.all(W == 0)), halving_max_dev=None)
                out["runs"].append(row)
                continue
            W0 = W[0]
            pos = (M > 0) & (W > 0)
            ratios = np.log(W[pos] / W0) / M[pos] if np.any(pos) else np.array([0.0])
            C2 = max(0.0, float(np.max(ratios)))
            envelope = W0 * np.exp(C2 * M)
            holds = bool(np.all(W <= envelope * (1 + 1e-12) + 1e-15))
            half = distances(eta / 2)
            dev = np.abs(half[early] / W[early] / 0.5 - 1.0)
            row.update(C1=1.0, C2=C2, envelope=envelope.tolist(), envelope_holds=holds,
                       w2_half=half.tolist(), halving_max_dev=float(np.max(dev)))
            out["runs"].append(row)
    out["all_envelopes_hold"] = all(row["envelope_holds"] for row in out["runs"])
    devs = [row["halving_max_dev"] for row in out["runs"] if row["halving_max_dev"] is not None]
    out["halving_max_dev"] = max(devs) if devs else None
    return out


def stability_experiment(cfg, H_approx_list=None, reference_H=None, n_seeds=None):
    """Token flows driven by the first H heads of a reference pool.

    Heads, their initial draws and their Brownian increments are indexed by
    head, so an H-head run uses exactly the first H heads of the
    ``reference_H``-head run with the same seed.
    """
    s = cfg.stability
    H_list = list(s.H_approx_list if H_approx_list is None else H_approx_list)
    ref_H = s.reference_H if reference_H is None else int(reference_H)
    n_seeds = s.n_seeds if n_seeds is None else int(n_seeds)
    spec = cfg.spec
    dist = {H: [] for H in H_list}
    for r in range(n_seeds):
        X0 = initial_cloud(s.n, cfg.d, cfg.seed, r)
        pool = initial_ensemble(spec, ref_H, cfg.d, cfg.seed, r)

        def final(H):
            return simulate(X0, pool[:H], spec, s.dt, s.T, seed=cfg.seed, trajectory=r,
                            record_stride=cfg.stride, ledger=False).final_cloud

        ref = final(ref_H)
        for H in H_list:
            dist[H].append(w2(final(H), ref))
    summary = {str(H): {**_stat(dist[H]), "values": dist[H]} for H in H_list}
    means = [summary[str(H)]["mean"] for H in H_list]
    return {
        "kind": "stability",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "reference_H": ref_H,
        "n_seeds": n_seeds,
        "H_list": H_list,
        "w2": summary,
        "strictly_decreasing": bool(all(a > b for a, b in zip(means, means[1:]))),
    }


def variance_check(cloud, spec, t, H_list, n_samples, n_ensembles, seed=0, D0=None):
    """Compare fresh-ensemble MC means of G^2 with var_term / H + mean_term."""
    X = np.asarray(cloud, dtype=float)
    d = X.shape[1]
    dec = variance_decomposition(X, spec, t, n_samples, rng_stream(seed, 0, STREAM_AUX, 0), D0=D0)
    rng = rng_stream(seed, 0, STREAM_AUX, 1)
    rows = []
    for H in H_list:
        g2 = np.array([evaluate_field(X, head_law_sample(spec, t, H, rng, d, D0=D0)).g2
                       for _ in range(n_ensembles)])
        mc_mean = float(g2.mean())
        mc_se = float(g2.std(ddof=1) / np.sqrt(len(g2)))
        pred, pred_se = dec.predict(H), dec.se(H)
        se = float(np.hypot(mc_se, pred_se))
        rows.append({"H": H, "mc_mean": mc_mean, "mc_se": mc_se, "predicted": pred,
                     "predicted_se": pred_se, "z": (mc_mean - pred) / se if se > 0 else 0.0})
    return {"var_term": dec.var_term, "mean_term": dec.mean_term, "n_samples": n_samples, "rows": rows}
