"""Command-line entry point: ``mfattn <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .archive import provenance, read_csv, write_archive, write_csv, write_json
from .config import ConfigError, format_config, parse_config
from .dynamics import initial_cloud, simulate
from .experiments import (
    fit_power_law,
    gronwall_experiment,
    mc_sweep,
    resolve_threads,
    stability_experiment,
)
from .jko import self_convergence_study
from .validate import run_checks
from .weights import initial_ensemble

SUBCOMMANDS = ("simulate", "mc", "jko", "fit", "gronwall", "stability", "validate")

# source file -> module name used in error reports
_MODULES = {
    "sphere": "sphere_geometry",
    "attention": "attention_core",
    "weights": "weight_process",
    "dynamics": "token_dynamics",
    "diagnostics": "diagnostics",
    "jko": "jko_solver",
    "experiments": "experiments",
    "config": "cli_io",
    "archive": "cli_io",
    "cli": "cli_io",
    "validate": "cli_io",
}


def bundled_scenario(name):
    return resources.files("mfattn") / "scenarios" / f"{name}.cfg"


def load_config(path, overrides=()):
    if path is None:
        path = "ou_s2"
    p = Path(path)
    if not p.exists() and not p.suffix:
        bundled = bundled_scenario(path)
        if bundled.is_file():
            with resources.as_file(bundled) as real:
                return parse_config(real, overrides)
    return parse_config(p, overrides)


def _out_dir(args, cfg):
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(out, cfg):
    path = out / f"{cfg.name}.cfg"
    path.write_text(format_config(cfg), encoding="utf-8")
    return path


def cmd_simulate(args, cfg):
    H = args.heads or cfg.H_list[0]
    r = args.trajectory
    spec = cfg.spec
    X0 = initial_cloud(cfg.n, cfg.d, cfg.seed, r)
    D0 = initial_ensemble(spec, H, cfg.d, cfg.seed, r)
    traj = simulate(X0, D0, spec, cfg.dt, cfg.T, seed=cfg.seed, trajectory=r,
                    record_stride=cfg.stride, update_order=cfg.update_order,
                    dissipation=cfg.dissipation)
    out = _out_dir(args, cfg)
    stem = f"{cfg.name}-H{H}-r{r}"
    prov = provenance(cfg.to_dict(), cfg.seed, H=H, trajectory=r, meta=traj.meta)
    write_archive(out / f"{stem}.traj", traj, prov)
    led = traj.ledger
    arr = led.as_arrays()
    cols = ["time", "energy", "g2", "g2_weighted", "power", "cum_drift", "cum_ito",
            "cum_dissipation", "cum_martingale", "residual", "m_theta"]
    cum = {k: led.cumulative(k) for k in ("drift", "ito", "dissipation", "martingale")}
    rows = zip(traj.grid_times, arr["energy"], arr["g2"], arr["g2_weighted"], arr["power"],
               cum["drift"], cum["ito"], cum["dissipation"], cum["martingale"],
               arr["residual"], traj.m_theta)
    write_csv(out / f"{stem}-ledger.csv", cols, rows, prov)
    _echo_config(out, cfg)
    return {"archive": str(out / f"{stem}.traj"), "ledger": str(out / f"{stem}-ledger.csv"),
            "final_residual": float(arr["residual"][-1])}


def cmd_mc(args, cfg):
    report = mc_sweep(cfg, threads=resolve_threads(args.threads), cache_dir=args.cache)
    out = _out_dir(args, cfg)
    write_json(out / f"{cfg.name}-report.json", report)
    prov = provenance(cfg.to_dict(), cfg.seed, N_MC=report["N_MC"])
    rows = []
    for H, block in report["per_H"].items():
        for metric, s in block["series"].items():
            for t, m, e in zip(block["times"], s["mean"], s["se"]):
                rows.append((int(H), t, metric, m, e, block["N_MC"]))
    write_csv(out / f"{cfg.name}-series.csv", ["H", "time", "metric", "mean", "se", "N_MC"], rows, prov)
    g2_rows = [(int(H), b["g2_time_mean"]["mean"], b["g2_time_mean"]["se"], b["N_MC"])
               for H, b in report["per_H"].items()]
    write_csv(out / f"{cfg.name}-g2.csv", ["H", "mean", "se", "N_MC"], g2_rows, prov)
    _echo_config(out, cfg)
    return {"report": str(out / f"{cfg.name}-report.json"), "g2_csv": str(out / f"{cfg.name}-g2.csv"),
            "fit": report["fit"]}


def cmd_fit(args, cfg):
    if not args.input:
        raise ValueError("fit needs --input pointing at a CSV with H and mean columns")
    prov, cols, rows = read_csv(args.input)
    for c in (args.x, args.y):
        if c not in cols:
            raise ValueError(f"column {c!r} not found in {args.input} (have {cols})")
    H = [float(r[args.x]) for r in rows]
    y = [float(r[args.y]) for r in rows]
    fit = fit_power_law(H, y).to_dict()
    out = Path(args.out) if args.out else Path(args.input).parent
    out.mkdir(parents=True, exist_ok=True)
    payload = {"kind": "fit", "version": __version__, "source": str(args.input),
               "source_provenance": prov, "x": args.x, "y": args.y, "fit": fit}
    path = out / (Path(args.input).stem + "-fit.json")
    write_json(path, payload)
    return {"fit_json": str(path), "fit": fit}


def cmd_jko(args, cfg):
    j = cfg.jko
    X0 = initial_cloud(j.n, cfg.d, cfg.seed, 0)
    spec = cfg.spec
    D = initial_ensemble(spec, j.H, cfg.d, cfg.seed, 0)
    rows = self_convergence_study(X0, D, list(j.tau_list), T=j.T, ref_dt=j.reference_dt,
                                  inner_iters=j.inner_iters, mobility_mode=j.mobility_mode,
                                  coupling=j.coupling)
    out = _out_dir(args, cfg)
    prov = provenance(cfg.to_dict(), cfg.seed)
    cols = ["tau", "sup_w2", "min_slack", "min_decrease", "identity_optimal"]
    write_csv(out / f"{cfg.name}-jko.csv", cols, [[r[c] for c in cols] for r in rows], prov)
    _echo_config(out, cfg)
    return {"csv": str(out / f"{cfg.name}-jko.csv"), "rows": rows}


def cmd_gronwall(args, cfg):
    report = gronwall_experiment(cfg)
    out = _out_dir(args, cfg)
    write_json(out / f"{cfg.name}-gronwall.json", report)
    _echo_config(out, cfg)
    return {"report": str(out / f"{cfg.name}-gronwall.json"),
            "all_envelopes_hold": report["all_envelopes_hold"],
            "halving_max_dev": report["halving_max_dev"]}


def cmd_stability(args, cfg):
    report = stability_experiment(cfg)
    out = _out_dir(args, cfg)
    write_json(out / f"{cfg.name}-stability.json", report)
    _echo_config(out, cfg)
    return {"report": str(out / f"{cfg.name}-stability.json"),
            "strictly_decreasing": report["strictly_decreasing"]}


def cmd_validate(args, cfg):
    results = run_checks(seed=cfg.seed if cfg is not None else 0)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise RuntimeError(f"{len(failed)} invariant check(s) failed: {', '.join(failed)}")
    return {"checks": len(results), "failed": 0}


COMMANDS = {
    "simulate": (cmd_simulate, "token_dynamics", "simulate"),
    "mc": (cmd_mc, "experiments", "mc_sweep"),
    "fit": (cmd_fit, "experiments", "fit_power_law"),
    "jko": (cmd_jko, "jko_solver", "jko_trajectory"),
    "gronwall": (cmd_gronwall, "experiments", "gronwall_experiment"),
    "stability": (cmd_stability, "experiments", "stability_experiment"),
    "validate": (cmd_validate, "cli_io", "validate"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario file, or the name of a bundled scenario (ou_s2, osc_s2)")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--out", help="output directory (default: the config's out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable; section.key for block keys")
    common.add_argument("--threads", type=int, help="worker processes (default: $MFATTN_THREADS or 1)")

    parser = argparse.ArgumentParser(prog="mfattn", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="one trajectory: archive and ledger CSV")
    sim.add_argument("--heads", type=int, help="number of heads (default: first of H_list)")
    sim.add_argument("--trajectory", type=int, default=0, help="trajectory index within the seed")
    mc = sub.add_parser("mc", parents=[common], help="Monte Carlo sweep over H_list")
    mc.add_argument("--cache", help="directory for per-trajectory result caching")
    fit = sub.add_parser("fit", parents=[common], help="fit mean = a * H^b to a CSV")
    fit.add_argument("--input", help="CSV with H and mean columns (e.g. the mc *-g2.csv)")
    fit.add_argument("--x", default="H")
    fit.add_argument("--y", default="mean")
    for name, text in (("jko", "JKO self-convergence against the forward reference"),
                       ("gronwall", "perturbed-initial-datum robustness runs"),
                       ("stability", "head-subsampling stability runs"),
                       ("validate", "run the invariant suite")):
        sub.add_parser(name, parents=[common], help=text)
    return parser


def _locate(exc, default_module, default_op):
    """Module and operation of the innermost package frame of a traceback."""
    module, op = default_module, default_op
    for frame in traceback.extract_tb(exc.__traceback__):
        path = Path(frame.filename)
        if path.parent.name == "mfattn" and path.stem in _MODULES and path.stem != "cli":
            module, op = _MODULES[path.stem], frame.name
    return module, op


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    fn, module, op = COMMANDS[args.command]
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        result = fn(args, cfg)
    except Exception as exc:
        if isinstance(exc, ConfigError):
            module, op = "cli_io", "parse_config"
        else:
            module, op = _locate(exc, module, op)
        err = {"error": {"module": module, "operation": op, "type": type(exc).__name__,
                         "message": str(exc), "command": args.command}}
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, FileNotFoundError)) else 1
    print(json.dumps({"ok": True, "command": args.command, **_jsonable(result)}, sort_keys=True))
    return 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


if __name__ == "__main__":
    sys.exit(main())
