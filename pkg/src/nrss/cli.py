"""Command-line entry point.

Every subcommand reads one JSON config (``--config``), merges it over the
defaults for that subcommand, writes its outputs under ``--out`` and
finishes with a ``manifest.json`` that echoes the resolved config and
hashes every output file.
"""

import argparse
import copy
import json
import logging
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, io
from .em import FitOptions, fit
from .model import Hyperparams, PriorNetwork, upper_indices
from .presets import DESK_OPTIONS, DESK_PATH, scaled_preset
from .prior import marginal_coeff_density, correlation_table
from .selection import (
    Combo,
    make_grid,
    metrics,
    path_to,
    grid_search,
    split,
    stability,
    thirds,
    threshold_mb,
    resolve_workers,
    StabilityReport,
)
from .simulate import SignalSpec, detect_snp_sets, simulate_scenario

logger = logging.getLogger("nrss")

_DESK = DESK_OPTIONS.to_dict()
_PATH_H, _PATH_F = (list(x) for x in zip(*DESK_PATH))

DEFAULTS = {
    "simulate": {
        "N": 300, "n_blocks": 20, "block_size": 100, "rho": 0.7, "sigma2": 0.1,
        "prior_rule": "any-subject", "corrupt_fraction": 0.0, "detect_sets": True,
        "target_snr": None, "signal": asdict(SignalSpec()),
    },
    "blocks": {"genotypes": None, "r2_threshold": 0.02, "init_window": 100, "fraction": 0.5},
    "fit": {"data": None, "hyper": Hyperparams().to_dict(), "options": _DESK},
    "grid": {
        "data": None, "hyper": Hyperparams().to_dict(), "options": _DESK,
        "grid": {"lambda_h": _PATH_H, "lambda_f": _PATH_F, "psi": [0.0], "nu": [1.0],
                 "paired": True, "warm_start": True, "rescale": True},
        "split": {"sizes": None},
    },
    "stability": {
        "data": None, "hyper": Hyperparams().to_dict(), "options": _DESK,
        "grid": {"lambda_h": _PATH_H, "lambda_f": _PATH_F, "psi": [0.0], "nu": [1.0],
                 "paired": True, "warm_start": True, "rescale": True},
        "split": {"sizes": None},
        "stability": {"combos": None, "top_k": 1, "n_splits": 10, "train_size": None,
                      "target_fdr": 0.3, "target_ev": None},
    },
    "eval": {"data": None, "truth": None, "fit": None, "stability": None,
             "split": {"sizes": None, "subset": "test"}},
    "prior-check": {"hyper": {"lambda_f": 1.6, "lambda_h": 1.6, "psi": 0.47, "nu": 1.0},
                    "n_draws": 1000000, "n_samples": 100000, "kind": "beta",
                    "grid": {"lo": -6.0, "hi": 6.0, "n": 241}, "label": "nrss"},
    "export-plot": {"kind": None, "source": None, "label": "nrss"},
}


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _dataclass_from(cls, d, what):
    names = {f.name for f in fields(cls)}
    bad = set(d) - names
    if bad:
        raise ConfigError(f"unknown {what} keys: {sorted(bad)}")
    return cls(**d)


def _require(cfg, key):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"config key {key!r} is required")
    return cfg[key]


def _load_data(cfg):
    data, net = io.load_dataset_dir(_require(cfg, "data"))
    if net is None:
        logger.warning("no prior_network.csv found; using an empty prior network")
        net = PriorNetwork.empty(data.V)
    return data, net


def _plan(cfg, data, seed):
    sizes = cfg["split"].get("sizes") or thirds(data.N)
    return split(data.N, sizes, seed)


def _grid(cfg, opts, train=None):
    """Grid, warm-start flag, options and the lambda_h multiplier.

    With ``rescale`` the lambda_h values and the initial loading spread are
    adapted to the loading scale of ``train`` (see ``scaled_preset``).
    """
    g = cfg["grid"]
    lh = [float(x) for x in g["lambda_h"]]
    k = 1.0
    if g.get("rescale") and train is not None:
        scaled, path = scaled_preset(train, opts, [(1.0, 1.0)])
        k = path[0][0]
        opts = scaled
    grid = make_grid([x * k for x in lh], g["lambda_f"], psi=g["psi"], nu=g["nu"],
                     paired=g["paired"])
    return grid, bool(g["warm_start"]), opts, k


def _options(cfg, seed):
    d = dict(cfg["options"])
    d["seed"] = seed
    return _dataclass_from(FitOptions, d, "options")


# -- subcommands -------------------------------------------------------------

def cmd_simulate(cfg, out, seed, workers):
    sig = _dataclass_from(SignalSpec, cfg["signal"], "signal")
    sc = simulate_scenario(N=cfg["N"], n_blocks=cfg["n_blocks"], block_size=cfg["block_size"],
                           rho=cfg["rho"], signal=sig, sigma2=cfg["sigma2"],
                           prior_rule=cfg["prior_rule"], corrupt_fraction=cfg["corrupt_fraction"],
                           detect_sets=cfg["detect_sets"], seed=seed,
                           target_snr=cfg["target_snr"])
    io.save_dataset(out, sc.data, sc.prior_net)
    io.write_truth(out / "truth.csv", sc.truth)
    with open(out / "summary.json", "w") as fh:
        json.dump({"snr": io.fmt(sc.snr), "sigma2": io.fmt(sc.truth.sigma2), "Q": sc.data.Q, "N": sc.data.N, "P": sc.data.P,
                   "V": sc.data.V}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return [{"run": "simulate", "status": "ok"}]


def cmd_blocks(cfg, out, seed, workers):
    X = io.read_genotypes(_require(cfg, "genotypes"))
    labels = detect_snp_sets(X, cfg["r2_threshold"], cfg["init_window"], cfg["fraction"])
    io.write_set_map(out / "sets.csv", labels)
    return [{"run": "blocks", "status": "ok", "Q": int(labels.max()) + 1}]


def cmd_fit(cfg, out, seed, workers):
    data, net = _load_data(cfg)
    hyper = _dataclass_from(Hyperparams, cfg["hyper"], "hyper")
    opts = _options(cfg, seed)
    res = fit(data, net, hyper, opts)
    io.save_fit(out, res, hyper, opts)
    io.write_trace(out / "trace.csv", res.trace)
    return [{"run": "fit", "status": "ok", "wall_time": res.wall_time}]


def _grid_run(cfg, seed, workers):
    data, net = _load_data(cfg)
    base = _dataclass_from(Hyperparams, cfg["hyper"], "hyper")
    plan = _plan(cfg, data, seed)
    grid, warm, opts, _ = _grid(cfg, _options(cfg, seed), data.subset(plan.train))
    entries = grid_search(data, net, grid, plan, base, opts, warm, workers)
    return data, net, base, opts, grid, warm, plan, entries


def _write_ranking(out, entries):
    rows = [[k + 1, e.combo.lambda_h, e.combo.lambda_f, e.combo.psi, e.combo.nu,
             e.val_mspe, e.status] for k, e in enumerate(entries)]
    io.write_table(out / "grid.csv", ["rank", "lambda_h", "lambda_f", "psi", "nu",
                                      "validation_mspe", "status"], rows)
    return [{"run": f"combo {e.combo}", "status": e.status, "error": e.error} for e in entries]


def cmd_grid(cfg, out, seed, workers):
    data, net, base, opts, grid, warm, plan, entries = _grid_run(cfg, seed, workers)
    runs = _write_ranking(out, entries)
    best = entries[0]
    if best.status == "ok":
        io.save_fit(out / "best", best.result, best.combo.hyper(base), opts)
        io.write_trace(out / "best" / "trace.csv", best.result.trace)
    return runs


def cmd_stability(cfg, out, seed, workers):
    st = cfg["stability"]
    data, net = _load_data(cfg)
    base = _dataclass_from(Hyperparams, cfg["hyper"], "hyper")
    plan = _plan(cfg, data, seed)
    grid, warm, opts, k = _grid(cfg, _options(cfg, seed), data.subset(plan.train))
    runs = []
    if st.get("combos"):
        # given in the same units as grid.lambda_h, so rescaled alike
        combos = [Combo(c[0] * k, *c[1:]) for c in st["combos"]]
    else:
        entries = grid_search(data, net, grid, plan, base, opts, warm, workers, keep_results=False)
        runs += _write_ranking(out, entries)
        combos = [e.combo for e in entries if e.status == "ok"][:st["top_k"]]
        if not combos:
            return runs
    paths = [path_to(grid, c, warm) if c in grid else (c,) for c in combos]
    rep = stability(data, net, paths, st["n_splits"], seed, st["train_size"], base, opts, workers)
    thr, sel = threshold_mb(rep, target_ev=st["target_ev"],
                            target_fdr=None if st["target_ev"] else st["target_fdr"])
    io.write_stability(out, rep)
    io.write_table(out / "selected.csv", ["snp_id"], [[p + 1] for p in sel])
    with open(out / "threshold.json", "w") as fh:
        json.dump({"pi_thr": io.fmt(thr), "q_bar": io.fmt(rep.q_bar), "n_runs": rep.n_runs,
                   "n_selected": int(sel.size),
                   "combos": [[c.lambda_h, c.lambda_f, c.psi, c.nu] for c in combos]},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    runs.append({"run": "stability", "status": "ok", "n_runs": rep.n_runs})
    runs += [{"run": f"stability {c} split {k}", "status": "failed", "error": e}
             for c, k, e in rep.failed]
    return runs


def _read_report(d):
    d = Path(d)
    with open(d / "threshold.json") as fh:
        meta = json.load(fh)
    snp = np.loadtxt(d / "selection_snp.csv", delimiter=",", skiprows=1, ndmin=2)
    P = snp.shape[0]
    ent = np.loadtxt(d / "selection_entries.csv", delimiter=",", skiprows=1, ndmin=2)
    return snp[:, 1], ent, meta, P


def cmd_eval(cfg, out, seed, workers):
    data, _ = _load_data(cfg)
    truth = io.read_truth(_require(cfg, "truth"), data.P, data.V)
    res = {}
    if cfg.get("fit"):
        result, _ = io.load_fit(cfg["fit"])
        sub = cfg["split"].get("subset", "test")
        if sub == "all":
            test = data
        else:
            test = data.subset(getattr(_plan(cfg, data, seed), sub))
        res["fit"] = metrics(result, truth, test).to_dict()
    if cfg.get("stability"):
        pi_snp, ent, meta, P = _read_report(cfg["stability"])
        V = data.V
        E = V * (V - 1) // 2
        pi_B = np.zeros((P, E))
        if ent.size:
            iu, ju = upper_indices(V)
            eid = {(a + 1, b + 1): k for k, (a, b) in enumerate(zip(iu, ju))}
            for a, b, p, x in ent:
                pi_B[int(p) - 1, eid[(int(a), int(b))]] = x
        rep = StabilityReport(pi_B, pi_snp, float(meta["q_bar"]), int(meta["n_runs"]))
        rep.pi_thr = float(meta["pi_thr"])
        rep.selected = np.flatnonzero(pi_snp >= rep.pi_thr)
        res["stability"] = metrics(rep, truth).to_dict()
    if not res:
        raise ConfigError("eval needs 'fit' and/or 'stability'")
    with open(out / "metrics.json", "w") as fh:
        json.dump({k: {m: io.fmt(x) if isinstance(x, float) else x for m, x in v.items()}
                   for k, v in res.items()}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return [{"run": "eval", "status": "ok"}]


def cmd_prior_check(cfg, out, seed, workers):
    hyper = _dataclass_from(Hyperparams, _merge(Hyperparams().to_dict(), cfg["hyper"]), "hyper")
    rows = [[c.value, mc, an, abs(mc - an)] for c, mc, an in
            correlation_table(hyper, int(cfg["n_draws"]), seed)]
    io.write_table(out / "correlations.csv", ["case", "monte_carlo", "analytic", "abs_diff"], rows)
    g = cfg["grid"]
    grid = np.linspace(g["lo"], g["hi"], int(g["n"]))
    dens = marginal_coeff_density(hyper, grid, int(cfg["n_samples"]), seed, cfg["kind"])
    io.write_density(out / "density.csv", grid, dens.density, cfg["label"])
    return [{"run": "prior-check", "status": "ok"}]


def cmd_export_plot(cfg, out, seed, workers):
    kind = _require(cfg, "kind")
    src = Path(_require(cfg, "source"))
    if kind == "manhattan":
        if not (src / "selection_snp.csv").exists():
            raise ConfigError("manhattan export needs a stability output directory")
        pi_snp = _read_report(src)[0]
        io.write_manhattan(out / "manhattan.csv", pi_snp)
    elif kind == "trace":
        if not (src / "fit.json").exists():
            raise ConfigError("trace export needs a fit output directory")
        result, _ = io.load_fit(src)
        io.write_trace(out / "trace.csv", result.trace)
    elif kind == "density":
        if not (src / "density.csv").exists():
            raise ConfigError("density export needs a prior-check output directory")
        d = np.loadtxt(src / "density.csv", delimiter=",", skiprows=1, usecols=(0, 1), ndmin=2)
        io.write_density(out / "density.csv", d[:, 0], d[:, 1], cfg["label"])
    else:
        raise ConfigError(f"unknown plot kind {kind!r}")
    return [{"run": f"export {kind}", "status": "ok"}]


COMMANDS = {
    "simulate": cmd_simulate,
    "blocks": cmd_blocks,
    "fit": cmd_fit,
    "grid": cmd_grid,
    "stability": cmd_stability,
    "eval": cmd_eval,
    "prior-check": cmd_prior_check,
    "export-plot": cmd_export_plot,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="nrss", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: $NRSS_WORKERS or 1)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command, config, out, seed=0, workers=None):
    """Execute one subcommand; returns ``(exit_code, manifest_path)``."""
    if seed < 0 or seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    cfg = _merge(DEFAULTS[command], config)
    workers = resolve_workers(workers)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    runs = COMMANDS[command](cfg, out, seed, workers)
    wall = time.perf_counter() - t0
    ok = sum(r.get("status") == "ok" for r in runs)
    manifest = io.write_manifest(out, {"command": command, **cfg}, {"seed": seed},
                                 runs, {"total": wall}, __version__)
    return (0 if ok else 1), manifest


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    config = {}
    try:
        if args.config:
            with open(args.config) as fh:
                config = json.load(fh)
            if not isinstance(config, dict):
                raise ConfigError("config must be a JSON object")
        code, manifest = run(args.command, config, args.out, args.seed, args.workers)
    except (ConfigError, io.FormatError, ValueError, OSError) as exc:
        print(f"nrss {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
