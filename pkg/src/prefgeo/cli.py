"""Command-line entry point: ``prefgeo <command> [options]``.

Every command writes a manifest JSON next to its outputs (argv, resolved
configuration, package versions and output digests). ``prefgeo rerun
MANIFEST`` repeats the run and checks the digests.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io
from .config import load_config
from .design import DrawUtility, design_from_chain, select_optimal, variance_reduction_pairs
from .gp import (CovarianceSpec, NumericalError, default_bin_edges, empirical_variogram,
                 pairwise_from_coords, theoretical_variogram)
from .grid import Region, build_grid
from .inference import MODELS, posterior_summaries, run_mcmc, split_rhat
from .metrics import global_prediction_error, local_prediction_error, prediction_surface
from .simulate import PRESETS, simulate_case, simulate_dataset

log = logging.getLogger("prefgeo")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "PREFGEO_THREADS"


class UsageError(Exception):
    pass


def _manifest_for(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_suffix(".manifest.json")


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = float(value)
        except ValueError:
            raise UsageError(f"--set {key}: not a number: {value!r}") from None
    return out


# -- commands -----------------------------------------------------------------------
# each returns (outputs, resolved config, manifest path)

def cmd_simulate(args, cfg):
    seed = args.seed if args.seed is not None else (cfg.seed if cfg.seed is not None else 0)
    overrides = {**cfg.params, **_parse_set(args.set)}
    if args.preset:
        ds = simulate_case(args.preset, seed=seed, **overrides)
    elif cfg.grid:
        grid = build_grid(Region(tuple(tuple(b) for b in cfg.grid["bounds"])), tuple(cfg.grid["cells"]))
        missing = {"alpha", "beta", "mu", "sigma2", "phi", "tau2"} - set(overrides)
        if missing:
            raise ValueError(f"config params missing {sorted(missing)}")
        ds = simulate_dataset(grid, seed=seed, **overrides)
    else:
        raise UsageError("simulate needs --preset or a --config with a grid section")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    io.write_dataset(ds, out)
    log.info("simulated n=%d on %d cells", ds.n, ds.grid.cell_count)
    config = {"preset": args.preset, "seed": seed, "params": ds.params, "grid": io.grid_spec(ds.grid)}
    return [out, io.sidecar_path(out)], config, _manifest_for(out, False)


def cmd_fit(args, cfg):
    model = args.model or cfg.model or "preferential"
    if model not in MODELS:
        raise UsageError(f"--model must be one of {MODELS}")
    data = io.read_dataset(args.data)
    seed = args.seed if args.seed is not None else cfg.seed
    chain_cfg = cfg.chain_config(iterations=args.iters, burn_in=args.burnin, thin=args.thin,
                                 delta_phi=args.delta_phi, seed=seed)
    prior = cfg.prior_spec()
    chain = run_mcmc(data, model, prior, chain_cfg)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.data, out / "data.csv")
    side = io.sidecar_path(args.data)
    if side.exists():
        shutil.copyfile(side, out / "data.json")
    io.write_chain(chain, out, {"data": "data.csv"})
    io.write_summaries(posterior_summaries(chain), out / "summaries.csv")
    diag = {"split_rhat": {k: split_rhat(v) for k, v in chain.params.items()}}
    (out / "diagnostics.json").write_text(json.dumps(diag, indent=2, sort_keys=True) + "\n")
    for name, mean, lo, hi in posterior_summaries(chain):
        print(f"{name:>7} {mean:12.4f}  ({lo:.4f}, {hi:.4f})")
    outputs = [out / f for f in ("params.csv", "S.csv", "acceptance.json", "meta.json",
                                 "summaries.csv", "diagnostics.json", "data.csv")]
    if (out / "data.json").exists():
        outputs.append(out / "data.json")
    config = {"model": model, "chain": asdict(chain_cfg), "prior": asdict(prior)}
    return outputs, config, _manifest_for(out, True)


def _load_chain(path):
    chain, meta = io.read_chain(path)
    data = io.read_dataset(Path(path) / meta.get("data", "data.csv"))
    return chain, meta, data


def cmd_predict(args, cfg):
    chain, _, data = _load_chain(args.chain)
    surf = prediction_surface(chain, data.grid, args.statistic, args.scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    g = data.grid
    coords = [f"coord_{j + 1}" for j in range(g.dimension)]
    rows = [[int(g.lattice_index[i]), *map(float, g.centroids[i]),
             float(surf.point_estimate[i]), float(surf.lower[i]), float(surf.upper[i])]
            for i in range(g.cell_count)]
    io.write_table(out, ["cell_id", *coords, "estimate", "lower", "upper"], rows)
    outputs = [out]
    if args.svg:
        from .plot import field_svg
        band = (surf.lower, surf.upper) if g.dimension == 1 else None
        field_svg(g, surf.point_estimate, args.svg, f"{args.statistic} of {args.scale}", band)
        outputs.append(Path(args.svg))
    config = {"chain": str(args.chain), "statistic": args.statistic, "scale": args.scale}
    return outputs, config, _manifest_for(out, False)


def _tuple_utilities(util: DrawUtility, tuples) -> list:
    """Estimated U(d) for each visited tuple (None when too costly to compute)."""
    m = util.spec.m
    if m == 1 or util.spec.kind == "exceedance":
        single = util.table().mean(axis=0)
        return [float(np.mean(single[list(t)])) for t in tuples]
    if m == 2:
        total = np.zeros((util.n_cells, util.n_cells))
        tau2 = util.chain.params["tau2"][util.index]
        for k in range(util.n_draws):
            total += variance_reduction_pairs(util._cov(k), float(tau2[k]), util.spec.aux_cells)
        total /= util.n_draws
        return [float(total[t[0], t[1]]) for t in tuples]
    return [util.expected(t) if i < 100 else None for i, t in enumerate(tuples)]


def cmd_design(args, cfg):
    chain, _, data = _load_chain(args.chain)
    aux = None
    if args.aux_stride:
        aux = tuple(range(0, data.grid.cell_count, args.aux_stride))
    spec = cfg.utility_spec(kind=args.utility, threshold=args.x0, center_on_mu=args.center_on_mu,
                            m=args.m, aux_cells=aux)
    dcfg = cfg.design_config(steps=args.steps, burn_in=args.burnin, thin=args.thin,
                             seed=args.seed, max_draws=args.max_draws)
    sample, util = design_from_chain(chain, spec, data, dcfg)
    best = select_optimal(sample, data.grid)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = data.grid
    lat = g.lattice_index
    io.write_table(out / "design_sample.csv", ["draw_id", "component_id", "cell_id"],
                   [[i, j, int(lat[c])] for i, row in enumerate(sample.draws) for j, c in enumerate(row)])
    tuples = [t for t, _ in best.tuples]
    utils = _tuple_utilities(util, tuples)
    io.write_table(out / "histogram.csv", ["cells", "frequency", "expected_utility"],
                   [[";".join(str(int(lat[c])) for c in t), float(f), "" if u is None else float(u)]
                    for (t, f), u in zip(best.tuples, utils)])
    io.write_table(out / "cell_histogram.csv", ["cell_id", *[f"coord_{j + 1}" for j in range(g.dimension)],
                                                "frequency"],
                   [[int(lat[i]), *map(float, g.centroids[i]), float(best.cell_histogram[i])]
                    for i in range(g.cell_count)])
    report = {
        "design": [int(lat[c]) for c in best.design],
        "coordinates": [g.centroids[c].tolist() for c in best.design],
        "frequency": best.frequency,
        "tie": best.tie,
        "acceptance_rate": sample.acceptance_rate,
        "draws": len(sample.draws),
    }
    (out / "optimal.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    outputs = [out / f for f in ("design_sample.csv", "histogram.csv", "cell_histogram.csv", "optimal.json")]
    if args.svg:
        from .plot import field_svg
        field_svg(g, best.cell_histogram, args.svg, "design visit frequency")
        outputs.append(Path(args.svg))
    config = {"chain": str(args.chain), "utility": asdict(spec), "design": asdict(dcfg)}
    return outputs, config, _manifest_for(out, True)


def cmd_gpe(args, cfg):
    chain, meta, data = _load_chain(args.chain)
    if args.data:
        data = io.read_dataset(args.data)
    if data.truth_S is None:
        raise ValueError("dataset has no truth_S column; GPE needs the simulated field")
    surf = prediction_surface(chain, data.grid, args.statistic, "field")
    report = {"gpe": global_prediction_error(surf.point_estimate, data.truth_S, data.grid),
              "statistic": args.statistic, "model": chain.model, "draws": len(chain)}
    print(json.dumps(report, sort_keys=True))
    outputs = []
    out = Path(args.out) if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        outputs.append(out)
    if args.lpe:
        lpe = local_prediction_error(surf.point_estimate, data.truth_S)
        io.write_table(args.lpe, ["cell_id", "lpe"],
                       [[int(c), float(v)] for c, v in zip(data.grid.lattice_index, lpe)])
        outputs.append(Path(args.lpe))
    config = {"chain": str(args.chain), "data": args.data, "statistic": args.statistic}
    manifest = _manifest_for(out, False) if out else Path(args.chain) / "gpe.manifest.json"
    return outputs, config, manifest


def cmd_variogram(args, cfg):
    data = io.read_dataset(args.data)
    occ = data.occupied
    coords = data.grid.centroids[occ]
    edges = None
    if args.bins or args.max_dist:
        dmax = args.max_dist or pairwise_from_coords(coords).max() / 2
        edges = np.linspace(0.0, dmax, (args.bins or 15) + 1)
    else:
        edges = default_bin_edges(coords)
    emp = empirical_variogram(coords, data.y_mean, edges)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_table(out / "empirical.csv", ["distance", "semivariance", "pairs"],
                   [[float(a), float(b), int(c)] for a, b, c in emp])
    outputs = [out / "empirical.csv"]
    band = None
    if args.chain:
        chain, _ = io.read_chain(args.chain)
        h = np.linspace(0.0, float(edges[-1]), 51)
        curves = np.array([
            theoretical_variogram(h, CovarianceSpec(s2, t2, p))
            for s2, t2, p in zip(chain.params["sigma2"], chain.params["tau2"], chain.params["phi"])
        ])
        lo, med, hi = np.quantile(curves, [0.025, 0.5, 0.975], axis=0)
        band = [(float(a), float(b), float(c), float(d)) for a, b, c, d in zip(h, lo, med, hi)]
        io.write_table(out / "band.csv", ["distance", "lower", "median", "upper"], band)
        outputs.append(out / "band.csv")
    if args.svg:
        from .plot import variogram_svg
        variogram_svg(emp, band, args.svg)
        outputs.append(Path(args.svg))
    config = {"data": args.data, "chain": args.chain, "bin_edges": [float(e) for e in edges]}
    return outputs, config, _manifest_for(out, True)


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "design": cmd_design,
    "gpe": cmd_gpe,
    "variogram": cmd_variogram,
}


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prefgeo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--manifest", help="manifest path (default: next to the outputs)")
        return sp

    s = add("simulate", "simulate a dataset from a preset or config")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a model parameter")
    s.add_argument("--out", required=True)

    f = add("fit", "run the MCMC sampler")
    f.add_argument("--data", required=True)
    f.add_argument("--model", choices=MODELS)
    f.add_argument("--iters", type=int)
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--delta-phi", type=float)
    f.add_argument("--seed", type=int)
    f.add_argument("--out", required=True)

    pr = add("predict", "posterior prediction surface")
    pr.add_argument("--chain", required=True)
    pr.add_argument("--statistic", choices=("median", "mean"), default="median")
    pr.add_argument("--scale", choices=("field", "response"), default="field")
    pr.add_argument("--out", required=True)
    pr.add_argument("--svg")

    d = add("design", "sample the design pseudo-posterior")
    d.add_argument("--chain", required=True)
    d.add_argument("--utility", choices=("variance_reduction", "exceedance"))
    d.add_argument("--x0", type=float, help="exceedance threshold")
    d.add_argument("--center-on-mu", action=argparse.BooleanOptionalAction, default=None,
                   help="threshold mu + S rather than |S|")
    d.add_argument("--m", type=int, help="number of new points")
    d.add_argument("--steps", type=int)
    d.add_argument("--burnin", type=int)
    d.add_argument("--thin", type=int)
    d.add_argument("--max-draws", type=int)
    d.add_argument("--aux-stride", type=int, help="evaluate variance reduction on every k-th cell")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.add_argument("--svg")

    g = add("gpe", "global prediction error against the simulated field")
    g.add_argument("--chain", required=True)
    g.add_argument("--data", help="dataset with truth_S (default: the chain's copy)")
    g.add_argument("--statistic", choices=("median", "mean"), default="median")
    g.add_argument("--out")
    g.add_argument("--lpe", help="also write per-cell squared errors here")

    v = add("variogram", "empirical variogram and posterior band")
    v.add_argument("--data", required=True)
    v.add_argument("--chain")
    v.add_argument("--bins", type=int)
    v.add_argument("--max-dist", type=float)
    v.add_argument("--out", required=True)
    v.add_argument("--svg")

    r = sub.add_parser("rerun", help="repeat a run from its manifest and compare outputs")
    r.add_argument("manifest")
    return p


# -- driver -------------------------------------------------------------------------

@contextmanager
def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        yield None
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield n


def _run(argv: list[str]) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.command == "rerun":
        return rerun(args.manifest)
    cfg = load_config(args.config)
    with _thread_limit() as threads:
        outputs, config, manifest = COMMANDS[args.command](args, cfg)
    if args.config:
        config["config_file"] = json.loads(Path(args.config).read_text())
    config["threads"] = threads
    manifest = Path(args.manifest) if args.manifest else manifest
    io.write_manifest(manifest, args.command, argv, config, outputs, cwd=os.getcwd())
    return EXIT_OK


def rerun(manifest_path) -> int:
    """Re-execute a recorded run in its original directory and compare digests."""
    manifest = json.loads(Path(manifest_path).read_text())
    old = Path.cwd()
    os.chdir(manifest.get("cwd", old))
    try:
        code = _run(list(manifest["argv"]))
        if code != EXIT_OK:
            return code
        bad = [p for p, digest in manifest["outputs"].items() if io.file_digest(p) != digest]
    finally:
        os.chdir(old)
    for p in bad:
        print(f"mismatch: {p}", file=sys.stderr)
    print(f"{len(manifest['outputs']) - len(bad)}/{len(manifest['outputs'])} outputs identical")
    return EXIT_FAILURE if bad else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help exits 0
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"prefgeo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.ParseError, NumericalError, ValueError, KeyError, OSError, RuntimeError,
            NotImplementedError) as exc:
        print(f"prefgeo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
