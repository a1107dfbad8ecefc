"""Command line entry point: ``mvsample <command> [options]``.

Every command accepts ``--config file.toml``; explicit flags override values
from the file. Each run writes ``<primary output>.manifest.json``.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 computation error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, bundle as bnd, experiments, field, partition, posthoc
from .sampling import SamplePlan

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("mvsample")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_COMPUTE = 0, 2, 3, 4

TABLE_COLUMNS = ["scheme", "n_partitions", "reduced_mb", "norm_mv_recon_error", "min_var_rmse", "max_var_rmse"]
SWEEP_COLUMNS = [f.name for f in dataclasses.fields(experiments.RunResult)] + ["seed"]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _lookup(cfg: dict, dotted: str, default=None):
    node = cfg
    for key in dotted.split("."):
        if not isinstance(node, dict) or key not in node:
            return default
        node = node[key]
    return node


def _assign(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# flag dest -> config path
_FLAG_PATHS = {
    "input": "input.header",
    "kind": "input.synthetic.kind",
    "grid": "input.synthetic.grid",
    "d": "input.synthetic.d",
    "regions": "input.synthetic.n_regions",
    "ranks": "input.synthetic.ranks",
    "noise": "input.synthetic.noise_sigma",
    "layout": "input.synthetic.layout",
    "gen_seed": "input.synthetic.seed",
    "scheme": "partition.scheme",
    "block": "partition.block",
    "kd_qmax": "partition.kd.q_max",
    "kd_p": "partition.kd.p",
    "kd_min_dim": "partition.kd.min_dim",
    "slic_n": "partition.slic.n_superpixels",
    "slic_compactness": "partition.slic.compactness",
    "slic_iters": "partition.slic.max_iters",
    "slic_connectivity": "partition.slic.enforce_connectivity",
    "p": "reduce.p",
    "precision": "reduce.precision",
    "standardize": "reduce.standardize",
    "rate_random": "sampling.rate_random",
    "rate_feature": "sampling.rate_feature",
    "bins": "sampling.bins",
    "seed": "sampling.seed",
    "output": "output.path",
    "report": "output.report",
    "pc_map": "output.pc_map",
    "blocks": "sweep.blocks",
    "schemes": "sweep.schemes",
    "rates": "sweep.rates",
    "algorithms": "sweep.algorithms",
    "seeds": "sweep.seeds",
    "repeats": "sweep.repeats",
}


def load_config(args: argparse.Namespace) -> dict:
    cfg: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, "rb") as fh:
                cfg = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    for dest, path in _FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is not None:
            _assign(cfg, path, value)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(primary: Path, command: str, cfg: dict, extra: dict | None = None) -> Path:
    import scipy

    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seeds": {
            "sampling": _lookup(cfg, "sampling.seed"),
            "synthetic": _lookup(cfg, "input.synthetic.seed"),
            "sweep": _lookup(cfg, "sweep.seeds"),
        },
        "versions": {
            "mvsample": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    path = primary.with_name(primary.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _require(cfg: dict, dotted: str):
    value = _lookup(cfg, dotted)
    if value is None:
        raise ConfigError(f"missing required setting {dotted!r}")
    return value


def _synthetic(cfg: dict):
    syn = dict(_lookup(cfg, "input.synthetic", {}))
    kind = syn.pop("kind", "piecewise")
    if kind == "vortex":
        fld = field.gen_vortex(
            tuple(syn.get("grid", (96, 96))), seed=int(syn.get("seed", 0)), noise_sigma=float(syn.get("noise_sigma", 0.0))
        )
        return fld, None
    if kind != "piecewise":
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    known = {f.name for f in dataclasses.fields(field.SyntheticConfig)}
    unknown = set(syn) - known
    if unknown:
        raise ConfigError(f"unknown synthetic settings {sorted(unknown)}")
    gen = field.gen_synthetic(field.SyntheticConfig(**syn))
    return gen.field, gen


def load_input(cfg: dict) -> field.MultivariateField:
    header = _lookup(cfg, "input.header")
    if header:
        return field.load_field(header)
    if _lookup(cfg, "input.synthetic") is not None:
        return _synthetic(cfg)[0]
    raise ConfigError("no input: give --input <header.json> or an [input.synthetic] table")


def sample_plan(cfg: dict) -> SamplePlan:
    try:
        return SamplePlan(
            rate_random=float(_lookup(cfg, "sampling.rate_random", 0.025)),
            rate_feature=float(_lookup(cfg, "sampling.rate_feature", 0.025)),
            histogram_bins=int(_lookup(cfg, "sampling.bins", 32)),
            seed=int(_lookup(cfg, "sampling.seed", 0)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_partition(cfg: dict, fld: field.MultivariateField) -> partition.PartitionSet:
    scheme = _lookup(cfg, "partition.scheme", "regular")
    try:
        if scheme == "regular":
            block = _lookup(cfg, "partition.block", [16])
            block = list(block) * fld.grid.ndim if len(block) == 1 else list(block)
            return partition.partition_regular(fld.grid, block)
        if scheme == "kdtree":
            crit = partition.KdCriterion(
                q_max=int(_lookup(cfg, "partition.kd.q_max", 2)),
                p=float(_lookup(cfg, "partition.kd.p", 0.99)),
                min_dim=int(_lookup(cfg, "partition.kd.min_dim", 4)),
            )
            return partition.partition_kdtree(fld, crit)
        if scheme == "slic":
            params = partition.SlicParams(
                n_superpixels=int(_require(cfg, "partition.slic.n_superpixels")),
                compactness=_lookup(cfg, "partition.slic.compactness"),
                max_iters=int(_lookup(cfg, "partition.slic.max_iters", 10)),
                enforce_connectivity=bool(_lookup(cfg, "partition.slic.enforce_connectivity", True)),
            )
            return partition.partition_slic(fld, params)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"partition settings: {exc}") from None
    raise ConfigError(f"unknown partition scheme {scheme!r}; expected one of {partition.SCHEMES}")


def _output(cfg: dict, default: str | None = None) -> Path:
    out = _lookup(cfg, "output.path", default)
    if not out:
        raise ConfigError("missing output path (-o)")
    return Path(out)


def _parse_slice(text: str | None):
    if text is None:
        return None
    axis, _, index = text.partition(",")
    try:
        return int(axis), int(index)
    except ValueError:
        raise ConfigError(f"--slice expects 'axis,index', got {text!r}") from None


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args, cfg) -> int:
    out = _output(cfg)
    if _lookup(cfg, "input.synthetic") is None:
        _assign(cfg, "input.synthetic.kind", "piecewise")
    try:
        fld, gen = _synthetic(cfg)
    except field.FieldError as exc:
        raise ConfigError(str(exc)) from None
    field.save_field(fld, out, dtype=args.dtype)
    extra = {}
    if gen is not None:
        truth = out.with_name(out.stem + ".regions.bin")
        gen.region_labels.astype("<u4").tofile(truth)
        extra = {"ranks": list(gen.ranks), "region_labels": truth.name}
    write_manifest(out, "gen", cfg, extra)
    log.info("wrote %s (%s points x %d vars)", out, fld.n_points, fld.n_vars)
    return EXIT_OK


def table_row(bundle: bnd.ReducedBundle, err: posthoc.ErrorReport | None) -> dict:
    sizes = bnd.size_report(bundle)
    row = {
        "scheme": bundle.scheme,
        "n_partitions": len(bundle.parts),
        "reduced_mb": sizes["reduced_bytes"] / 2**20,
    }
    if err is not None:
        row.update(
            norm_mv_recon_error=err.norm_mv_recon_error,
            min_var_rmse=err.min_var_rmse,
            max_var_rmse=err.max_var_rmse,
        )
    return row


def cmd_reduce(args, cfg) -> int:
    fld = load_input(cfg)
    out = _output(cfg)
    pset = build_partition(cfg, fld)
    p = float(_lookup(cfg, "reduce.p", 0.999))
    precision = _lookup(cfg, "reduce.precision", "f32")
    if precision not in ("f32", "f64"):
        raise ConfigError(f"precision must be f32 or f64, got {precision!r}")
    if not 0 < p <= 1:
        raise ConfigError(f"variance target p must be in (0, 1], got {p}")
    bundle = bnd.reduce(
        fld, pset, p, sample_plan(cfg), precision,
        standardize=bool(_lookup(cfg, "reduce.standardize", False)),
        workers=args.workers,
    )
    nbytes = bnd.save_bundle(bundle, out)
    sizes = bnd.size_report(bundle)
    log.info("wrote %s: %d partitions, %d bytes (%.1fx smaller)", out, len(bundle.parts), nbytes, sizes["reduction_ratio"])

    extra = {"size_report": sizes}
    report = _lookup(cfg, "output.report")
    if report:
        err = posthoc.error_report(bundle, fld)
        row = table_row(bundle, err)
        with open(report, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
            w.writeheader()
            w.writerow(row)
        extra["table_row"] = row
    pc_map = _lookup(cfg, "output.pc_map")
    if pc_map:
        sf = partition.pc_count_map(fld, pset, p)
        k = int(sf.values.max() - sf.values.min()) + 1
        field.save_scalar_raster(sf, pc_map, _parse_slice(args.slice), f"categorical:{k}")
    write_manifest(out, "reduce", cfg, extra)
    return EXIT_OK


def cmd_query(args, cfg) -> int:
    bundle = bnd.load_bundle(args.bundle)
    try:
        q = posthoc.parse_query(args.query)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        result = posthoc.query(bundle, q)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    out = _output(cfg)
    posthoc.query_to_csv(result, bundle, out)
    if args.raster:
        sf, mask = posthoc.sample_scalar(bundle, result.indices, result.normalized)
        field.save_scalar_raster(sf, args.raster, _parse_slice(args.slice), "diverging", mask=mask)
    write_manifest(out, "query", cfg, {"bundle": str(args.bundle), "query": q, "bounds": list(result.bounds)})
    return EXIT_OK


def cmd_correlate(args, cfg) -> int:
    bundle = bnd.load_bundle(args.bundle)
    pair = _str_list(args.vars) if args.vars else []
    if pair and len(pair) != 2:
        raise ConfigError("--vars expects exactly two variable names")
    try:
        report = posthoc.correlation(bundle, *pair)
    except KeyError as exc:
        raise ConfigError(str(exc)) from None
    out = _output(cfg)
    posthoc.correlation_to_csv(report, out, *pair)
    if args.raster:
        if not pair:
            raise ConfigError("--raster needs --vars A,B")
        sf, mask = report.pair_field(bundle, *pair)
        field.save_scalar_raster(sf, args.raster, _parse_slice(args.slice), "diverging", mask=mask)
    write_manifest(out, "correlate", cfg, {"bundle": str(args.bundle), "vars": pair})
    return EXIT_OK


def cmd_reconstruct(args, cfg) -> int:
    bundle = bnd.load_bundle(args.bundle)
    rec = posthoc.reconstruct_samples(bundle)
    out = _output(cfg)
    coords = bundle.grid.coords()[rec.indices]
    axes = "xyz"[: bundle.grid.ndim]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", *axes, "partition", *bundle.var_names])
        for i, c, pid, vals in zip(rec.indices, coords, rec.partition_ids, rec.values):
            w.writerow([int(i), *map(int, c), int(pid), *(repr(float(v)) for v in vals)])
    extra = {"bundle": str(args.bundle)}
    if args.original:
        err = posthoc.error_report(bundle, field.load_field(args.original))
        row = table_row(bundle, err)
        extra["errors"] = {**row, "var_rmse": dict(zip(bundle.var_names, err.var_rmse.tolist())),
                           "degenerate_vars": list(err.degenerate_vars),
                           "norm_mv_recon_error_sampled": err.norm_mv_recon_error_sampled}
        report = _lookup(cfg, "output.report")
        if report:
            with open(report, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
                w.writeheader()
                w.writerow(row)
    write_manifest(out, "reconstruct", cfg, extra)
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    fld = load_input(cfg)
    out = _output(cfg)
    blocks = [int(b) for b in _lookup(cfg, "sweep.blocks", [8, 16, 32])]
    schemes = list(_lookup(cfg, "sweep.schemes", ["regular"]))
    rates = [float(r) for r in _lookup(cfg, "sweep.rates", [0.05])]
    algorithms = list(_lookup(cfg, "sweep.algorithms", ["combined"]))
    seeds = [int(s) for s in _lookup(cfg, "sweep.seeds", [0])]
    repeats = int(_lookup(cfg, "sweep.repeats", 3))
    p = float(_lookup(cfg, "reduce.p", 0.999))
    precision = _lookup(cfg, "reduce.precision", "f32")
    bad = set(schemes) - set(partition.SCHEMES)
    if bad:
        raise ConfigError(f"unknown schemes {sorted(bad)}")
    bad = set(algorithms) - {"random", "feature", "combined"}
    if bad:
        raise ConfigError(f"unknown sampling algorithms {sorted(bad)}")

    rows = []
    for block in blocks:
        # one matched partitioning per block size, shared by every rate/algorithm/seed
        t_part: dict = {}
        psets = experiments.matched_partitions(fld, block, tuple(schemes), timings=t_part)
        for scheme in schemes:
            pset = psets[scheme]
            for rate in rates:
                for algorithm in algorithms:
                    for seed in seeds:
                        res = experiments.evaluate_partition(
                            fld, pset, block, p=p, rate=rate, algorithm=algorithm, seed=seed,
                            precision=precision, repeats=repeats, workers=args.workers,
                            t_part=t_part[scheme],
                        )
                        rows.append({**dataclasses.asdict(res), "seed": seed})
                        log.info("block=%d scheme=%s rate=%g %s seed=%d err=%.3g size=%d",
                                 block, scheme, rate, algorithm, seed, res.norm_mv_recon_error, res.reduced_bytes)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    write_manifest(out, "sweep", cfg, {"rows": len(rows)})
    return EXIT_OK


def cmd_info(args, cfg) -> int:
    bundle = bnd.load_bundle(args.bundle)
    sizes = bnd.size_report(bundle)
    qs = [p.model.q for p in bundle.parts]
    info = {
        "header": bundle.header(),
        "size_report": sizes,
        "q_histogram": {int(k): int(v) for k, v in zip(*np.unique(qs, return_counts=True))},
    }
    json.dump(info, sys.stdout, indent=2, default=str)
    sys.stdout.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML configuration file; flags override it")
    p.add_argument("-o", "--output", help="primary output path")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker threads (default: logical cores)")
    p.add_argument("--slice", help="axis,index for rasters of 3D grids")


def _add_input(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("input")
    g.add_argument("--input", help="field header JSON")
    g.add_argument("--kind", choices=["piecewise", "vortex"], help="synthetic generator")
    g.add_argument("--grid", type=_int_list, help="synthetic grid dims, e.g. 128,128")
    g.add_argument("--d", type=int, help="synthetic variable count")
    g.add_argument("--regions", type=int, help="synthetic region count")
    g.add_argument("--ranks", type=_int_list, help="latent rank per region")
    g.add_argument("--noise", type=float, help="Gaussian noise sigma")
    g.add_argument("--layout", choices=["voronoi", "blocks"])
    g.add_argument("--gen-seed", type=int, dest="gen_seed")


def _add_reduce_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("reduction")
    g.add_argument("--p", type=float, help="variance target (default 0.999)")
    g.add_argument("--precision", choices=["f32", "f64"])
    g.add_argument("--standardize", action="store_const", const=True)
    g.add_argument("--rate-random", type=float, dest="rate_random")
    g.add_argument("--rate-feature", type=float, dest="rate_feature")
    g.add_argument("--bins", type=int)
    g.add_argument("--seed", type=int, help="sampling seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvsample", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mvsample {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic field")
    _add_common(p)
    _add_input(p)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f64")

    p = sub.add_parser("reduce", help="partition, fit, sample and write a bundle")
    _add_common(p)
    _add_input(p)
    _add_reduce_opts(p)
    g = p.add_argument_group("partitioning")
    g.add_argument("--scheme", choices=partition.SCHEMES)
    g.add_argument("--block", type=_int_list, help="block dims, e.g. 16 or 16,16")
    g.add_argument("--kd-qmax", type=int, dest="kd_qmax")
    g.add_argument("--kd-p", type=float, dest="kd_p")
    g.add_argument("--kd-min-dim", type=int, dest="kd_min_dim")
    g.add_argument("--slic-n", type=int, dest="slic_n")
    g.add_argument("--slic-compactness", type=float, dest="slic_compactness")
    g.add_argument("--slic-iters", type=int, dest="slic_iters")
    g.add_argument("--no-connectivity", action="store_const", const=False, dest="slic_connectivity")
    p.add_argument("--report", help="reduction summary CSV scored against the input")
    p.add_argument("--pc-map", dest="pc_map", help="PPM raster of per-partition component counts")

    p = sub.add_parser("query", help="multivariate query distances on a bundle")
    _add_common(p)
    p.add_argument("bundle")
    p.add_argument("--query", required=True, help="e.g. pressure=-1000,temperature=0,wind=20")
    p.add_argument("--raster", help="PPM of normalized distances at sample locations")

    p = sub.add_parser("correlate", help="per-partition correlation from a bundle")
    _add_common(p)
    p.add_argument("bundle")
    p.add_argument("--vars", help="two variable names, e.g. NO3,Fe")
    p.add_argument("--raster", help="PPM of the pairwise correlation map")

    p = sub.add_parser("reconstruct", help="reconstruct stored samples, optionally scoring them")
    _add_common(p)
    p.add_argument("bundle")
    p.add_argument("--original", help="header of the unreduced field for error metrics")
    p.add_argument("--report", help="reduction summary CSV (needs --original)")

    p = sub.add_parser("sweep", help="partition size / scheme / sampling sweep")
    _add_common(p)
    _add_input(p)
    _add_reduce_opts(p)
    p.add_argument("--blocks", type=_int_list)
    p.add_argument("--schemes", type=_str_list)
    p.add_argument("--rates", type=_float_list)
    p.add_argument("--algorithms", type=_str_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--repeats", type=int, help="timing repetitions (median reported)")

    p = sub.add_parser("info", help="print bundle header and size report")
    p.add_argument("bundle")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


COMMANDS = {
    "gen": cmd_gen,
    "reduce": cmd_reduce,
    "query": cmd_query,
    "correlate": cmd_correlate,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
    "info": cmd_info,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (OSError, field.FieldError, bnd.BundleFormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        log.error("computation error: %s", exc, exc_info=args.verbose)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())
