"""Command-line entry point: ``flowcal <subcommand> ...``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
runtime failures such as a chain that never moves.  Errors go to standard
error as one JSON line.  Every subcommand writes a ``manifest-<name>.json``
next to its outputs, also when it fails.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import compare, estimate_ffs_binned, hcm2016_curve, load_constants, lookup
from .filters import FilterConfig, apply_filters, density_at_capacity
from .ingest import (IngestError, RawRecord, SiteMeta, load_records, load_sites, read_observations,
                     to_observations, write_observations, write_records, write_sites)
from .io import atomic_open, derive_seed, file_digest, write_json
from .mcmc import (ChainSet, ConfigError, ConvergenceError, LikelihoodSpec, McmcConfig, PriorSpec,
                   effective_sample_size, gelman_rubin, run_chains)
from .model import DomainError, SpeedFlowParams
from .posterior import credible_band, summarize
from .synth import GeneratorSpec, generate_arrays
from .temporal import global_temporal_report, partition_months

SUBCOMMANDS = ("synth", "filter", "calibrate", "summarize", "compare", "temporal", "run-all")
RHAT_THRESHOLD = 1.1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(1)


class Manifest:
    def __init__(self, subcommand: str, args: argparse.Namespace):
        self.subcommand = subcommand
        self.config = {k: (str(v) if isinstance(v, Path) else v)
                       for k, v in sorted(vars(args).items()) if k != "func"}
        self.inputs: dict = {}
        self.outputs: list = []
        self.seed = getattr(args, "seed", None)
        self.started = time.monotonic()
        self.error = None

    def add_input(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"input file not found: {path}")
        self.inputs[str(path)] = file_digest(path)
        return path

    def add_outputs(self, paths) -> None:
        self.outputs.extend(str(p) for p in paths)

    def write(self, directory) -> Path:
        path = Path(directory) / f"manifest-{self.subcommand}.json"
        write_json(path, {
            "tool": "flowcal",
            "version": __version__,
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "duration_s": round(time.monotonic() - self.started, 3),
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "error": self.error,
        })
        return path


# -- stages -------------------------------------------------------------------

def _mcmc_config(args, seed: int) -> McmcConfig:
    return McmcConfig(n_chains=args.chains, iterations=args.iterations, burn_in=args.burn_in,
                      thin=args.thin, seed=seed, workers=args.threads)


def _site_from_args(args) -> SiteMeta:
    return SiteMeta("SYN-1", 51.9, "E", args.highway_type, args.land_use, 3, 120.0, 90.0,
                    33.5, 20.1, 4.5, args.interval)


def cmd_synth(args, manifest: Manifest) -> None:
    out = Path(args.out)
    site = _site_from_args(args)
    k_c = density_at_capacity(site.land_use)
    truth = SpeedFlowParams(args.u_f, args.q_c, args.bp, args.alpha, k_c).validate()
    per_month_cap = 28 * 24 * 60 // site.interval_minutes
    if args.n_per_month > per_month_cap:
        raise ConfigError(f"n-per-month above {per_month_cap} does not fit in a month")
    seed = derive_seed(args.seed, "synth")
    rng = np.random.default_rng(derive_seed(args.seed, "synth/contamination"))
    records = []
    year, month = args.start_year, args.start_month
    scale = site.interval_minutes / 60.0
    for m in range(args.months):
        spec = GeneratorSpec(truth, args.sigma, args.n_per_month, seed=seed + m)
        q, u = generate_arrays(spec)
        start = datetime(year, month, 1)
        for i, (qi, ui) in enumerate(zip(q, u)):
            ts = start + timedelta(minutes=i * site.interval_minutes)
            heavy = 0
            car_speed = float(ui)
            roll = rng.random()
            if roll < args.contamination / 2:
                heavy = int(rng.integers(1, 5))
            elif roll < args.contamination * 0.75:
                # congested interval: density above capacity density
                car_speed = float(qi / (1.5 * k_c)) if qi > 0 else car_speed
            records.append(RawRecord(ts, 1, float(round(qi * scale)), float(heavy), car_speed, None))
            if rng.random() < args.contamination:
                records.append(RawRecord(ts, 2, float(round(qi * scale * 1.1)),
                                         float(rng.integers(0, 4)), float(ui) - 8.0, None))
        month += 1
        if month > 12:
            year, month = year + 1, 1
    records.sort(key=lambda r: (r.timestamp, r.lane_index))
    sites_path, records_path = out / "sites.csv", out / "records.csv"
    write_sites(sites_path, [site])
    write_records(records_path, records)
    write_json(out / "truth.json", truth.as_dict())
    manifest.add_outputs([sites_path, records_path, out / "truth.json"])


def _select_site(sites, selector):
    if not sites:
        raise IngestError("sites file has no rows")
    if selector is None:
        return sites[0]
    if selector.isdigit():
        idx = int(selector)
        if idx >= len(sites):
            raise IngestError(f"site index {idx} out of range (0..{len(sites) - 1})")
        return sites[idx]
    for s in sites:
        if s.site_id == selector:
            return s
    raise IngestError(f"no site {selector!r}; known: {[s.site_id for s in sites]}")


def cmd_filter(args, manifest: Manifest) -> None:
    site = _select_site(load_sites(manifest.add_input(args.sites)), args.site)
    records = load_records(manifest.add_input(args.records), site)
    cfg = FilterConfig(max_speed=args.max_speed)
    kept, report = apply_filters(to_observations(records, site), site, cfg)
    write_observations(args.out, kept)
    report_path = Path(args.report) if args.report else Path(args.out).with_suffix(".report.json")
    payload = report.as_dict()
    payload["site"] = site.site_id
    payload["land_use"] = site.land_use
    payload["highway_type"] = site.highway_type
    write_json(report_path, payload)
    manifest.add_outputs([args.out, report_path])


def _calibrate(data, land_use, cfg, sigma, out) -> tuple[ChainSet, list]:
    k_c = density_at_capacity(land_use)
    lik = LikelihoodSpec.fixed(sigma) if sigma else LikelihoodSpec()
    chains = run_chains(data, PriorSpec(), lik, cfg, k_c=k_c)
    paths = chains.save(out)
    rhat = gelman_rubin(chains)
    diag = {
        "rhat": rhat,
        "converged": all(r < RHAT_THRESHOLD for r in rhat.values()),
        "acceptance": [float(a) for a in chains.acceptance],
        "ess": {n: effective_sample_size(chains.traces[n]) for n in chains.names},
    }
    write_json(Path(out) / "diagnostics.json", diag)
    paths.append(Path(out) / "diagnostics.json")
    return chains, paths


def cmd_calibrate(args, manifest: Manifest) -> None:
    obs = read_observations(manifest.add_input(args.data))
    if not obs:
        raise ConfigError("no observations to calibrate")
    cfg = _mcmc_config(args, args.seed)
    _, paths = _calibrate(obs, args.land_use, cfg, args.sigma, args.out)
    manifest.add_outputs(paths)


def cmd_summarize(args, manifest: Manifest) -> None:
    chain_dir = Path(args.chains)
    manifest.add_input(chain_dir / "chains.json")
    chains = ChainSet.load(chain_dir)
    summary = summarize(chains)
    out = Path(args.out)
    paths = summary.write(out)
    band = credible_band(chains, grid_size=args.grid_size, n_draws=args.band_draws,
                         seed=derive_seed(args.seed, "band"))
    band.write_csv(out / "band.csv")
    manifest.add_outputs(paths + [out / "band.csv"])


def _summary_params(path) -> SpeedFlowParams:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    m = {name: s["mean"] for name, s in payload["params"].items()}
    return SpeedFlowParams(m["u_f"], m["q_c"], m["bp"], m["alpha"], payload["k_c"])


def cmd_compare(args, manifest: Manifest) -> None:
    params = _summary_params(manifest.add_input(args.summary))
    if args.ffs is not None:
        ffs = float(args.ffs)
        ffs_source = "given"
    elif args.data:
        ffs = float(estimate_ffs_binned(read_observations(manifest.add_input(args.data))))
        ffs_source = "binned"
    else:
        raise ConfigError("compare needs --ffs or --data to estimate the free-flow speed")
    constants = load_constants(manifest.add_input(args.constants)) if args.constants else None
    if args.scheme:
        base = lookup(args.scheme, ffs, params.k_c, constants)
    else:
        base = hcm2016_curve(ffs, args.highway_type, params.k_c, constants)
    out = Path(args.out) / "compare.json"
    write_json(out, {
        "ffs": ffs,
        "ffs_source": ffs_source,
        "baseline": {"scheme": base.scheme, "u_f": base.u_f, "q_c": base.q_c, "bp": base.bp,
                     "alpha": base.alpha, "k_c": base.k_c},
        "calibrated": params.as_dict(),
        "delta": compare(params, base),
    })
    manifest.add_outputs([out])


def cmd_temporal(args, manifest: Manifest) -> None:
    out = Path(args.out)
    per_site = {}
    for data_path in args.data:
        obs = read_observations(manifest.add_input(data_path))
        site_id = Path(data_path).stem
        slices = [s for s in partition_months(obs, args.min_obs) if s.eligible]
        if len(slices) < 2:
            raise ConfigError(f"{data_path}: fewer than 2 months with >= {args.min_obs} observations")
        monthly = {}
        for s in slices:
            cfg = _mcmc_config(args, derive_seed(args.seed, f"temporal/{site_id}/{s.label}"))
            monthly[s.label], _ = _calibrate(s.observations, args.land_use, cfg, args.sigma,
                                             out / "chains" / site_id / s.label)
        cfg = _mcmc_config(args, derive_seed(args.seed, f"temporal/{site_id}/annual"))
        annual, _ = _calibrate(obs, args.land_use, cfg, args.sigma, out / "chains" / site_id / "annual")
        per_site[site_id] = (monthly, annual)

    if args.scope == "global":
        reports = {"global": global_temporal_report(per_site, mode=args.mode,
                                                    significance=args.significance)}
    else:
        reports = {site: global_temporal_report({site: runs}, mode=args.mode,
                                                significance=args.significance, scope="site")
                   for site, runs in per_site.items()}
    write_json(out / "temporal.json", {name: r.as_dict() for name, r in reports.items()})
    with atomic_open(out / "boxplot.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "param", "min", "q25", "median", "q75", "max", "outliers"])
        first = next(iter(reports.values()))
        rows = first.boxplot_rows() if args.scope == "global" else [
            row for r in reports.values() for row in r.boxplot_rows()]
        for row in rows:
            w.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:7]] + [row[7]])
    manifest.add_outputs([out / "temporal.json", out / "boxplot.csv"])


def cmd_run_all(args, manifest: Manifest) -> None:
    out = Path(args.out)
    stages = []

    def stage(name, argv):
        code = dispatch(argv)
        stages.append({"stage": name, "exit": code})
        if code != 0:
            raise RuntimeError(f"stage {name} failed with exit code {code}")

    common = ["--seed", str(args.seed), "--threads", str(args.threads)]
    mcmc = ["--iterations", str(args.iterations), "--burn-in", str(args.burn_in),
            "--thin", str(args.thin), "--chains", str(args.chains)]
    stage("synth", ["synth", "--out", str(out / "synth"), "--months", str(args.months),
                    "--n-per-month", str(args.n_per_month), "--land-use", args.land_use,
                    "--highway-type", args.highway_type] + common)
    filtered = out / "filter" / "filtered.csv"
    stage("filter", ["filter", "--sites", str(out / "synth" / "sites.csv"),
                     "--records", str(out / "synth" / "records.csv"), "--out", str(filtered),
                     "--report", str(out / "filter" / "report.json")] + common)
    stage("calibrate", ["calibrate", "--data", str(filtered), "--land-use", args.land_use,
                        "--out", str(out / "calibrate")] + mcmc + common)
    stage("summarize", ["summarize", "--chains", str(out / "calibrate"),
                        "--out", str(out / "summarize")] + common)
    stage("compare", ["compare", "--summary", str(out / "summarize" / "summary.json"),
                      "--data", str(filtered), "--highway-type", args.highway_type,
                      "--out", str(out / "compare")] + common)
    stage("temporal", ["temporal", "--data", str(filtered), "--land-use", args.land_use,
                       "--min-obs", str(args.min_obs), "--out", str(out / "temporal")] + mcmc + common)
    manifest.config["stages"] = stages
    manifest.add_outputs(sorted(str(p) for p in out.rglob("*") if p.is_file()
                                and not p.name.startswith("manifest-run-all")))


# -- parser -------------------------------------------------------------------

def _add_mcmc_flags(p, iterations=50000, burn_in=30000):
    p.add_argument("--iterations", type=int, default=iterations)
    p.add_argument("--burn-in", type=int, default=burn_in)
    p.add_argument("--thin", type=int, default=0)
    p.add_argument("--chains", type=int, default=3)
    p.add_argument("--sigma", type=float, default=None,
                   help="fixed likelihood sigma (km/h); default: std of observed speeds")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="root seed")
    common.add_argument("--threads", type=int, default=1, help="parallel chains")
    common.add_argument("--out", required=True, help="output file or directory")

    parser = _Parser(prog="flowcal", description="Bayesian calibration of the HCM speed-flow curve.")
    parser.add_argument("--version", action="version", version=f"flowcal {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}",
                                parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic detector files")
    p.add_argument("--months", type=int, default=12)
    p.add_argument("--n-per-month", type=int, default=2000)
    p.add_argument("--start-year", type=int, default=2011)
    p.add_argument("--start-month", type=int, default=7)
    p.add_argument("--u-f", type=float, default=110.0)
    p.add_argument("--q-c", type=float, default=2300.0)
    p.add_argument("--bp", type=float, default=400.0)
    p.add_argument("--alpha", type=float, default=1.5)
    p.add_argument("--sigma", type=float, default=4.0)
    p.add_argument("--land-use", choices=("rural", "urban"), default="rural")
    p.add_argument("--highway-type", choices=("freeway", "multilane"), default="multilane")
    p.add_argument("--interval", type=int, choices=(5, 6), default=5)
    p.add_argument("--contamination", type=float, default=0.1,
                   help="share of extra records the filter must remove")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("filter", parents=[common], help="clean detector records")
    p.add_argument("--sites", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--site", default=None, help="row index or highway:km:direction id")
    p.add_argument("--max-speed", type=float, default=180.0)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("calibrate", parents=[common], help="run the MCMC calibration")
    p.add_argument("--data", required=True)
    p.add_argument("--land-use", choices=("rural", "urban"), required=True)
    _add_mcmc_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("summarize", parents=[common], help="posterior summary and credible band")
    p.add_argument("--chains", required=True, help="calibrate output directory")
    p.add_argument("--grid-size", type=int, default=101)
    p.add_argument("--band-draws", type=int, default=2000)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("compare", parents=[common], help="compare with a reference curve")
    p.add_argument("--summary", required=True)
    p.add_argument("--data", default=None, help="filtered observations for the FFS estimate")
    p.add_argument("--ffs", type=float, default=None)
    p.add_argument("--highway-type", choices=("freeway", "multilane"), default="multilane")
    p.add_argument("--scheme", default=None, help="constants scheme; default hcm2016_<type>")
    p.add_argument("--constants", default=None, help="alternative constants CSV")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("temporal", parents=[common], help="monthly vs annual KS analysis")
    p.add_argument("--data", required=True, action="append", help="filtered observations (repeatable)")
    p.add_argument("--land-use", choices=("rural", "urban"), default="rural")
    p.add_argument("--min-obs", type=int, default=2000)
    p.add_argument("--significance", type=float, default=0.01)
    p.add_argument("--mode", choices=("pools", "means"), default="pools")
    p.add_argument("--scope", choices=("site", "global"), default="global")
    _add_mcmc_flags(p)
    p.set_defaults(func=cmd_temporal)

    p = sub.add_parser("run-all", parents=[common], help="synth through temporal in one go")
    p.add_argument("--months", type=int, default=12)
    p.add_argument("--n-per-month", type=int, default=2000)
    p.add_argument("--min-obs", type=int, default=1000)
    p.add_argument("--land-use", choices=("rural", "urban"), default="rural")
    p.add_argument("--highway-type", choices=("freeway", "multilane"), default="multilane")
    _add_mcmc_flags(p)
    p.set_defaults(func=cmd_run_all)
    return parser


_VALIDATION_ERRORS = (IngestError, ConfigError, DomainError, ValueError, KeyError, FileNotFoundError)


def _manifest_dir(args) -> Path:
    out = Path(args.out)
    return out.parent if args.func is cmd_filter else out


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    manifest = Manifest(args.command, args)
    code = 0
    try:
        args.func(args, manifest)
    except ConvergenceError as exc:
        code, manifest.error = 2, {"type": type(exc).__name__, "message": str(exc)}
    except _VALIDATION_ERRORS as exc:
        code, manifest.error = 1, {"type": type(exc).__name__, "message": str(exc).strip("'\"")}
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        code, manifest.error = 2, {"type": type(exc).__name__, "message": str(exc)}
    if manifest.error:
        print(json.dumps({"error": manifest.error["type"], "message": manifest.error["message"],
                          "subcommand": args.command}), file=sys.stderr)
    try:
        manifest.write(_manifest_dir(args))
    except OSError as exc:
        print(json.dumps({"error": "ManifestError", "message": str(exc)}), file=sys.stderr)
        code = code or 2
    return code


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
