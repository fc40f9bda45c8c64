"""Command line front end.

    horizon-bsde run --config cfg.json --out runs/x
    horizon-bsde simulate | solve-bsde | solve-rbsde | reduce-lift | verify --config cfg.json --out runs/x
    horizon-bsde report runs/x runs/y [--out summary_dir]

Each stage reads the artifacts of the previous one from ``--out`` when they
are there and writes its own.  Outputs are deterministic for a given
(config, seed): no timestamps, sorted JSON keys, fixed float formatting.
Exit status: 0 when every check passes, 1 when one fails, 2 on bad input.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
import zipfile
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (ConfigError, ExperimentConfig, RunResult, Series, TimeGrid, _paths_like, _solution_arrays,
                          problems_from, run_experiment, simulate_arrays, solution_from_arrays)
from .random_time import ModelError

REPORTS_SCHEMA = "horizon-bsde-reports/1"
MANIFEST_SCHEMA = "horizon-bsde-manifest/1"
SERIES_COLUMNS = ("t", "mean", "se", "min", "max")
STAGES = ("simulate", "solve-bsde", "solve-rbsde", "reduce-lift", "verify", "run")


def _clean(value):
    """JSON-safe copy: arrays to lists, non-finite floats to null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    return value


def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(_clean(data), sort_keys=True, indent=2) + "\n")


def _fmt(x: float) -> str:
    return "" if not math.isfinite(x) else repr(float(x))


def write_series_csv(path: Path, series: Series) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(SERIES_COLUMNS)
    for row in series.summary():
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), newline="")


def _save_npz(path: Path, arrays: dict) -> None:
    """``.npz`` readable by ``np.load``; members carry a fixed timestamp so
    equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for key, value in sorted(arrays.items()):
            info = zipfile.ZipInfo(key + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.ascontiguousarray(value), allow_pickle=False)


def _load_npz(path: Path) -> dict:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        out = Path(args.out)
    else:
        root = os.environ.get("HORIZON_BSDE_OUT", "runs")
        out = Path(root) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"
    if manifest.exists() and json.loads(manifest.read_text()).get("config_sha256") != cfg.digest():
        raise ConfigError("--out", f"{out} holds artifacts of a different configuration or seed")
    return out


def _write_manifest(out: Path, cfg: ExperimentConfig, stage: str, args) -> None:
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    files = {p.name: _sha256(p) for p in sorted(out.iterdir())
             if p.is_file() and p.name != "manifest.json"}
    stages = sorted(set(manifest.get("stages", [])) | {stage})
    manifest.update({
        "schema": MANIFEST_SCHEMA,
        "package_version": __version__,
        "config_name": cfg.name,
        "config_sha256": cfg.digest(),
        "config": cfg.data,
        "seed": cfg.seed,
        "refinements": cfg.data["grid"].get("refinements", 0),
        "seed_derivation": "numpy SeedSequence over (seed, sha256 tags); paths in fixed chunks of 4096",
        "stages": stages,
        "files": files,
    })
    _dump_json(path, manifest)


def _paths(out: Path, cfg: ExperimentConfig, threads: int) -> dict:
    path = out / "paths.npz"
    if path.exists():
        return _load_npz(path)
    arrays = simulate_arrays(cfg, threads)
    _save_npz(path, arrays)
    return arrays


def stage_simulate(cfg, out, args) -> int:
    arrays = simulate_arrays(cfg, args.threads)
    _save_npz(out / "paths.npz", arrays)
    print(f"wrote {out / 'paths.npz'} ({len(arrays)} arrays)")
    return 0


def stage_solve(cfg, out, args, reflected: bool) -> int:
    arrays = _paths(out, cfg, args.threads)
    result = {}
    for prob in problems_from(cfg, arrays, reflected=reflected):
        sol = prob.solve(cfg)
        result.update(_solution_arrays(sol, f"{prob.tag}/"))
        result[f"{prob.tag}/t"] = prob.model.grid.nodes
        print(f"{prob.tag}: Y0 = {sol.y0:.10g}")
    name = "solution_reflected.npz" if reflected else "solution.npz"
    _save_npz(out / name, result)
    print(f"wrote {out / name}")
    return 0


def stage_lift(cfg, out, args) -> int:
    arrays = _paths(out, cfg, args.threads)
    reflected = (out / "solution_reflected.npz").exists() and not (out / "solution.npz").exists()
    src = out / ("solution_reflected.npz" if reflected else "solution.npz")
    if not src.exists():
        stage_solve(cfg, out, args, reflected=False)
    stored = _load_npz(src)
    result = {}
    for prob in problems_from(cfg, arrays, reflected=reflected):
        grid = TimeGrid(np.asarray(stored[f"{prob.tag}/t"], float))
        sol = solution_from_arrays(stored, grid, f"{prob.tag}/", prob.barrier)
        lifted = prob.lift(sol)
        result.update(_solution_arrays(lifted, f"{prob.tag}/"))
        result[f"{prob.tag}/theta"] = prob.theta
        statistic = "max" if cfg.backend["kind"] == "finite-oracle" else "mean"
        rep = prob.lift_residual(lifted, statistic)
        print(f"{prob.tag}: lifted G-residual ({statistic}) = {rep.value:.3e}")
    _save_npz(out / "lift.npz", result)
    print(f"wrote {out / 'lift.npz'}")
    return 0


def write_run(out: Path, cfg: ExperimentConfig, res: RunResult) -> None:
    for name, series in sorted(res.series.items()):
        write_series_csv(out / f"series_{name}.csv", series)
    _dump_json(out / "reports.json", {
        "schema": REPORTS_SCHEMA,
        "config_name": cfg.name,
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "passed": res.passed,
        "scalars": res.scalars,
        "reports": [r.to_dict() for r in res.reports],
    })


def stage_verify(cfg, out, args, write_bundles: bool = False) -> int:
    paths = None
    if cfg.backend["kind"] == "example132":
        arrays = _paths(out, cfg, args.threads)
        paths = _paths_like(TimeGrid(np.asarray(arrays["t"], float)), arrays,
                            float(cfg.backend.get("intensity", 1.0)))
    t0 = time.perf_counter()
    res = run_experiment(cfg, args.threads, paths)
    if write_bundles:
        for key, arrays in res.bundles.items():
            if key != "paths" or not (out / "paths.npz").exists():
                _save_npz(out / f"{key}.npz", arrays)
    write_run(out, cfg, res)
    for rep in res.reports:
        print(rep)
    print(f"{sum(r.passed for r in res.reports)}/{len(res.reports)} checks passed "
          f"in {time.perf_counter() - t0:.1f}s; wrote {out / 'reports.json'}")
    return 0 if res.passed else 1


def collate(run_dirs, out: Path | None = None) -> list[dict]:
    rows = []
    for d in run_dirs:
        data = json.loads((Path(d) / "reports.json").read_text())
        if data.get("schema") != REPORTS_SCHEMA:
            raise ConfigError("$.schema", f"{d}: not a reports file of schema {REPORTS_SCHEMA}")
        for rep in data["reports"]:
            rows.append({"run": data["config_name"], "check": rep["name"], "value": rep["value"],
                         "tolerance": rep["tolerance"], "slope": rep.get("slope"),
                         "status": "PASS" if rep["passed"] else "FAIL"})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["run", "check", "value", "tolerance", "slope", "status"])
        for r in rows:
            w.writerow([r["run"], r["check"], _fmt(r["value"] if r["value"] is not None else float("nan")),
                        _fmt(r["tolerance"] if r["tolerance"] is not None else float("nan")),
                        "" if r["slope"] is None else _fmt(r["slope"]), r["status"]])
        (out / "summary.csv").write_text(buf.getvalue(), newline="")
    return rows


STAGE_HELP = {
    "simulate": "simulate and store driving paths (paths.npz)",
    "solve-bsde": "solve the configured BSDE (solution.npz)",
    "solve-rbsde": "solve the reflected BSDE against the configured barrier",
    "reduce-lift": "reduce to the reference filtration, solve and lift (lift.npz)",
    "verify": "run the configured checks (reports.json)",
    "run": "all stages in one go",
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="horizon-bsde", description="BSDEs on a random horizon: staged runs.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, help=STAGE_HELP.get(name))
        p.add_argument("--config", required=True, help="experiment configuration (JSON)")
        p.add_argument("--out", help="output directory (default $HORIZON_BSDE_OUT/<name> or runs/<name>)")
        p.add_argument("--seed", type=int, help="override the configured seed (unsigned 64-bit)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for path simulation")
        p.add_argument("--refine", type=int, help="override grid.refinements")
    p = sub.add_parser("report", help="collate reports.json of several runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="directory for summary.csv")
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "report":
            rows = collate(args.runs, Path(args.out) if args.out else None)
            width = max((len(r["check"]) for r in rows), default=10)
            for r in rows:
                slope = "" if r["slope"] is None else f" slope={r['slope']:.3f}"
                print(f"{r['status']}  {r['run']}  {r['check']:<{width}}  value={r['value']:.3e} "
                      f"tol={r['tolerance']:.1e}{slope}")
            return 0 if all(r["status"] == "PASS" for r in rows) else 1
        if args.threads < 1:
            raise ConfigError("--threads", "must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed", "must be an unsigned 64-bit integer")
        cfg = ExperimentConfig.load(args.config).with_overrides(args.seed, args.refine)
        out = _out_dir(args, cfg)
        if args.command == "simulate":
            code = stage_simulate(cfg, out, args)
        elif args.command in ("solve-bsde", "solve-rbsde"):
            code = stage_solve(cfg, out, args, reflected=args.command == "solve-rbsde")
        elif args.command == "reduce-lift":
            code = stage_lift(cfg, out, args)
        elif args.command == "verify":
            code = stage_verify(cfg, out, args)
        else:
            code = stage_verify(cfg, out, args, write_bundles=True)
        _write_manifest(out, cfg, args.command, args)
        return code
    except (ConfigError, ModelError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
