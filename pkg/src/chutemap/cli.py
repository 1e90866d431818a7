"""Command-line harness: map generation, evaluation, EA and MAP-Elites runs, repair.

Exit codes:

    0  success
    2  usage error (bad or missing flags, bad config values)
    3  parse error (malformed map, mapping, profile or config file)
    4  validation error (invalid map or mapping, simulation preconditions)
    5  infeasible repair bounds
    6  any other runtime failure

Every command writes ``manifest.json`` next to its outputs. Settings resolve
as command-line flag, then ``--config`` JSON key, then ``--preset`` value,
then the built-in default.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .floorplan import PRESETS, MapError, MapFormatError, MapParams, generate_map, load_map, preset_params, save_map
from .optimizer import (
    EAConfig,
    default_workers,
    derive_seed,
    ea_run,
    init_cluster,
    init_min_dist,
    map_elites_run,
)
from .repair import DEFAULT_DELTA, InfeasibleBoundsError, profile_bounds, repair_with_report
from .simulator import SimConfig, SimulationError, run
from .taskmap import (
    MappingError,
    load_mapping,
    load_profile,
    make_profile,
    measures,
    format_mapping,
    profile_to_dict,
    save_mapping,
    validate,
)

log = logging.getLogger("chutemap")

EXIT_OK, EXIT_USAGE, EXIT_PARSE, EXIT_VALIDATION, EXIT_INFEASIBLE, EXIT_RUNTIME = 0, 2, 3, 4, 5, 6
RESULT_FORMAT = "chutemap-result"
FORMAT_VERSION = 1


class UsageError(Exception):
    pass


class ParseError(Exception):
    pass


# ---------------------------------------------------------------------------
# settings and file helpers


class Settings:
    """Flag > config file > preset > default lookup."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict = {}
        if getattr(args, "config", None):
            try:
                self.file = json.loads(Path(args.config).read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ParseError(f"config {args.config}: {exc}") from exc
            if not isinstance(self.file, dict):
                raise ParseError(f"config {args.config}: top level must be an object")
        name = getattr(args, "preset", None) or self.file.get("preset")
        if name is not None and name not in PRESETS:
            raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        self.preset = PRESETS.get(name, {}) if name else {}
        self.preset_name = name
        self.used: dict = {}

    def get(self, key: str, default=None, preset_key: str | None = None):
        value = getattr(self.args, key, None)
        if value is None:
            value = self.file.get(key)
        if value is None and preset_key is not None:
            value = _dig(self.preset, preset_key)
        if value is None:
            value = default
        self.used[key] = value
        return value


def _dig(d: dict, dotted: str):
    for part in dotted.split("."):
        if not isinstance(d, dict) or part not in d:
            return None
        d = d[part]
    return d


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def write_json(path: Path, data) -> Path:
    return write_text(path, json.dumps(data, sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> Path:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row[k]) for k in columns})
    return write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: list, outputs: list[Path],
                   started: float) -> Path:
    manifest = {
        "format": "chutemap-manifest",
        "version": FORMAT_VERSION,
        "tool_version": __version__,
        "command": command,
        "config": config,
        "config_digest": config_digest(config),
        "seed": seed,
        "wall_clock_s": round(time.time() - started, 3),
        "inputs": {str(p): sha256_file(p) for p in inputs if p},
        "outputs": {str(p.relative_to(out_dir)): sha256_file(p) for p in sorted(outputs)},
    }
    return write_json(out_dir / "manifest.json", manifest)


def _load_map(path):
    try:
        return load_map(path)
    except MapFormatError as exc:
        raise ParseError(f"map {path}: {exc}") from exc


def _load_mapping(path):
    try:
        return load_mapping(path)
    except (MappingError, ValueError) as exc:
        raise ParseError(f"mapping {path}: {exc}") from exc


def _profile(settings: Settings):
    path = settings.get("profile")
    if path:
        try:
            return load_profile(path), path
        except (MappingError, KeyError, ValueError) as exc:
            raise ParseError(f"profile {path}: {exc}") from exc
    n_dest = settings.get("n_dest", preset_key="n_dest")
    if n_dest is None:
        raise UsageError("give --profile FILE or --n-dest N (or a preset)")
    return make_profile(int(n_dest)), None


def _require_seed(settings: Settings) -> int:
    seed = settings.get("seed")
    if seed is None:
        raise UsageError("--seed is required for stochastic commands")
    return int(seed)


def _sim_config(settings: Settings, seed: int, robots=None) -> SimConfig:
    base = SimConfig()
    return SimConfig(
        n_agents=int(robots if robots is not None else settings.get("robots", base.n_agents, "n_robots")),
        horizon=int(settings.get("horizon", 5000)),
        alpha=float(settings.get("alpha", base.alpha)),
        capacity=int(settings.get("capacity", base.capacity)),
        beta=float(settings.get("beta", base.beta)),
        seed=seed,
    )


def _workers(settings: Settings) -> int:
    w = settings.get("workers")
    return default_workers() if w is None else max(1, int(w))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_map(args) -> list[Path]:
    s = Settings(args)
    seed = s.get("seed", 0)
    chutes = s.get("chutes")
    if chutes is not None and args.seed is None and "seed" not in s.file:
        raise UsageError("--seed is required when --chutes removes chutes at random")
    keys = ("width", "height", "block_rows", "block_cols", "corridor", "margin", "workstation_count")
    base = preset_params(s.preset_name, seed) if s.preset_name else None
    fields = {}
    for k in keys:
        v = s.get(k, getattr(base, k) if base else None)
        if v is not None:
            fields[k] = int(v)
    if "width" not in fields or "height" not in fields:
        raise UsageError("give --preset or both --width and --height")
    params = MapParams(chute_target=None if chutes is None else int(chutes), seed=int(seed), **fields)
    fp = generate_map(params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "map.txt"]
    save_map(fp, outputs[0])
    n_dest = s.get("n_dest", preset_key="n_dest")
    if n_dest is not None:
        outputs.append(write_json(out / "profile.json", profile_to_dict(make_profile(int(n_dest)))))
    log.info("map %dx%d with %d chutes, %d workstations", fp.height, fp.width, fp.n_chutes, len(fp.workstations))
    config = {"command": "gen-map", "preset": s.preset_name, "params": asdict(params), "n_dest": n_dest}
    return outputs + [write_manifest(out, "gen-map", config, int(seed), [args.config], outputs, args._started)]


def _parse_robots(value) -> list[int]:
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    if isinstance(value, int):
        return [value]
    try:
        return [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --robots list {value!r}") from None


def cmd_evaluate(args) -> list[Path]:
    s = Settings(args)
    seed = _require_seed(s)
    fp = _load_map(args.map)
    mapping = _load_mapping(args.mapping)
    profile, profile_path = _profile(s)
    replicates = int(s.get("replicates", 10))
    if replicates < 1:
        raise UsageError("--replicates must be >= 1")
    robots = _parse_robots(s.get("robots", 100, "n_robots"))

    problems = validate(mapping, fp.n_chutes, profile.n_dest)
    repaired = 0
    if problems:
        if not args.repair or mapping.n_chutes != fp.n_chutes or mapping.n_dest != profile.n_dest:
            raise SimulationError("invalid task mapping: " + "; ".join(problems)
                                  + ("" if args.repair else " (pass --repair to fix it first)"))
        bounds = profile_bounds(profile, fp.n_chutes, float(s.get("delta", DEFAULT_DELTA)))
        mapping, report = repair_with_report(mapping, bounds)
        repaired = report.changed
        log.warning("mapping repaired: %d chutes reassigned", repaired)

    rows, runs = [], []
    for n_a in robots:
        thr, rate = [], []
        for r in range(replicates):
            cfg = _sim_config(s, derive_seed(seed, n_a, r), robots=n_a)
            res = run(fp, mapping, profile, cfg)
            thr.append(res.throughput)
            rate.append(res.recirculation_rate)
            runs.append({"robots": n_a, "replicate": r, **res.to_dict()})
        row = {"robots": n_a, "replicates": replicates,
               "throughput_mean": float(np.mean(thr)), "throughput_se": _se(thr),
               "recirculation_mean": float(np.mean(rate)), "recirculation_se": _se(rate)}
        log.info("robots=%d throughput %.4f +/- %.4f", n_a, row["throughput_mean"], row["throughput_se"])
        rows.append(row)

    amdw, acd = measures(mapping, profile, fp)
    out = Path(args.out)
    doc = {"format": RESULT_FORMAT, "version": FORMAT_VERSION, "command": "evaluate", "seed": seed,
           "horizon": cfg.horizon, "repaired_chutes": repaired, "amdw": amdw, "acd": acd,
           "summary": rows, "runs": runs}
    outputs = [write_json(out / "result.json", doc),
               write_csv(out / "result.csv", rows, list(rows[0]))]
    if repaired:
        save_mapping(mapping, out / "repaired_mapping.txt")
        outputs.append(out / "repaired_mapping.txt")
    config = {"command": "evaluate", **s.used, "repair": bool(args.repair)}
    inputs = [args.map, args.mapping, profile_path, args.config]
    return outputs + [write_manifest(out, "evaluate", config, seed, inputs, outputs, args._started)]


def _se(values) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def _ea_config(s: Settings, seed: int, greedy_default: bool = True) -> EAConfig:
    greedy = s.get("greedy_init", greedy_default)
    return EAConfig(
        n_eval=int(s.get("n_eval", 10_000)),
        lam=int(s.get("lam", 100)),
        n_e=int(s.get("n_e", 5)),
        use_greedy_init=bool(greedy),
        seed=seed,
        workers=_workers(s),
        delta=float(s.get("delta", DEFAULT_DELTA)),
        sim=_sim_config(s, seed),
    )


def _ea_config_dict(cfg: EAConfig) -> dict:
    d = asdict(cfg)
    d.pop("workers")  # does not affect results
    return d


def cmd_optimize(args) -> list[Path]:
    s = Settings(args)
    fp = _load_map(args.map)
    profile, profile_path = _profile(s)
    out = Path(args.out)
    inputs = [args.map, profile_path, args.config]
    baseline = s.get("baseline")
    if baseline:
        init = {"min-dist": init_min_dist, "cluster": init_cluster}.get(baseline)
        if init is None:
            raise UsageError("--baseline must be min-dist or cluster")
        mapping = init(fp, profile)
        path = write_text(out / "mapping.txt", format_mapping(mapping))
        amdw, acd = measures(mapping, profile, fp)
        doc = {"format": RESULT_FORMAT, "version": FORMAT_VERSION, "command": "optimize",
               "baseline": baseline, "amdw": amdw, "acd": acd}
        outputs = [path, write_json(out / "result.json", doc)]
        config = {"command": "optimize", "baseline": baseline, "n_dest": profile.n_dest}
        return outputs + [write_manifest(out, "optimize", config, None, inputs, outputs, args._started)]

    seed = _require_seed(s)
    try:
        cfg = _ea_config(s, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = ea_run(fp, profile, cfg, progress=_progress("generation"))
    best = res.best
    doc = {"format": RESULT_FORMAT, "version": FORMAT_VERSION, "command": "optimize", "seed": seed,
           "best_objective": best.objective, "best_origin": best.origin,
           "best_recirculation_rate": best.recirculation_rate,
           "best_amdw": best.measures[0], "best_acd": best.measures[1], "n_evals": res.n_evals,
           "initial": [{"origin": c.origin, "objective": c.objective} for c in res.initial
                       if c.origin != "sampled"]}
    outputs = [write_text(out / "mapping.txt", format_mapping(best.mapping)),
               write_json(out / "result.json", doc),
               write_csv(out / "history.csv", res.history, list(res.history[0]))]
    config = {"command": "optimize", "ea": _ea_config_dict(cfg), "n_dest": profile.n_dest}
    return outputs + [write_manifest(out, "optimize", config, seed, inputs, outputs, args._started)]


def _parse_resolution(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        parts = list(text)
    else:
        parts = str(text).lower().split("x")
    try:
        a, b = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"bad --resolution {text!r}; expected AxB such as 25x25") from None
    if a < 1 or b < 1:
        raise UsageError("resolution must be positive")
    return a, b


def cmd_qd(args) -> list[Path]:
    s = Settings(args)
    seed = _require_seed(s)
    fp = _load_map(args.map)
    profile, profile_path = _profile(s)
    resolution = _parse_resolution(s.get("resolution", "25x25"))
    try:
        cfg = _ea_config(s, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = map_elites_run(fp, profile, cfg, resolution=resolution, progress=_progress("batch"))
    out = Path(args.out)
    rows, outputs = [], []
    for cell in res.archive.occupied():
        c = res.archive.cells[cell]
        name = f"elites/cell_{cell[0]:03d}_{cell[1]:03d}.txt"
        outputs.append(write_text(out / name, format_mapping(c.mapping)))
        rows.append({"cell_x": cell[0], "cell_y": cell[1], "amdw": c.measures[0], "acd": c.measures[1],
                     "objective": c.objective, "mapping": name})
    columns = ["cell_x", "cell_y", "amdw", "acd", "objective", "mapping"]
    doc = {"format": "chutemap-archive", "version": FORMAT_VERSION, "seed": seed,
           "resolution": list(resolution), "bounds": [list(b) for b in res.archive.bounds],
           "qd_score": res.archive.qd_score(), "n_evals": res.n_evals, "cells": rows}
    outputs += [write_csv(out / "archive.csv", rows, columns),
                write_json(out / "archive.json", doc),
                write_csv(out / "history.csv", res.history, list(res.history[0]))]
    config = {"command": "qd", "ea": _ea_config_dict(cfg), "resolution": list(resolution),
              "n_dest": profile.n_dest}
    inputs = [args.map, profile_path, args.config]
    return outputs + [write_manifest(out, "qd", config, seed, inputs, outputs, args._started)]


def cmd_repair(args) -> list[Path]:
    s = Settings(args)
    fp = _load_map(args.map)
    mapping = _load_mapping(args.mapping)
    profile, profile_path = _profile(s)
    if mapping.n_chutes != fp.n_chutes or mapping.n_dest != profile.n_dest:
        raise SimulationError(f"mapping shape (M={mapping.n_chutes}, N={mapping.n_dest}) does not match "
                              f"map and profile (M={fp.n_chutes}, N={profile.n_dest})")
    delta = float(s.get("delta", DEFAULT_DELTA))
    bounds = profile_bounds(profile, fp.n_chutes, delta)
    fixed, report = repair_with_report(mapping, bounds)
    out = Path(args.out)
    doc = {"format": RESULT_FORMAT, "version": FORMAT_VERSION, "command": "repair", "delta": delta,
           "changed_chutes": report.changed, "bounds": bounds.tolist(),
           "counts_before": report.counts_before.tolist(), "counts_after": report.counts_after.tolist()}
    outputs = [write_text(out / "mapping.txt", format_mapping(fixed)), write_json(out / "result.json", doc)]
    log.info("repair changed %d chutes", report.changed)
    config = {"command": "repair", "delta": delta, "n_dest": profile.n_dest}
    inputs = [args.map, args.mapping, profile_path, args.config]
    return outputs + [write_manifest(out, "repair", config, None, inputs, outputs, args._started)]


def _progress(key: str):
    def report(row):
        log.info("%s %d evals=%d %s", key, row[key], row["evals_used"],
                 " ".join(f"{k}={v:.4g}" for k, v in row.items() if isinstance(v, float)))
    return report


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, seed_help: str = "RNG seed (required)") -> None:
    p.add_argument("--config", help="JSON file with default settings")
    p.add_argument("--preset", help=f"built-in setup: {', '.join(PRESETS)}")
    p.add_argument("--seed", type=int, help=seed_help)
    p.add_argument("--out", required=True, help="output directory")


def _profile_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--profile", help="destination profile JSON (from gen-map)")
    g.add_argument("--n-dest", dest="n_dest", type=int, help="build a 7:2:1 profile with N destinations")


def _sim_args(p: argparse.ArgumentParser, robots_type=int) -> None:
    helptext = "robot count, or a comma list to sweep" if robots_type is str else "number of robots"
    p.add_argument("--robots", type=robots_type, help=helptext)
    p.add_argument("--horizon", "--n-t", dest="horizon", type=int, help="timesteps per simulation (default 5000)")
    p.add_argument("--alpha", type=float, help="congestion weight in target assignment (default 8)")
    p.add_argument("--capacity", type=int, help="packages before a chute closes (default 50)")
    p.add_argument("--beta", type=float, help="mean of the exponential closure noise (default 100)")


def _search_args(p: argparse.ArgumentParser) -> None:
    _sim_args(p)
    p.add_argument("--n-eval", dest="n_eval", type=int, help="evaluation budget (default 10000)")
    p.add_argument("--lambda", dest="lam", type=int, help="candidates per generation (default 100)")
    p.add_argument("--n-e", dest="n_e", type=int, help="simulations per candidate (default 5)")
    p.add_argument("--delta", type=float, help="chute cap multiplier for repair (default 1.5)")
    p.add_argument("--workers", type=int, help="worker processes (default: $CHUTEMAP_WORKERS or core count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chutemap", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("gen-map", parents=[shared], help="generate a sorting-floor map")
    _common(p, "seed for random chute removal (default 0)")
    for flag, hint in (("--width", "columns"), ("--height", "rows"), ("--block-rows", "chute rows per block"),
                       ("--block-cols", "chute columns per block"), ("--corridor", "free cells between blocks"),
                       ("--margin", "free columns beside the block field"),
                       ("--workstations", "number of workstations"),
                       ("--chutes", "remove random chutes until this many remain"),
                       ("--n-dest", "also write a 7:2:1 profile for N destinations")):
        dest = {"--workstations": "workstation_count"}.get(flag, flag[2:].replace("-", "_"))
        p.add_argument(flag, dest=dest, type=int, help=hint)
    p.set_defaults(func=cmd_gen_map)

    p = sub.add_parser("evaluate", parents=[shared], help="simulate one mapping, optionally over several robot counts")
    _common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--mapping", required=True)
    _profile_args(p)
    _sim_args(p, robots_type=str)
    p.add_argument("--replicates", type=int, help="simulations per robot count (default 10)")
    p.add_argument("--repair", action="store_true", help="repair an invalid mapping instead of failing")
    p.add_argument("--delta", type=float, help="chute cap multiplier used by --repair (default 1.5)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("optimize", parents=[shared], help="(1+lambda) evolutionary search, or a greedy baseline")
    _common(p)
    p.add_argument("--map", required=True)
    _profile_args(p)
    _search_args(p)
    p.add_argument("--greedy-init", dest="greedy_init", action=argparse.BooleanOptionalAction, default=None,
                   help="seed the population with both greedy mappings (default on)")
    p.add_argument("--baseline", choices=["min-dist", "cluster"], help="emit a greedy mapping without search")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("qd", parents=[shared], help="MAP-Elites over (AMDW, ACD)")
    _common(p)
    p.add_argument("--map", required=True)
    _profile_args(p)
    _search_args(p)
    p.add_argument("--resolution", help="archive cells per axis as AxB (default 25x25)")
    p.set_defaults(func=cmd_qd)

    p = sub.add_parser("repair", parents=[shared], help="nearest valid mapping under per-destination chute caps")
    p.add_argument("--config")
    p.add_argument("--preset")
    p.add_argument("--out", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--mapping", required=True)
    _profile_args(p)
    p.add_argument("--delta", type=float, help="chute cap multiplier (default 1.5)")
    p.set_defaults(func=cmd_repair)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    args._started = time.time()
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with EXIT_USAGE
    except (ParseError, MapFormatError, MappingError) as exc:
        return _fail(EXIT_PARSE, exc)
    except InfeasibleBoundsError as exc:
        return _fail(EXIT_INFEASIBLE, exc)
    except (MapError, SimulationError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_PARSE, exc)
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)
    return EXIT_OK


def _fail(code: int, exc: Exception) -> int:
    print(f"chutemap: error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
