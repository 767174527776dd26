"""Command-line entry point: ``pmors <command> --config cfg.json --out DIR [--seed N]``.

Every command validates the config against the shipped JSON schema before
doing any work, writes its artifacts under ``--out`` and embeds the resolved
config, seed and package version in each JSON output. Outputs contain no
wall-clock data, so re-running with the same config and seed reproduces them
byte for byte. Rejected input exits nonzero with a JSON error on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import jsonschema
import numpy as np

from . import __version__, pareto
from .dataio import (DataInputError, Dataset, World, WorldConfig, build_dataset, coverage_report,
                     TeacherModel, generate_world, ingest_csv, simulate_logs, write_csv)
from .forgetting import NEUTRAL, POSITIVE, ForgettingConfig, ForgettingInputError, TimeWindows
from .metrics import EvalProtocol, MetricInputError, evaluate
from .ranker import RankerInputError, load_checkpoint, save_checkpoint
from .trainer import (ConfigError, SolverConfig, StepReport, TrainConfig, TrainingError, ablation_sweep,
                      evaluate_params, fit, memory_strength_sweep, trend)

COMMANDS = ("simulate", "train", "eval", "ablate", "sweep-l", "coverage", "solver")
DEFAULT_IMPRESSIONS = 10000
EXIT_USAGE = 2
EXIT_FAILURE = 1


class CliError(Exception):
    def __init__(self, kind: str, message: str, details: Optional[list] = None, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.kind = kind
        self.details = details or []
        self.code = code


def load_schema() -> dict:
    return json.loads(resources.files("pmors").joinpath("config.schema.json").read_text())


def validate_config(doc: Any) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        details = [{"path": "/".join(str(p) for p in e.absolute_path), "message": e.message} for e in errors]
        raise CliError("config_error", f"config failed validation ({len(errors)} problem(s))", details, EXIT_USAGE)


def read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise CliError("config_error", f"config file not found: {path}", code=EXIT_USAGE)
    except json.JSONDecodeError as e:
        raise CliError("config_error", f"config is not valid JSON: {e}", code=EXIT_USAGE)
    validate_config(doc)
    return doc


# --- output helpers -----------------------------------------------------------

def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def dump_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_table(path: Path, rows: List[dict], fields: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_cell(r.get(f)) for f in fields])


def _cell(v):
    if isinstance(v, bool) or v is None:
        return "" if v is None else int(v)
    if isinstance(v, (float, np.floating)):
        return "nan" if not np.isfinite(v) else repr(float(v))
    return v


def provenance(command: str, seed: int, config: dict) -> dict:
    return {"tool": "pmors", "version": __version__, "command": command, "seed": seed, "config": config}


def prepare_out(out: Optional[str], config: dict) -> Path:
    target = out or config.get("out")
    if not target:
        raise CliError("usage_error", "an output directory is required (--out or config 'out')", code=EXIT_USAGE)
    path = Path(target)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".pmors-write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise CliError("io_error", f"output directory {path} is not writable: {e.strerror or e}")
    return path


# --- config -> objects --------------------------------------------------------

def world_from_config(config: dict, seed: int):
    if "world_path" in config:
        try:
            world = World.load(config["world_path"])
        except FileNotFoundError:
            raise CliError("io_error", f"world file not found: {config['world_path']}")
        return world, TeacherModel(world)
    return generate_world(WorldConfig(seed=seed, **config.get("world", {})))


def protocol_from_config(config: dict) -> EvalProtocol:
    return EvalProtocol(**config.get("protocol", {}))


def forgetting_from_config(doc: dict) -> ForgettingConfig:
    d = dict(doc)
    if "windows" in d:
        d["windows"] = TimeWindows.parse(d["windows"])
    return ForgettingConfig(**d)


def train_config_from(config: dict, seed: int) -> TrainConfig:
    d = dict(config.get("train", {}))
    if "forgetting" in d:
        d["forgetting"] = forgetting_from_config(d["forgetting"])
    if "solver" in d:
        d["solver"] = SolverConfig(**d["solver"])
    d["seed"] = seed
    return TrainConfig(**d)


def load_log(config: dict, world, teacher, protocol, seed: int):
    lcfg = config.get("log", {})
    if "csv" in lcfg:
        try:
            log, report = ingest_csv(lcfg["csv"], lcfg.get("neg_threshold", 0.3), lcfg.get("pos_threshold", 2.0))
        except FileNotFoundError:
            raise CliError("io_error", f"log file not found: {lcfg['csv']}")
        return log, report
    return simulate_logs(world, teacher, lcfg.get("impressions", DEFAULT_IMPRESSIONS), protocol, seed), None


def dataset_from_config(config: dict, seed: int) -> Dataset:
    world, teacher = world_from_config(config, seed)
    protocol = protocol_from_config(config)
    log, _ = load_log(config, world, teacher, protocol, seed)
    tcfg = train_config_from(config, seed)
    return build_dataset(world, teacher, log, tcfg.split, protocol, tcfg.candidates_per_impression,
                         config.get("dataset", {}).get("head_candidates", 1), seed)


# --- commands -----------------------------------------------------------------

def cmd_simulate(config: dict, out: Path, seed: int) -> dict:
    world, teacher = world_from_config(config, seed)
    protocol = protocol_from_config(config)
    n = config.get("log", {}).get("impressions", DEFAULT_IMPRESSIONS)
    log = simulate_logs(world, teacher, n, protocol, seed)
    write_csv(log, out / "log.csv")
    world.save(out / "world.json")
    counts = {"rows": len(log), "negative": int(log.negative.sum()),
              "positive": int(np.sum(log.label == POSITIVE)), "neutral": int(np.sum(log.label == NEUTRAL))}
    dump_json(out / "simulate.json", {"provenance": provenance("simulate", seed, config), "counts": counts})
    print(f"wrote {counts['rows']} rows ({counts['negative']} negative, {counts['positive']} positive, "
          f"{counts['neutral']} neutral) to {out / 'log.csv'}")
    return counts


def cmd_train(config: dict, out: Path, seed: int) -> dict:
    tcfg = train_config_from(config, seed)
    ds = dataset_from_config(config, seed)
    res = fit(ds, tcfg)
    # every epoch runs the same number of batches
    steps_per_epoch = max(1, len(res.curve) // max(tcfg.epochs, 1))
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch",) + StepReport.CSV_FIELDS)
        for r in res.curve:
            w.writerow([r.step // steps_per_epoch + 1] + r.row())
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    for epoch, params in res.checkpoints:
        save_checkpoint(params, ckpt_dir / f"epoch_{epoch:04d}.json", {"epoch": epoch, "seed": seed})
    save_checkpoint(res.params, out / "model.json", {"epoch": tcfg.epochs, "seed": seed})

    epochs = []
    live_by_epoch: Dict[int, list] = {}
    for r in res.curve:
        live_by_epoch.setdefault(r.step // steps_per_epoch + 1, []).append(r)
    for row in res.epoch_metrics:
        reps = [r for r in live_by_epoch.get(row["epoch"], []) if not r.skipped]
        summary = {k: v for k, v in row.items() if k != "counts"}
        summary.update(_epoch_means(reps))
        epochs.append(summary)
        print(f"epoch {row['epoch']}: L_LTR={summary['mean_loss_ltr']:.6g} L_FG={summary['mean_loss_fg']:.6g} "
              f"alpha=({summary['mean_alpha_ltr']:.4f}, {summary['mean_alpha_fg']:.4f})")
    final = evaluate_params(res.params, ds, "test").to_dict()
    doc = {
        "provenance": provenance("train", seed, config),
        "train_config": tcfg.to_dict(),
        "epochs": epochs,
        "mean_alpha": list(res.mean_alpha()),
        "steps": len(res.curve),
        "skipped_steps": sum(r.skipped for r in res.curve),
        "solver_calls": res.solver_calls,
        "test_metrics": final,
    }
    if tcfg.epochs == 0:
        doc["initial_metrics"] = final
    dump_json(out / "summary.json", doc)
    return doc


def _epoch_means(reps: List[StepReport]) -> dict:
    def mean(attr):
        return float(np.mean([getattr(r, attr) for r in reps])) if reps else float("nan")
    return {"mean_loss_ltr": mean("loss_ltr"), "mean_loss_fg": mean("loss_fg"),
            "mean_alpha_ltr": mean("alpha_ltr"), "mean_alpha_fg": mean("alpha_fg"), "steps": len(reps)}


def cmd_eval(config: dict, out: Path, seed: int, checkpoint: Optional[str] = None) -> dict:
    ecfg = config.get("eval", {})
    checkpoint = checkpoint or ecfg.get("checkpoint")
    if not checkpoint:
        raise CliError("usage_error", "eval needs a checkpoint (--checkpoint or config eval.checkpoint)",
                       code=EXIT_USAGE)
    split = ecfg.get("split", "test")
    ds = dataset_from_config(config, seed)
    trace = out / "trace.csv" if ecfg.get("trace", False) else None
    if checkpoint == "teacher":
        imp = getattr(ds, split)
        # the teacher as its own pre-ranker: the consistency upper bound
        report = evaluate(ds.teacher, ds.teacher, imp.users, imp.timestamps, imp.items,
                          imp.uniforms, ds.protocol, ds.user_model, trace)
    else:
        if not os.path.exists(checkpoint):
            raise CliError("io_error", f"checkpoint not found: {checkpoint}")
        params, _ = load_checkpoint(checkpoint)
        expected = ds.world.ranker_config(params.cfg.embedding_dim, params.cfg.hidden)
        if params.cfg.to_dict() != expected.to_dict():
            raise CliError("checkpoint_error", "checkpoint does not match the world's feature layout",
                           [{"checkpoint": params.cfg.to_dict(), "world": expected.to_dict()}])
        report = evaluate_params(params, ds, split, trace)
    doc = {"provenance": provenance("eval", seed, config), "checkpoint": checkpoint, "split": split,
           "report": report.to_dict()}
    dump_json(out / "eval.json", doc)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return doc


ABLATION_FIELDS = ("model", "alpha_ltr", "seed", "mean_alpha_ltr", "ndcg_at_10", "recall_10_1",
                   "fast_slip_rate", "ctr")
SWEEP_FIELDS = ("retention_L", "strength_S", "seed", "mean_alpha_ltr", "ndcg_at_10", "recall_10_1",
                "fast_slip_rate", "ctr")


def _trend_flags(rows: List[dict], key: str) -> dict:
    t = trend(rows, key)
    return {m: {"spearman": v, "direction": _direction(v)} for m, v in t.items()}


def _direction(rho: float) -> str:
    if not np.isfinite(rho):
        return "flat"
    return "increasing" if rho > 0 else "decreasing" if rho < 0 else "flat"


def cmd_ablate(config: dict, out: Path, seed: int) -> dict:
    acfg = config.get("ablation", {})
    alphas = acfg.get("alphas", [0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    ds = dataset_from_config(config, seed)
    rows = ablation_sweep(ds, alphas, train_config_from(config, seed), acfg.get("include_pareto", True))
    write_table(out / "ablation.csv", rows, ABLATION_FIELDS)
    fixed = [r for r in rows if r["model"] == "fixed"]
    doc = {"provenance": provenance("ablate", seed, config), "rows": rows,
           "trend_vs_alpha_ltr": _trend_flags(fixed, "alpha_ltr") if len(fixed) > 1 else {}}
    dump_json(out / "ablation.json", doc)
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return doc


def cmd_sweep_l(config: dict, out: Path, seed: int) -> dict:
    retentions = config.get("sweep", {}).get("retentions", [round(0.1 * k, 1) for k in range(1, 10)])
    ds = dataset_from_config(config, seed)
    rows = memory_strength_sweep(ds, retentions, train_config_from(config, seed))
    flags = _trend_flags(rows, "retention_L") if len(rows) > 1 else {}
    for r in rows:
        for m, f in flags.items():
            r[f"{m}_trend"] = f["direction"]
    fields = SWEEP_FIELDS + tuple(f"{m}_trend" for m in flags)
    write_table(out / "sweep_l.csv", rows, fields)
    doc = {"provenance": provenance("sweep-l", seed, config), "rows": rows, "trend_vs_retention_L": flags}
    dump_json(out / "sweep_l.json", doc)
    print(f"wrote {len(rows)} rows to {out / 'sweep_l.csv'}")
    return doc


def cmd_coverage(config: dict, out: Path, seed: int) -> dict:
    ccfg = config.get("coverage", {})
    windows = TimeWindows.parse(ccfg.get("windows", TimeWindows.parse().days))
    granularities = ccfg.get("granularities", ["item_fp", "material_fp"])
    world, teacher = (None, None) if "csv" in config.get("log", {}) else world_from_config(config, seed)
    log, ingest = load_log(config, world, teacher, protocol_from_config(config), seed)
    rows = coverage_report(log, windows, granularities)
    fields = ("granularity", "method") + tuple(f"w{j}" for j in range(len(windows)))
    write_table(out / "coverage.csv", rows, fields)
    doc = {"provenance": provenance("coverage", seed, config), "windows_days": list(windows.days),
           "rows": rows, "ingest": None if ingest is None else asdict(ingest)}
    dump_json(out / "coverage.json", doc)
    print(f"wrote {len(rows)} rows to {out / 'coverage.csv'}")
    return doc


def cmd_solver(config: dict, out: Path, seed: int, matrix_path: Optional[str] = None) -> dict:
    scfg = dict(config.get("solver", {}))
    if matrix_path is not None:
        try:
            with open(matrix_path) as fh:
                scfg.update(json.load(fh))
        except FileNotFoundError:
            raise CliError("io_error", f"matrix file not found: {matrix_path}")
        except json.JSONDecodeError as e:
            raise CliError("input_error", f"matrix file is not valid JSON: {e}")
        validate_config({"solver": scfg})
    opts = {k: scfg[k] for k in ("max_iter", "conv_tol", "stat_tol", "init", "away_steps") if k in scfg}
    if ("matrix" in scfg) == ("gradients" in scfg):
        raise CliError("input_error", "solver needs exactly one of 'matrix' or 'gradients'", code=EXIT_USAGE)
    if "gradients" in scfg:
        m = pareto.gram_matrix(scfg["gradients"])
    else:
        try:
            m = np.asarray(scfg["matrix"], dtype=float)
        except ValueError:
            raise CliError("input_error", "matrix rows must all have the same length", code=EXIT_USAGE)
    result = pareto.frank_wolfe_solve(m, seed=seed, **opts)
    doc = {"provenance": provenance("solver", seed, config), "result": result.to_dict()}
    dump_json(out / "solver.json", doc)
    print(json.dumps(_jsonable(result.to_dict()), sort_keys=True))
    return doc


# --- entry point --------------------------------------------------------------

class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors get the JSON error treatment."""

    def error(self, message):
        raise _ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pmors", description="Pareto multi-objective pre-ranking experiments.")
    parser.add_argument("--version", action="version", version=f"pmors {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON (validated against the shipped schema)")
        p.add_argument("--out", help="output directory (overrides config 'out')")
        p.add_argument("--seed", type=int, help="seed (overrides config 'seed'; default 0)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "eval":
            p.add_argument("--checkpoint", help="ranker checkpoint JSON, or 'teacher' for the oracle scorer")
        if name == "solver":
            p.add_argument("--matrix", help="JSON file with a 'matrix' (Gram) or 'gradients' list")
    return parser


def _emit_error(err: CliError) -> int:
    doc = {"error": {"type": err.kind, "message": str(err), "details": _jsonable(err.details)}}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")
    return err.code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as e:
        return _emit_error(CliError("usage_error", str(e), code=EXIT_USAGE))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        config = read_config(args.config)
        seed = args.seed if args.seed is not None else config.get("seed", 0)
        if seed < 0:
            raise CliError("usage_error", "seed must be non-negative", code=EXIT_USAGE)
        out = prepare_out(args.out, config)
        if args.command == "simulate":
            cmd_simulate(config, out, seed)
        elif args.command == "train":
            cmd_train(config, out, seed)
        elif args.command == "eval":
            cmd_eval(config, out, seed, args.checkpoint)
        elif args.command == "ablate":
            cmd_ablate(config, out, seed)
        elif args.command == "sweep-l":
            cmd_sweep_l(config, out, seed)
        elif args.command == "coverage":
            cmd_coverage(config, out, seed)
        else:
            cmd_solver(config, out, seed, args.matrix)
    except CliError as e:
        return _emit_error(e)
    except (ConfigError, DataInputError, ForgettingInputError, MetricInputError, RankerInputError,
            pareto.SolverInputError) as e:
        return _emit_error(CliError("input_error", str(e), code=EXIT_USAGE))
    except TypeError as e:
        return _emit_error(CliError("config_error", str(e), code=EXIT_USAGE))
    except TrainingError as e:
        return _emit_error(CliError("training_error", str(e)))
    except OSError as e:
        return _emit_error(CliError("io_error", str(e)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
