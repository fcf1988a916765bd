"""Command-line entry point: simulate, train, run, compare, inspect.

Exit codes: 0 success, 1 usage or validation error, 2 runtime or data error.
The ``PROBE_LOG`` environment variable sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import load_overrides
from .dataset import Dataset, load_dataset, write_table
from .errors import ConfigurationError, ProbeError
from .frontend import BETA_BIN_EDGES, MODES, PipelineConfig, prepare_contexts, run_sequence, sequence_metrics
from .model import load_model, save_model
from .predictors import PREDICTOR_NAMES
from .simulator import SpecError, generate, load_spec, write_simulation
from .training import train_model

log = logging.getLogger("probe_vio")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RESPONSE_RATIOS = (0.5, 1.0, 2.0, 4.0)
TABLE_DIGITS = 6


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text}") from exc


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="probe-vio", description="Stereo visual-inertial odometry with learned feature weights.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=True):
        if dataset:
            sp.add_argument("--dataset", required=True, help="dataset directory")
        sp.add_argument("--config", help="JSON override file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--prefilter-deg", type=float, help="gyro prefilter threshold (degrees)")

    s = sub.add_parser("simulate", help="generate a synthetic dataset from a JSON spec")
    s.add_argument("spec", help="simulation spec (JSON)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="override the world seed")
    s.add_argument("--images", action="store_true", help="also write PGM images")

    t = sub.add_parser("train", help="train a feature-weight model")
    common(t)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--iterations", type=int)
    t.add_argument("--gamma-candidates", type=_float_list)
    t.add_argument("--k-candidates", type=_int_list)

    r = sub.add_parser("run", help="estimate a trajectory with one mode")
    common(r)
    r.add_argument("--mode", required=True, choices=MODES)
    r.add_argument("--model")
    r.add_argument("--out", required=True)

    c = sub.add_parser("compare", help="run all modes and tabulate errors")
    common(c)
    c.add_argument("--model", required=True)
    c.add_argument("--out", required=True)

    i = sub.add_parser("inspect", help="summarize a model file")
    i.add_argument("--model", required=True)
    i.add_argument("--json", action="store_true", help="print JSON instead of text")
    return p


# --- output helpers ----------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _make_out(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ProbeError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _pipeline(args) -> tuple[PipelineConfig, object]:
    pipeline, training = load_overrides(args.config)
    pipeline = replace(pipeline, seed=args.seed)
    if getattr(args, "prefilter_deg", None) is not None:
        pipeline = replace(pipeline, prefilter_deg=args.prefilter_deg)
    return pipeline, training


def _load_model_checked(path: str, pipeline: PipelineConfig):
    model = load_model(_require_file(path, "model file"), pipeline.predictor.digest())
    if model.config_mismatch:
        log.warning("model was trained with a different predictor configuration")
    return model


# --- commands ----------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec = load_spec(_require_file(args.spec, "spec file"))
    if args.seed is not None:
        spec.world.seed = args.seed
    if args.images:
        spec.render_images = True
    result = generate(spec)
    out = write_simulation(result, args.out)
    print(f"wrote {result.dataset.n_frames} frames to {out}")
    return EXIT_OK


def training_report(trained, ds: Dataset) -> dict:
    report = trained.report()
    report["dataset"] = ds.name
    report["predictors"] = list(PREDICTOR_NAMES)
    return report


def cmd_train(args) -> int:
    pipeline, training = _pipeline(args)
    ds = load_dataset(_require_dir(args.dataset, "dataset"))
    updates = {"seed": args.seed}
    if args.iterations is not None:
        updates["iterations"] = args.iterations
    if args.gamma_candidates:
        updates["gamma_candidates"] = args.gamma_candidates
    if args.k_candidates:
        updates["k_candidates"] = args.k_candidates
    try:
        training = replace(training, **updates)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    trained = train_model(ds, training, pipeline)
    out = _make_out(args.out)
    save_model(trained.model, out / "model.prb")
    report = training_report(trained, ds)
    write_atomic(out / "training_report.json", dump_json(report))
    trained.outcome.training_set.to_csv(out / "training_set.csv")
    print(f"training mode: {report['mode']} (subset policy {report['subset_policy']})")
    print(f"samples: {report['n_samples']}  K: {report['k']}  gamma: {report['gamma']!r}  "
          f"alpha_bar: {report['alpha_bar']:.6g} m")
    return EXIT_OK


def diagnostics_report(result) -> dict:
    frames = result.diagnostics
    total = np.zeros(len(BETA_BIN_EDGES) - 1, dtype=int)
    for d in frames:
        if "beta_histogram" in d:
            total += np.asarray(d["beta_histogram"], dtype=int)
    return {
        "mode": result.mode,
        "complete": result.complete,
        "failed_frame": result.failed_frame,
        "error": result.error,
        "beta_bin_edges": list(BETA_BIN_EDGES),
        "beta_histogram": total.tolist(),
        "dropped_total": int(sum(d.get("dropped", 0) for d in frames)),
        "prefiltered_total": int(sum(d.get("n_prefiltered", 0) for d in frames)),
        "frames": frames,
    }


def _write_run(out: Path, ds: Dataset, result, metrics: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "trajectory.csv", ["t", "x", "y", "z"], np.c_[result.times, result.positions])
    series = metrics["error_series"]
    rows = [(k, float(ds.frame_times[k]), e) for k, e in enumerate(series) if e is not None]
    write_table(out / "errors.csv", ["frame_idx", "t", "error"],
                np.array(rows, dtype=float).reshape(-1, 3), int_cols=1)
    write_atomic(out / "metrics.json", dump_json(metrics))
    write_atomic(out / "diagnostics.json", dump_json(diagnostics_report(result)))


def cmd_run(args) -> int:
    pipeline, _ = _pipeline(args)
    if args.mode == "probe" and not args.model:
        raise UsageError("probe mode requires --model")
    model = _load_model_checked(args.model, pipeline) if args.model else None
    ds = load_dataset(_require_dir(args.dataset, "dataset"))
    result = run_sequence(ds, args.mode, pipeline, model if args.mode == "probe" else None)
    metrics = sequence_metrics(result, ds)
    _write_run(_make_out(args.out), ds, result, metrics)
    print(format_metrics(metrics))
    return EXIT_OK if result.complete else EXIT_RUNTIME


def format_metrics(m: dict) -> str:
    def f(v):
        return "n/a" if v is None else f"{v:.{TABLE_DIGITS}f}"
    status = "complete" if m["complete"] else f"aborted at frame {m['failed_frame']}"
    return (f"{m['trial']} [{m['mode']}] path {f(m['path_length'])} m  ARMSE {f(m['armse'])} m  "
            f"final {f(m['final_error'])} m  ({status})")


def _round(v):
    return None if v is None or not math.isfinite(v) else round(float(v), TABLE_DIGITS)


def comparison_table(trial: str, metrics: dict[str, dict]) -> dict:
    """Table rows with one ARMSE and final-error column pair per mode."""
    columns = ["trial", "path_length"]
    row = {"trial": trial, "path_length": _round(metrics[MODES[0]]["path_length"])}
    for mode in MODES:
        columns += [f"{mode}_armse", f"{mode}_final_error"]
        row[f"{mode}_armse"] = _round(metrics[mode]["armse"])
        row[f"{mode}_final_error"] = _round(metrics[mode]["final_error"])
    complete = {mode: bool(metrics[mode]["complete"]) for mode in MODES}
    return {"columns": columns, "rows": [row], "complete": complete, "units": "m"}


def format_table(table: dict) -> str:
    cols = table["columns"]
    cells = [[("n/a" if r[c] is None else (f"{r[c]:.{TABLE_DIGITS}f}" if isinstance(r[c], float) else str(r[c])))
              for c in cols] for r in table["rows"]]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    pipeline, _ = _pipeline(args)
    model = _load_model_checked(args.model, pipeline)
    ds = load_dataset(_require_dir(args.dataset, "dataset"))
    out = _make_out(args.out)
    contexts = prepare_contexts(ds, pipeline)
    metrics = {}
    for mode in MODES:
        result = run_sequence(ds, mode, pipeline, model if mode == "probe" else None, contexts)
        metrics[mode] = sequence_metrics(result, ds)
        _write_run(out / mode, ds, result, metrics[mode])
    table = comparison_table(ds.name, metrics)
    text = format_table(table)
    write_atomic(out / "comparison.json", dump_json(table))
    write_atomic(out / "comparison.txt", text)
    print(text, end="")
    return EXIT_OK


def inspect_summary(model) -> dict:
    return {
        "k": model.k,
        "gamma": model.gamma,
        "alpha_bar": model.alpha_bar,
        "n_samples": len(model),
        "predictors": list(PREDICTOR_NAMES),
        "mean": model.mean.tolist(),
        "std": model.std.tolist(),
        "response": [{"ratio": r, "beta": model.beta_at_ratio(r)} for r in RESPONSE_RATIOS],
        "metadata": model.metadata,
    }


def cmd_inspect(args) -> int:
    model = load_model(_require_file(args.model, "model file"))
    summary = inspect_summary(model)
    if args.json:
        print(dump_json(summary), end="")
        return EXIT_OK
    print(f"K: {model.k}")
    print(f"gamma: {model.gamma!r}")
    print(f"alpha_bar: {model.alpha_bar!r}")
    print(f"samples: {len(model)}")
    print("standardization:")
    for name, m, s in zip(PREDICTOR_NAMES, model.mean, model.std):
        print(f"  {name:9s} mean {m:.6g}  std {s:.6g}")
    print("beta response:")
    for r in RESPONSE_RATIOS:
        print(f"  neighbour mean {r!r} x alpha_bar -> beta {model.beta_at_ratio(r)!r}")
    for key, value in sorted(model.metadata.items()):
        print(f"{key}: {value}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "run": cmd_run,
    "compare": cmd_compare,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    level = os.environ.get("PROBE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"probe-vio: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, SpecError) as exc:
        msg = str(exc)
        if isinstance(exc, SpecError) and exc.field and exc.field not in msg:
            msg = f"{msg} (field '{exc.field}')"
        print(f"probe-vio: error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except ProbeError as exc:
        print(f"probe-vio: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
