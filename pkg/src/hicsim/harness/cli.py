"""Command-line entry point: ``hicsim <subcommand> [options]``.

Exit codes: 0 success, 2 config error, 3 run divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from ..nn.network import HIC
from ..nn.train import TrainingDiverged
from . import datasets
from .config import ConfigError, ExperimentConfig, load_config
from .endurance import EventLogError, endurance_report, events_to_csv, load_event_log
from .experiments import load_checkpoint, run_ablation, run_drift_sweep, run_training, run_width_sweep

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("hicsim")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults built in)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="output directory (default: output.dir/<name>)")
    p.add_argument("--threads", type=int, default=1, help="worker processes for independent runs")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hicsim", description="Hybrid in-memory computing training simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one network")
    _common(p)

    p = sub.add_parser("ablation", help="non-ideality ablation table")
    _common(p)
    p.add_argument("--seeds", type=int, help="seeds per row (default ablation.seeds)")

    p = sub.add_parser("drift-sweep", help="accuracy vs. time after training, with and without AdaBS")
    _common(p)
    p.add_argument("--checkpoint", type=Path, action="append",
                   help="trained checkpoint (repeatable); trains drift.training_runs runs if omitted")

    p = sub.add_parser("width-sweep", help="accuracy vs. inference model size")
    _common(p)
    p.add_argument("--seeds", type=int, help="seeds per point (default ablation.seeds)")

    p = sub.add_parser("endurance", help="write-erase cycle report for a training run")
    _common(p)
    p.add_argument("--run", type=Path, help="directory of a finished 'train' run; trains one if omitted")
    p.add_argument("--export-events", action="store_true", help="also write events.csv")

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    g = dsub.add_parser("gen", help="materialize the configured dataset as IDX files")
    _common(g)

    p = sub.add_parser("config", help="print the fully expanded config")
    _common(p)
    return ap


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        try:
            cfg = cfg.with_updates(seed=args.seed)
        except ValidationError as e:
            raise ConfigError(f"--seed: {e.errors()[0]['msg']}") from e
    return cfg


def _out_dir(args, cfg, sub: str) -> Path:
    return args.out if args.out else Path(cfg.output.dir) / cfg.name / sub


def _dump(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_train(args, cfg):
    out = _out_dir(args, cfg, "train")
    res = run_training(cfg, out)
    fin = res.summary["final"] or {}
    print(f"{res.run_id}: test_acc={fin.get('test_acc', float('nan')):.4f} -> {out}")
    return EXIT_DIVERGED if res.diverged else EXIT_OK


def cmd_ablation(args, cfg):
    out = _out_dir(args, cfg, "ablation")
    rows = run_ablation(cfg, out, seeds=args.seeds, workers=args.threads)
    for r in rows:
        print(f"{r['name']:28s} {r['mean']:.4f} +/- {r['std']:.4f}")
    return EXIT_DIVERGED if any(r["failures"] for r in rows) else EXIT_OK


def cmd_drift(args, cfg):
    out = _out_dir(args, cfg, "drift")
    rows = run_drift_sweep(cfg, out, args.checkpoint)
    for r in rows:
        print(f"t={r['t']:<10g} uncompensated={r['uncompensated_mean']:.4f} adabs={r['adabs_mean']:.4f}")
    return EXIT_OK


def cmd_width(args, cfg):
    out = _out_dir(args, cfg, "width")
    rows = run_width_sweep(cfg, out, seeds=args.seeds, workers=args.threads)
    for r in rows:
        print(f"{r['backend']:6s} x{r['width_multiplier']:<5g} bits={r['model_bits']:<8d} {r['mean']:.4f}")
    return EXIT_OK


def cmd_endurance(args, cfg):
    out = _out_dir(args, cfg, "endurance")
    if args.run:
        net, _, _ = load_checkpoint(args.run / "checkpoint.npz")
        events = load_event_log(args.run / "events.npz")
    else:
        res = run_training(cfg.with_updates(model={"backend": HIC}), out / "train")
        if res.diverged:
            return EXIT_DIVERGED
        net, events = res.net, res.log.arrays()
    hws = [b.hw for b in net.analog_backends]
    if not hws:
        raise EventLogError("run has no PCM arrays (backend is not hic)")
    rep = endurance_report(hws, events, cfg.endurance.limit, cfg.endurance.bins)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "endurance.json", rep.as_dict())
    if args.export_events:
        (out / "events.csv").write_text(events_to_csv(events))
    print(f"max MSB cycles {rep.msb_max}, max LSB cycles {rep.lsb_max}, "
          f"{rep.fraction_of_limit:.3g} of limit, replay mismatches {rep.mismatches}")
    if not rep.verified:
        raise EventLogError(f"{rep.mismatches} device counters disagree with the event log")
    return EXIT_OK


def cmd_dataset_gen(args, cfg):
    out = _out_dir(args, cfg, "dataset")
    data = datasets.load_dataset(cfg.dataset)
    paths = datasets.save_split(out, data)
    _dump(out / "dataset.json", {"source": cfg.dataset.model_dump(), "n_classes": data.n_classes,
                                 "input_shape": list(data.input_shape),
                                 "files": {k: p.name for k, p in paths.items()},
                                 "train": len(data.y_train), "test": len(data.y_test)})
    print(f"{len(data.y_train)} train / {len(data.y_test)} test samples -> {out}")
    return EXIT_OK


def cmd_config(args, cfg):
    sys.stdout.write(cfg.to_yaml())
    return EXIT_OK


COMMANDS = {"train": cmd_train, "ablation": cmd_ablation, "drift-sweep": cmd_drift,
            "width-sweep": cmd_width, "endurance": cmd_endurance, "config": cmd_config}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = _load(args)
        fn = cmd_dataset_gen if args.command == "dataset" else COMMANDS[args.command]
        return fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, EventLogError, datasets.DatasetError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
