"""The studies: single training run, non-ideality ablation, drift sweep, width sweep.

Each study writes into its own output directory.  Nothing written depends on
wall-clock time unless ``output.record_wall_clock`` is set, so the same config
and seed give byte-identical files.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..device import EventLog, SimClock
from ..metrics import records_to_csv
from ..nn.network import FIXED_POINT, FP32, HIC, build_network, load_network, save_network
from ..nn.train import TrainingDiverged, adabs_calibrate, calibration_subset, evaluate, train
from . import datasets
from .config import ExperimentConfig
from .endurance import endurance_report, save_event_log

log = logging.getLogger(__name__)

FLAG_NAMES = ("write_noise", "read_noise", "drift", "nonlinearity")
_SHORT = {"write_noise": "write", "read_noise": "read", "drift": "drift"}


def ablation_combinations():
    """``(name, backend, flags)`` rows: shadow baseline, linear+<=1, nonlinear+<=2, full."""
    others = ("write_noise", "read_noise", "drift")
    rows = [("baseline", FIXED_POINT, None)]

    def flags(on, nonlinear):
        d = {k: k in on for k in others}
        d["nonlinearity"] = nonlinear
        return d

    rows.append(("linear", HIC, flags((), False)))
    for k in others:
        rows.append((f"linear+{_SHORT[k]}", HIC, flags((k,), False)))
    rows.append(("nonlinear", HIC, flags((), True)))
    for k in others:
        rows.append((f"nonlinear+{_SHORT[k]}", HIC, flags((k,), True)))
    for i, a in enumerate(others):
        for b in others[i + 1:]:
            rows.append((f"nonlinear+{_SHORT[a]}+{_SHORT[b]}", HIC, flags((a, b), True)))
    rows.append(("full", HIC, flags(others, True)))
    return rows


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def _write_csv(path: Path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def _mean_std(values):
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return float("nan"), float("nan")
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def _with_flags(cfg: ExperimentConfig, flags: dict | None) -> ExperimentConfig:
    return cfg if flags is None else cfg.with_updates(nonidealities=dict(flags))


class CheckpointError(OSError):
    """Checkpoint missing or unreadable."""


def load_checkpoint(path):
    """:func:`load_network` with missing/corrupt files reported as :class:`CheckpointError`."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    try:
        return load_network(path)
    except (ValueError, KeyError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e


@dataclass
class RunResult:
    run_id: str
    records: list
    summary: dict
    net: object = None
    clock: SimClock | None = None
    log: EventLog | None = None
    diverged: bool = False
    out_dir: Path | None = None

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")


def run_training(cfg: ExperimentConfig, out_dir=None, *, seed: int | None = None,
                 backend: str | None = None, flags: dict | None = None,
                 width_multiplier: float | None = None, data: datasets.Split | None = None,
                 run_id: str | None = None, write: bool = True) -> RunResult:
    """Train one network; write metrics.csv, summary.json, checkpoint.npz, events.npz."""
    cfg = _with_flags(cfg, flags)
    seed = cfg.seed if seed is None else seed
    backend = backend or cfg.model.backend
    wm = cfg.model.width_multiplier if width_multiplier is None else width_multiplier
    run_id = run_id or f"{cfg.name}-{backend}-s{seed}"
    data = data or datasets.load_dataset(cfg.dataset)
    tcfg = cfg.training_config(seed, wm)
    clock = SimClock(0.0, tcfg.seconds_per_batch)
    ev = EventLog() if backend == HIC else None
    net = build_network(cfg.layer_specs(), data.input_shape, data.n_classes, cfg.hardware(backend),
                        seed=seed, width_multiplier=wm, clock=clock, log=ev)
    warmup = cfg.converters.warmup_batches
    diverged, error = False, None
    try:
        records = train(net, data.as_tuple(), tcfg, clock, run_id=run_id, warmup_batches=warmup,
                        record_wall_clock=cfg.output.record_wall_clock)
    except TrainingDiverged as e:
        records, diverged, error = e.records, True, str(e)
        log.warning("%s: %s", run_id, e)
    last = records[-1] if records else None
    summary = {
        "run_id": run_id,
        "seed": seed,
        "backend": backend,
        "width_multiplier": wm,
        "nonidealities": cfg.nonidealities.model_dump(),
        "diverged": diverged,
        "error": error,
        "epochs_completed": last.epoch if last else 0,
        "steps": last.step if last else 0,
        "sim_time": clock.now,
        "parameter_count": net.parameter_count(),
        "weight_count": net.weight_count(),
        "inference_model_bits": net.weight_count() * (32 if backend == FP32 else 4),
        "final": {k: getattr(last, k) for k in ("train_loss", "train_acc", "test_loss", "test_acc")} if last else None,
        "totals": {k: getattr(last, k) for k in ("flips", "carries", "clamps", "tick_clips", "msb_pulses",
                                                 "refreshes", "program_failures")} if last else None,
        "initial_programming": net.init_stats.as_dict(),
    }
    if backend == HIC:
        rep = endurance_report([b.hw for b in net.analog_backends], ev, cfg.endurance.limit,
                               cfg.endurance.bins)
        summary["endurance"] = {"msb_max": rep.msb_max, "lsb_max": rep.lsb_max,
                                "fraction_of_limit": rep.fraction_of_limit,
                                "events": rep.events, "replay_mismatches": rep.mismatches}
    out = None
    if write and out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(records_to_csv(records, cfg.output.record_wall_clock))
        _dump_json(out / "summary.json", summary)
        (out / "config.yaml").write_text(cfg.to_yaml())
        if cfg.output.checkpoint:
            save_network(out / "checkpoint.npz", net, clock, {"run_id": run_id})
        if ev is not None and cfg.output.event_log:
            save_event_log(out / "events.npz", ev)
    return RunResult(run_id, records, summary, net, clock, ev, diverged, out)


# ------------------------------------------------------------------ ablation


_DATA_CACHE = {}


def _run_task(cfg_json: str, task, with_bits=False):
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    key = cfg.dataset.model_dump_json()
    if key not in _DATA_CACHE:
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = datasets.load_dataset(cfg.dataset)
    name, backend, flags, seed = task[:4]
    wm = task[4] if len(task) > 4 else None
    res = run_training(cfg, None, seed=seed, backend=backend, flags=flags, width_multiplier=wm,
                       data=_DATA_CACHE[key], run_id=f"{name}-s{seed}", write=False)
    log.info("%s seed %d: %.4f", name, seed, res.final_accuracy)
    err = res.summary["error"] if res.diverged else None
    if with_bits:
        return res.final_accuracy, err, res.summary["inference_model_bits"]
    return res.final_accuracy, err


def _map_runs(cfg: ExperimentConfig, tasks, workers: int, with_bits=False):
    """Results of independent runs in task order, optionally across worker processes."""
    cfg_json = cfg.model_dump_json()
    if workers <= 1:
        return [_run_task(cfg_json, t, with_bits) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_task, [cfg_json] * len(tasks), tasks, [with_bits] * len(tasks)))


def run_ablation(cfg: ExperimentConfig, out_dir=None, combinations=None, seeds: int | None = None,
                 workers: int = 1):
    """Train each flag combination over ``seeds`` seeds; rows of mean/std accuracy."""
    combos = list(combinations or ablation_combinations())
    if cfg.ablation.include_fp32 and combinations is None:
        combos.insert(0, ("fp32", FP32, None))
    n = cfg.ablation.seeds if seeds is None else seeds
    tasks = [(name, backend, flags, cfg.seed + k) for name, backend, flags in combos for k in range(n)]
    results = iter(_map_runs(cfg, tasks, workers))
    rows = []
    for name, backend, flags in combos:
        accs, failures = [], []
        for _ in range(n):
            acc, err = next(results)
            accs.append(acc)
            if err:
                failures.append(err)
        mean, std = _mean_std(accs)
        rows.append({"name": name, "backend": backend,
                     "flags": flags if flags is not None else {}, "seeds": n,
                     "accuracies": accs, "mean": mean, "std": std, "failures": failures})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "ablation.csv",
                   ("name", "backend", *FLAG_NAMES, "seeds", "mean_acc", "std_acc", "failures"),
                   [(r["name"], r["backend"], *(int(r["flags"].get(f, 0)) for f in FLAG_NAMES),
                     r["seeds"], r["mean"], r["std"], len(r["failures"])) for r in rows])
        _dump_json(out / "ablation.json", {"rows": rows})
    return rows


# --------------------------------------------------------------- drift sweep


def drift_eval(net, clock: SimClock, data: datasets.Split, times, inference_runs: int,
               calibration_fraction: float, seed: int):
    """Accuracy at ``t_end + t`` for each ``t``, without and with batch-norm recalibration.

    Returns ``(uncompensated, compensated)`` arrays of shape ``(len(times), inference_runs)``.
    """
    x_tr, _, x_te, y_te = data.as_tuple()
    cal = x_tr[calibration_subset(len(x_tr), calibration_fraction, seed)]
    t_end = clock.now
    plain = np.zeros((len(times), inference_runs))
    comp = np.zeros_like(plain)
    bns = net.batchnorm_layers
    saved = [(b.running_mean.copy(), b.running_var.copy()) for b in bns]
    for ti, t in enumerate(times):
        for r in range(inference_runs):
            with net.read_stream(1 + ti * inference_runs + r):
                plain[ti, r] = evaluate(net, x_te, y_te, t_end + t)[1]
                if bns:
                    adabs_calibrate(net, cal, t_end + t)
                    comp[ti, r] = evaluate(net, x_te, y_te, t_end + t)[1]
                    for b, (m, v) in zip(bns, saved):
                        b.running_mean, b.running_var = m.copy(), v.copy()
                else:
                    comp[ti, r] = plain[ti, r]
    return plain, comp


def run_drift_sweep(cfg: ExperimentConfig, out_dir=None, checkpoints=None):
    """Accuracy-vs-time table, averaged over training runs and inference runs.

    With no ``checkpoints``, ``drift.training_runs`` networks are trained first
    (seeds ``seed``, ``seed + 1``, ...).
    """
    d = cfg.drift
    data = datasets.load_dataset(cfg.dataset)
    out = Path(out_dir) if out_dir is not None else None
    nets = []
    if checkpoints:
        for p in checkpoints:
            net, clock, header = load_checkpoint(p)
            if clock is None:
                raise CheckpointError(f"{p}: checkpoint has no simulation clock")
            nets.append((net, clock, int(header["seed"])))
    else:
        for k in range(d.training_runs):
            s = cfg.seed + k
            res = run_training(cfg, out / f"train-s{s}" if out else None, seed=s, data=data,
                               backend=HIC, write=out is not None)
            if res.diverged:
                raise TrainingDiverged(f"drift sweep training run seed {s} diverged", res.records)
            nets.append((res.net, res.clock, s))
    plains, comps = [], []
    for net, clock, s in nets:
        p, c = drift_eval(net, clock, data, d.times, d.inference_runs, d.calibration_fraction, s)
        plains.append(p)
        comps.append(c)
    plain = np.concatenate(plains, axis=1)   # (times, runs)
    comp = np.concatenate(comps, axis=1)
    rows = []
    for ti, t in enumerate(d.times):
        rows.append({"t": float(t), "uncompensated_mean": float(plain[ti].mean()),
                     "uncompensated_std": float(plain[ti].std()),
                     "adabs_mean": float(comp[ti].mean()), "adabs_std": float(comp[ti].std()),
                     "runs": int(plain.shape[1])})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "drift.csv",
                   ("t_seconds", "uncompensated_mean", "uncompensated_std", "adabs_mean", "adabs_std", "runs"),
                   [(r["t"], r["uncompensated_mean"], r["uncompensated_std"], r["adabs_mean"],
                     r["adabs_std"], r["runs"]) for r in rows])
        _dump_json(out / "drift.json", {"rows": rows, "uncompensated": plain.tolist(),
                                        "adabs": comp.tolist()})
    return rows


# --------------------------------------------------------------- width sweep


def run_width_sweep(cfg: ExperimentConfig, out_dir=None, seeds: int | None = None,
                    backends=(HIC, FP32), workers: int = 1):
    """Accuracy against inference model size for each width multiplier."""
    n = cfg.ablation.seeds if seeds is None else seeds
    tasks = [(f"w{wm}", b, None, cfg.seed + k, wm) for b in backends
             for wm in cfg.model.width_multipliers for k in range(n)]
    results = iter(_map_runs(cfg, tasks, workers, with_bits=True))
    rows = []
    for backend in backends:
        for wm in cfg.model.width_multipliers:
            accs, bits = [], 0
            for _ in range(n):
                acc, _err, bits = next(results)
                accs.append(acc)
            mean, std = _mean_std(accs)
            rows.append({"backend": backend, "width_multiplier": wm, "model_bits": bits,
                         "mean": mean, "std": std, "accuracies": accs})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "width.csv", ("backend", "width_multiplier", "model_bits", "mean_acc", "std_acc"),
                   [(r["backend"], r["width_multiplier"], r["model_bits"], r["mean"], r["std"])
                    for r in rows])
        _dump_json(out / "width.json", {"rows": rows})
    return rows
