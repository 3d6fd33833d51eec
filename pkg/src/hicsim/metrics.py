"""Run metrics records and their CSV layout."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, fields

# fixed column order of the per-epoch metrics CSV
CSV_COLUMNS = (
    "run_id", "epoch", "step", "lr", "train_loss", "train_acc", "test_loss", "test_acc",
    "flips", "carries", "clamps", "tick_clips", "msb_pulses", "refreshes",
    "program_failures", "sim_time",
)


@dataclass
class MetricsRecord:
    run_id: str
    epoch: int
    step: int
    lr: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    flips: int = 0
    carries: int = 0
    clamps: int = 0
    tick_clips: int = 0
    msb_pulses: int = 0
    refreshes: int = 0
    program_failures: int = 0
    sim_time: float = 0.0
    wall_clock: float = 0.0

    def as_dict(self):
        return asdict(self)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records, wall_clock: bool = False) -> str:
    cols = CSV_COLUMNS + (("wall_clock",) if wall_clock else ())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        d = r.as_dict()
        w.writerow([_fmt(d[c]) for c in cols])
    return buf.getvalue()


def records_from_csv(text: str) -> list:
    types = {f.name: f.type for f in fields(MetricsRecord)}
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kw = {}
        for k, v in row.items():
            t = types[k]
            kw[k] = v if t == "str" else (int(v) if t == "int" else float(v))
        out.append(MetricsRecord(**kw))
    return out
