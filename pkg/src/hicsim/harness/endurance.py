"""Write-erase cycle accounting across a network's PCM arrays."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..device import PLANE_LSB0, EventLog, replay_cycles
from ..hybridweight import write_npz

EVENT_FIELDS = ("array_id", "plane", "index", "kind")


class EventLogError(ValueError):
    """Event log missing, corrupt, or inconsistent with device counters."""


@dataclass
class EnduranceReport:
    msb_hist: list
    msb_edges: list
    lsb_hist: list
    lsb_edges: list
    msb_max: int
    msb_mean: float
    lsb_max: int
    lsb_mean: float
    n_msb_devices: int
    n_lsb_devices: int
    limit: float
    mismatches: int = 0
    events: int = 0
    per_array: dict = field(default_factory=dict)

    @property
    def max_cycles(self) -> int:
        return max(self.msb_max, self.lsb_max)

    @property
    def fraction_of_limit(self) -> float:
        return self.max_cycles / self.limit

    @property
    def verified(self) -> bool:
        return self.mismatches == 0

    def as_dict(self):
        return {
            "msb": {"hist": self.msb_hist, "edges": self.msb_edges, "max": self.msb_max,
                    "mean": self.msb_mean, "devices": self.n_msb_devices},
            "lsb": {"hist": self.lsb_hist, "edges": self.lsb_edges, "max": self.lsb_max,
                    "mean": self.lsb_mean, "devices": self.n_lsb_devices},
            "per_array": self.per_array,
            "limit": self.limit,
            "max_cycles": self.max_cycles,
            "fraction_of_limit": self.fraction_of_limit,
            "events": self.events,
            "replay_mismatches": self.mismatches,
        }


def _device_counters(hws):
    """``{(array_id, plane): (cycles_flat, pulses_per_cycle)}`` from live matrices."""
    out = {}
    for hw in hws:
        ppc = hw.params.pulses_per_cycle
        out[(hw.array_id, hw.plus.plane)] = (hw.plus.cycles.reshape(-1), ppc)
        out[(hw.array_id, hw.minus.plane)] = (hw.minus.cycles.reshape(-1), ppc)
        for b in range(hw.planes.planes):
            out[(hw.array_id, PLANE_LSB0 + b)] = (hw.planes.cycles[b].reshape(-1), ppc)
    return out


def replay_log(events: dict, counters: dict) -> dict:
    """Cycle counts per ``(array_id, plane)`` rebuilt from the raw event log alone."""
    aid, plane, index, kind = (np.asarray(events[k]) for k in EVENT_FIELDS)
    if not (len(aid) == len(plane) == len(index) == len(kind)):
        raise EventLogError("event log columns differ in length")
    replayed = {key: np.zeros_like(c) for key, (c, _) in counters.items()}
    if len(aid) == 0:
        return replayed
    order = np.lexsort((index, plane, aid))  # stable: keeps time order within a device
    a, p, i, k = aid[order], plane[order], index[order], kind[order]
    cuts = np.flatnonzero((np.diff(a) != 0) | (np.diff(p) != 0) | (np.diff(i) != 0)) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [len(a)]])
    for s, e in zip(starts, stops):
        key = (int(a[s]), int(p[s]))
        if key not in counters:
            raise EventLogError(f"event for unknown array/plane {key}")
        counts, ppc = counters[key]
        if not 0 <= i[s] < len(counts):
            raise EventLogError(f"event index {int(i[s])} out of range for array/plane {key}")
        replayed[key][i[s]] = replay_cycles(k[s:e], ppc)
    return replayed


def _hist(values: np.ndarray, bins: int):
    if values.size == 0:
        return [], []
    hi = max(1, int(values.max()))
    edges = np.linspace(0, hi + 1, min(bins, hi + 1) + 1)
    h, e = np.histogram(values, bins=edges)
    return h.tolist(), e.tolist()


def endurance_report(hws, events: dict | EventLog | None, limit: float = 1e8, bins: int = 20,
                     verify: bool = True) -> EnduranceReport:
    """Histogram cycle counters of ``hws`` and check them against the event log."""
    if isinstance(events, EventLog):
        events = events.arrays()
    if verify and events is None:
        raise EventLogError("no event log available for verification")
    counters = _device_counters(hws)
    mismatches, n_events = 0, 0
    if verify:
        replayed = replay_log(events, counters)
        n_events = len(events["kind"])
        for key, (c, _) in counters.items():
            mismatches += int(np.count_nonzero(replayed[key] != c))
    msb = [c for (aid, pl), (c, _) in counters.items() if pl < PLANE_LSB0]
    lsb = [c for (aid, pl), (c, _) in counters.items() if pl >= PLANE_LSB0]
    msb = np.concatenate(msb) if msb else np.zeros(0, dtype=np.int64)
    lsb = np.concatenate(lsb) if lsb else np.zeros(0, dtype=np.int64)
    per_array = {}
    for hw in hws:
        m = np.concatenate([hw.plus.cycles.ravel(), hw.minus.cycles.ravel()])
        per_array[str(hw.array_id)] = {"msb_max": int(m.max(initial=0)),
                                       "lsb_max": int(hw.planes.cycles.max(initial=0))}
    mh, me = _hist(msb, bins)
    lh, le = _hist(lsb, bins)
    return EnduranceReport(
        msb_hist=mh, msb_edges=me, lsb_hist=lh, lsb_edges=le,
        msb_max=int(msb.max(initial=0)), msb_mean=float(msb.mean()) if msb.size else 0.0,
        lsb_max=int(lsb.max(initial=0)), lsb_mean=float(lsb.mean()) if lsb.size else 0.0,
        n_msb_devices=int(msb.size), n_lsb_devices=int(lsb.size), limit=float(limit),
        mismatches=mismatches, events=n_events, per_array=per_array,
    )


def save_event_log(path, log: EventLog):
    write_npz(path, log.arrays())


def load_event_log(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise EventLogError(f"{path}: event log not found")
    try:
        with np.load(path, allow_pickle=False) as z:
            missing = [k for k in EVENT_FIELDS if k not in z.files]
            if missing:
                raise EventLogError(f"{path}: missing columns {missing}")
            return {k: z[k] for k in EVENT_FIELDS}
    except (OSError, ValueError) as e:
        if isinstance(e, EventLogError):
            raise
        raise EventLogError(f"{path}: corrupt event log ({e})") from e


def events_to_csv(events: dict) -> str:
    """Textual export: one ``array_id,plane,index,kind`` row per event, in log order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_FIELDS)
    for row in zip(*(np.asarray(events[k]).tolist() for k in EVENT_FIELDS)):
        w.writerow(row)
    return buf.getvalue()


__all__ = ["EnduranceReport", "EventLogError", "endurance_report", "replay_log",
           "save_event_log", "load_event_log", "events_to_csv"]
