"""Hybrid weight storage: multi-level MSB pairs plus a binary LSB accumulator.

Each weight ``w[i, j]`` is held as

* a differential pair ``(G+, G-)`` of multi-level devices encoding a signed
  MSB level ``l`` in ``[-L, L]`` as ``(G+ - G-) / g_unit``;
* ``lsb_bits`` binary devices holding a two's-complement update accumulator
  ``a`` in ``[-2**(lsb_bits-1), 2**(lsb_bits-1))``.

The full-precision value is ``l * delta_msb + a * delta_lsb`` where one
accumulator full-scale equals one MSB step.  Only the MSB part is used for
compute.  Accumulator overflow carries into the MSB level through an
increment-only program-and-verify loop; pairs that approach saturation are
refreshed (both devices reset, level re-encoded into one of them).

Scalar methods take ``(i, j)``; the ``*_many`` methods take flat indices and
are what the training loop uses.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from .device import (
    PLANE_LSB0,
    PLANE_MINUS,
    PLANE_PLUS,
    BinaryArray,
    DeviceModelParams,
    EventLog,
    MultiLevelArray,
    SimClock,
)
from .rng import CounterRNG

CHECKPOINT_FORMAT = "hicsim-weights"
CHECKPOINT_VERSION = 1

IDEAL = "ideal"
NOISY = "noisy"


@dataclass(frozen=True)
class QuantScheme:
    w_max: float
    msb_levels: int = 7
    lsb_bits: int = 7
    g_unit: float = 1.0

    def __post_init__(self):
        if self.w_max <= 0:
            raise ValueError("w_max must be positive")
        if self.msb_levels < 1 or self.lsb_bits < 2:
            raise ValueError("need msb_levels >= 1 and lsb_bits >= 2")
        if self.g_unit <= 0:
            raise ValueError("g_unit must be positive")

    @property
    def delta_msb(self) -> float:
        return self.w_max / self.msb_levels

    @property
    def acc_span(self) -> int:
        """Accumulator ticks per MSB step, ``2**(lsb_bits-1)``."""
        return 1 << (self.lsb_bits - 1)

    @property
    def delta_lsb(self) -> float:
        return self.delta_msb / self.acc_span

    @property
    def acc_min(self) -> int:
        return -self.acc_span

    @property
    def acc_max(self) -> int:
        return self.acc_span - 1


def to_twos_complement(values, bits: int) -> np.ndarray:
    """Bit-planes ``(bits, ...)`` of ``values``, least significant first."""
    u = np.asarray(values, dtype=np.int64) & ((1 << bits) - 1)
    return np.stack([(u >> b) & 1 for b in range(bits)]).astype(np.int8)


def from_twos_complement(planes) -> np.ndarray:
    planes = np.asarray(planes, dtype=np.int64)
    bits = planes.shape[0]
    u = sum(planes[b] << b for b in range(bits))
    return np.where(u >= (1 << (bits - 1)), u - (1 << bits), u)


def carry_split(acc, q, level, msb_levels: int, acc_span: int):
    """Integer carry rule for accumulator overflow.

    Returns ``(residual, carry, clamped)``: the carry is ``trunc((acc + q) /
    acc_span)``, limited so that ``level + carry`` stays in ``[-L, L]``; when it
    is limited the residual saturates to the accumulator range.
    """
    total = np.asarray(acc, dtype=np.int64) + np.asarray(q, dtype=np.int64)
    carry = np.sign(total) * (np.abs(total) // acc_span)
    level = np.asarray(level, dtype=np.int64)
    limited = np.clip(carry, -msb_levels - level, msb_levels - level)
    residual = np.clip(total - limited * acc_span, -acc_span, acc_span - 1)
    return residual, limited, limited != carry


@dataclass
class UpdateStats:
    flips: int = 0
    carries: int = 0
    clamps: int = 0
    tick_clips: int = 0
    msb_pulses: int = 0
    program_failures: int = 0
    refreshes: int = 0

    def __iadd__(self, other: "UpdateStats"):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


class ProgramResult(NamedTuple):
    pulses: int
    saturated: bool


class HybridWeightMatrix:
    """MSB differential-pair array plus LSB bit-plane accumulator."""

    def __init__(
        self,
        rows: int,
        cols: int,
        scheme: QuantScheme,
        params: DeviceModelParams | None = None,
        *,
        array_id: int = 0,
        rng: CounterRNG | None = None,
        log: EventLog | None = None,
        verify_tol: float = 0.25,
        max_verify_pulses: int = 20,
        refresh_threshold: float = 0.9,
        refresh_attempts: int = 3,
        lsb_read_mode: str = NOISY,
    ):
        params = params or DeviceModelParams()
        if scheme.msb_levels * scheme.g_unit > params.g_max:
            raise ValueError("msb_levels * g_unit exceeds g_max")
        if lsb_read_mode not in (IDEAL, NOISY):
            raise ValueError(f"unknown read mode {lsb_read_mode!r}")
        self.rows, self.cols = int(rows), int(cols)
        self.scheme = scheme
        self.params = params
        self.array_id = int(array_id)
        self.rng = rng or CounterRNG(0)
        self.verify_tol = float(verify_tol)
        self.max_verify_pulses = int(max_verify_pulses)
        self.refresh_threshold = float(refresh_threshold)
        self.refresh_attempts = int(refresh_attempts)
        self.lsb_read_mode = lsb_read_mode
        self.plus = MultiLevelArray(rows, cols, params, array_id, PLANE_PLUS, log)
        self.minus = MultiLevelArray(rows, cols, params, array_id, PLANE_MINUS, log)
        self.planes = BinaryArray(scheme.lsb_bits, rows, cols, params, array_id, PLANE_LSB0, log)
        self.levels = np.zeros((rows, cols), dtype=np.int64)
        self.read_ops = 0

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def size(self):
        return self.rows * self.cols

    def set_log(self, log: EventLog | None):
        self.plus.log = self.minus.log = self.planes.log = log

    def _flat(self, i, j) -> int:
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise IndexError(f"({i}, {j}) outside {self.shape}")
        return i * self.cols + j

    def _next_read(self) -> int:
        self.read_ops += 1
        return self.read_ops

    # ---------------------------------------------------------------- MSB

    def pair_conductances(self, t: float, mode: str = IDEAL, idx=None):
        """``(G+, G-)`` read ideally (programmed values) or with drift and noise."""
        if mode == IDEAL:
            gp, gm = self.plus.g_prog.reshape(-1), self.minus.g_prog.reshape(-1)
            if idx is None:
                return self.plus.g_prog.copy(), self.minus.g_prog.copy()
            return gp[idx].copy(), gm[idx].copy()
        if mode != NOISY:
            raise ValueError(f"unknown read mode {mode!r}")
        k = self._next_read()
        return (self.plus.read(t, self.rng, k, idx),
                self.minus.read(t, self.rng, k, idx))

    def ideal_levels(self, idx=None) -> np.ndarray:
        """Programmed differential in level units (no drift, no noise)."""
        gp, gm = self.pair_conductances(0.0, IDEAL, idx)
        return (gp - gm) / self.scheme.g_unit

    def msb_weights(self, t: float, mode: str = IDEAL) -> np.ndarray:
        gp, gm = self.pair_conductances(t, mode)
        return (gp - gm) / self.scheme.g_unit * self.scheme.delta_msb

    def decode_msb(self, i: int, j: int, t: float, mode: str = IDEAL) -> float:
        f = self._flat(i, j)
        gp, gm = self.pair_conductances(t, mode, np.array([f]))
        return float((gp[0] - gm[0]) / self.scheme.g_unit * self.scheme.delta_msb)

    def program_levels(self, idx, targets, clock: SimClock, rng: CounterRNG | None = None):
        """Program-and-verify the pairs at flat ``idx`` towards ``targets``.

        Each iteration reads the programmed differential and applies one SET
        pulse to G+ (below target) or G- (above).  Returns ``(pulses, ok)``;
        ``ok`` is False where the pulse budget ran out.
        """
        rng = rng or self.rng
        idx = np.asarray(idx, dtype=np.int64)
        targets = np.asarray(targets, dtype=np.float64)
        if np.any(np.abs(targets) > self.scheme.msb_levels):
            raise ValueError("target level outside [-L, L]")
        pulses = np.zeros(idx.size, dtype=np.int64)
        active = np.ones(idx.size, dtype=bool)
        gp, gm = self.plus.g_prog.reshape(-1), self.minus.g_prog.reshape(-1)
        for k in range(self.max_verify_pulses + 1):
            pos = np.flatnonzero(active)
            diff = (gp[idx[pos]] - gm[idx[pos]]) / self.scheme.g_unit - targets[pos]
            hit = np.abs(diff) <= self.verify_tol
            active[pos[hit]] = False
            pos, diff = pos[~hit], diff[~hit]
            if k == self.max_verify_pulses or pos.size == 0:
                break
            self.plus.set_pulse(idx[pos[diff < 0]], clock, rng)
            self.minus.set_pulse(idx[pos[diff > 0]], clock, rng)
            pulses[pos] += 1
        return pulses, ~active

    def program_msb(self, i: int, j: int, target_level: int, clock: SimClock,
                    rng: CounterRNG | None = None) -> ProgramResult:
        pulses, ok = self.program_levels(np.array([self._flat(i, j)]), [target_level], clock, rng)
        if ok[0]:
            self.levels[i, j] = target_level
        return ProgramResult(int(pulses[0]), not bool(ok[0]))

    def _reprogram(self, idx, targets, clock, rng, stats: UpdateStats):
        """Program with up to ``refresh_attempts`` reset-and-retry rounds."""
        pulses, ok = self.program_levels(idx, targets, clock, rng)
        stats.msb_pulses += int(pulses.sum())
        for _ in range(self.refresh_attempts):
            bad = np.flatnonzero(~ok)
            if bad.size == 0:
                break
            self.plus.reset(idx[bad], clock)
            self.minus.reset(idx[bad], clock)
            stats.refreshes += int(bad.size)
            p2, ok2 = self.program_levels(idx[bad], targets[bad], clock, rng)
            stats.msb_pulses += int(p2.sum())
            ok[bad] = ok2
        stats.program_failures += int((~ok).sum())
        lv = self.levels.reshape(-1)
        lv[idx] = np.where(ok, targets, self._nearest_level(idx))
        return ok

    def _nearest_level(self, idx):
        L = self.scheme.msb_levels
        return np.clip(np.rint(self.ideal_levels(idx)), -L, L).astype(np.int64)

    def initialize(self, levels, clock: SimClock, rng: CounterRNG | None = None) -> UpdateStats:
        """Program an initial level grid into fresh pairs; accumulators zeroed."""
        levels = np.asarray(levels, dtype=np.int64)
        if levels.shape != self.shape:
            raise ValueError(f"level grid {levels.shape} != {self.shape}")
        stats = UpdateStats()
        idx = np.flatnonzero(levels.reshape(-1))
        self._reprogram(idx, levels.reshape(-1)[idx], clock, rng or self.rng, stats)
        return stats

    # ---------------------------------------------------------------- LSB

    def read_accumulators(self, idx, t: float, mode: str | None = None) -> np.ndarray:
        mode = mode or self.lsb_read_mode
        idx = np.asarray(idx, dtype=np.int64)
        n = self.size
        fidx = (np.arange(self.scheme.lsb_bits)[:, None] * n + idx[None, :]).reshape(-1)
        if mode == IDEAL:
            bits = self.planes.state.reshape(-1)[fidx]
        elif mode == NOISY:
            bits = self.planes.read_bits(t, self.rng, self._next_read(), fidx)
        else:
            raise ValueError(f"unknown read mode {mode!r}")
        return from_twos_complement(bits.reshape(self.scheme.lsb_bits, idx.size))

    def write_accumulators(self, idx, values, clock: SimClock, rng: CounterRNG | None = None) -> int:
        idx = np.asarray(idx, dtype=np.int64)
        values = np.asarray(values, dtype=np.int64)
        s = self.scheme
        if np.any(values < s.acc_min) or np.any(values > s.acc_max):
            raise ValueError(f"accumulator value outside [{s.acc_min}, {s.acc_max}]")
        bits = to_twos_complement(values, s.lsb_bits)
        fidx = np.arange(s.lsb_bits)[:, None] * self.size + idx[None, :]
        return self.planes.write(fidx.reshape(-1), bits.reshape(-1), clock, rng or self.rng)

    def lsb_read(self, i: int, j: int, t: float, mode: str | None = None) -> int:
        return int(self.read_accumulators([self._flat(i, j)], t, mode)[0])

    def lsb_write(self, i: int, j: int, value: int, clock: SimClock,
                  rng: CounterRNG | None = None) -> int:
        return self.write_accumulators([self._flat(i, j)], [value], clock, rng)

    def accumulators(self) -> np.ndarray:
        """Logical accumulator grid (stored bit states)."""
        return from_twos_complement(self.planes.state)

    # ---------------------------------------------------------- updates

    def accumulate_many(self, idx, q, clock: SimClock, rng: CounterRNG | None = None,
                        mode: str | None = None) -> UpdateStats:
        """Add ``q`` ticks to the accumulators at flat ``idx``, carrying overflow."""
        rng = rng or self.rng
        idx = np.asarray(idx, dtype=np.int64)
        q = np.asarray(q, dtype=np.int64)
        stats = UpdateStats()
        if idx.size == 0:
            return stats
        s = self.scheme
        a = self.read_accumulators(idx, clock.now, mode)
        residual, carry, clamped = carry_split(a, q, self.levels.reshape(-1)[idx],
                                               s.msb_levels, s.acc_span)
        stats.clamps = int(clamped.sum())
        stats.flips = self.write_accumulators(idx, residual, clock, rng)
        moved = np.flatnonzero(carry)
        stats.carries = int(moved.size)
        if moved.size:
            cidx = idx[moved]
            self._reprogram(cidx, self.levels.reshape(-1)[cidx] + carry[moved], clock, rng, stats)
        return stats

    def accumulate(self, i: int, j: int, q: int, clock: SimClock,
                   rng: CounterRNG | None = None, mode: str | None = None) -> int:
        """Scalar accumulate; returns the carry applied to the MSB level."""
        before = int(self.levels[i, j])
        self.accumulate_many([self._flat(i, j)], [q], clock, rng, mode)
        return int(self.levels[i, j]) - before

    def refresh_many(self, clock: SimClock, idx=None, rng: CounterRNG | None = None,
                     force: bool = False) -> UpdateStats:
        """Refresh saturated pairs (``max(G+, G-) >= threshold * g_max``)."""
        rng = rng or self.rng
        stats = UpdateStats()
        gp, gm = self.plus.g_prog.reshape(-1), self.minus.g_prog.reshape(-1)
        idx = np.arange(self.size) if idx is None else np.asarray(idx, dtype=np.int64)
        if not force:
            limit = self.refresh_threshold * self.params.g_max
            idx = idx[np.maximum(gp[idx], gm[idx]) >= limit]
        if idx.size == 0:
            return stats
        targets = self._nearest_level(idx)
        self.plus.reset(idx, clock)
        self.minus.reset(idx, clock)
        stats.refreshes += int(idx.size)
        nz = np.flatnonzero(targets)
        self.levels.reshape(-1)[idx] = targets
        if nz.size:
            self._reprogram(idx[nz], targets[nz], clock, rng, stats)
        return stats

    def refresh(self, i: int, j: int, clock: SimClock, rng: CounterRNG | None = None) -> bool:
        return self.refresh_many(clock, np.array([self._flat(i, j)]), rng).refreshes > 0

    def decode_full(self, i: int, j: int, t: float, mode: str = IDEAL) -> float:
        return self.decode_msb(i, j, t, mode) + self.lsb_read(i, j, t, mode) * self.scheme.delta_lsb

    def full_weights(self, t: float = 0.0, mode: str = IDEAL) -> np.ndarray:
        return (self.msb_weights(t, mode)
                + self.accumulators() * self.scheme.delta_lsb)

    # --------------------------------------------------------- checkpoint

    def state_dict(self, prefix: str = "w") -> dict:
        d = {f"{prefix}.levels": self.levels, f"{prefix}.read_ops": np.array(self.read_ops)}
        d.update(self.plus.state_dict(f"{prefix}.plus"))
        d.update(self.minus.state_dict(f"{prefix}.minus"))
        d.update(self.planes.state_dict(f"{prefix}.planes"))
        return d

    def load_state_dict(self, d: dict, prefix: str = "w"):
        levels = np.asarray(d[f"{prefix}.levels"])
        if levels.shape != self.shape:
            raise ValueError(f"{prefix}.levels: shape {levels.shape} != {self.shape}")
        self.levels = levels.astype(np.int64, copy=True)
        self.read_ops = int(d[f"{prefix}.read_ops"])
        self.plus.load_state_dict(d, f"{prefix}.plus")
        self.minus.load_state_dict(d, f"{prefix}.minus")
        self.planes.load_state_dict(d, f"{prefix}.planes")


def save_arrays(path, arrays: dict, header: dict):
    """Write an ``.npz`` checkpoint with a versioned JSON header."""
    head = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **header}
    payload = {"__header__": np.array(json.dumps(head, sort_keys=True))}
    payload.update({k: np.asarray(v) for k, v in arrays.items()})
    write_npz(path, payload)


def write_npz(path, arrays: dict):
    """``np.savez`` layout with fixed entry timestamps, so equal data gives equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asarray(arrays[name]), allow_pickle=False)


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns ``(header, arrays)``."""
    with np.load(path, allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint (no header)")
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unexpected format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    return header, arrays


def save_weights(path, hw: HybridWeightMatrix, extra: dict | None = None):
    header = {
        "rows": hw.rows, "cols": hw.cols, "array_id": hw.array_id,
        "scheme": {f.name: getattr(hw.scheme, f.name) for f in fields(hw.scheme)},
        "params": {f.name: getattr(hw.params, f.name) for f in fields(hw.params)},
        "verify_tol": hw.verify_tol, "max_verify_pulses": hw.max_verify_pulses,
        "refresh_threshold": hw.refresh_threshold, "refresh_attempts": hw.refresh_attempts,
        "lsb_read_mode": hw.lsb_read_mode, "rng": [hw.rng.seed, hw.rng.stream],
        **(extra or {}),
    }
    save_arrays(path, hw.state_dict("w"), header)


def load_weights(path) -> HybridWeightMatrix:
    header, arrays = load_arrays(path)
    hw = HybridWeightMatrix(
        header["rows"], header["cols"], QuantScheme(**header["scheme"]),
        DeviceModelParams(**header["params"]), array_id=header["array_id"],
        rng=CounterRNG(*header["rng"]), verify_tol=header["verify_tol"],
        max_verify_pulses=header["max_verify_pulses"],
        refresh_threshold=header["refresh_threshold"],
        refresh_attempts=header["refresh_attempts"], lsb_read_mode=header["lsb_read_mode"],
    )
    hw.load_state_dict(arrays, "w")
    return hw


__all__ = [
    "IDEAL", "NOISY", "QuantScheme", "HybridWeightMatrix", "UpdateStats", "ProgramResult",
    "carry_split", "to_twos_complement", "from_twos_complement", "save_weights",
    "load_weights", "save_arrays", "load_arrays", "write_npz",
]
