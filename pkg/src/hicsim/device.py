"""Statistical PCM device models.

Two cell flavours are modelled:

* multi-level cells (one half of a differential MSB pair), programmed only by
  partial SET pulses whose mean increment falls off as ``delta0 / n`` with the
  pulse index ``n`` since the last RESET;
* binary cells (one bit of the LSB accumulator), written by read-and-flip.

Both carry power-law conductance drift referenced to their last programming
time, additive Gaussian write and read noise, and write-erase cycle counters.

Scalar dataclasses (:class:`MultiLevelDevice`, :class:`BinaryDevice`) are the
reference semantics.  :class:`MultiLevelArray` and :class:`BinaryArray` apply the
same rules to whole grids at once and draw the same random numbers, so a scalar
device and the matching array element stay bit-identical.

Conductances are in µS, times in seconds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .rng import CounterRNG

# event kinds in the programming log
EV_SET = 1
EV_RESET = 2
EV_BIT_SET = 3
EV_BIT_RESET = 4

PLANE_PLUS = 0
PLANE_MINUS = 1
PLANE_LSB0 = 2


class ClockOrderError(ValueError):
    """A read was requested before the device's last programming time."""


@dataclass(frozen=True)
class DeviceModelParams:
    """PCM model parameters.

    The defaults are calibration placeholders: they give roughly fifteen
    resolvable differential levels at ``g_unit = 1 µS`` and visible drift over
    1e6 to 1e7 s.  ``delta_linear`` is the constant SET increment used when the
    nonlinear programming curve is switched off.
    """

    g_max: float = 25.0
    g_min: float = 0.1
    delta0: float = 3.0
    sigma_write: float = 1.0
    sigma_read: float = 0.2
    nu_mean: float = 0.05
    nu_sigma: float = 0.02
    t0: float = 1.0
    g_high: float = 20.0
    g_threshold: float = 5.0
    pulses_per_cycle: int = 10
    delta_linear: float = 1.0
    nonlinear: bool = True

    def __post_init__(self):
        if not (0 <= self.g_min < self.g_threshold < self.g_high <= self.g_max):
            raise ValueError(
                "need 0 <= g_min < g_threshold < g_high <= g_max, got "
                f"{self.g_min}, {self.g_threshold}, {self.g_high}, {self.g_max}"
            )
        if self.delta0 <= 0 or self.delta_linear <= 0:
            raise ValueError("SET increments must be positive")
        if self.sigma_write < 0 or self.sigma_read < 0 or self.nu_sigma < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")
        if self.pulses_per_cycle < 1:
            raise ValueError("pulses_per_cycle must be >= 1")

    def with_nonidealities(
        self,
        write_noise: bool = True,
        read_noise: bool = True,
        drift: bool = True,
        nonlinearity: bool = True,
    ) -> "DeviceModelParams":
        """Copy with the disabled non-idealities zeroed out."""
        changes = {}
        if not write_noise:
            changes["sigma_write"] = 0.0
        if not read_noise:
            changes["sigma_read"] = 0.0
        if not drift:
            changes["nu_mean"] = 0.0
            changes["nu_sigma"] = 0.0
        if not nonlinearity:
            changes["nonlinear"] = False
        return replace(self, **changes)


@dataclass
class SimClock:
    now: float = 0.0
    seconds_per_batch: float = 1.0

    def __post_init__(self):
        if self.seconds_per_batch <= 0:
            raise ValueError("seconds_per_batch must be positive")

    def advance(self, batches: int = 1) -> float:
        self.now += batches * self.seconds_per_batch
        return self.now

    def advance_to(self, t: float) -> float:
        if t < self.now:
            raise ClockOrderError(f"clock cannot move backwards ({t} < {self.now})")
        self.now = float(t)
        return self.now


def drift_factor(t, t_prog, nu, t0):
    """Power-law drift multiplier ``((t - t_prog + t0) / t0) ** -nu``."""
    return ((t - t_prog + t0) / t0) ** (-nu)


def mean_increment(n, params: DeviceModelParams):
    """Expected SET increment of the ``n``-th pulse after RESET."""
    if params.nonlinear:
        return params.delta0 / n
    return params.delta_linear


# --------------------------------------------------------------------------
# scalar devices


@dataclass
class MultiLevelDevice:
    g_prog: float
    t_prog: float = 0.0
    nu: float = 0.0
    n_set: int = 0
    set_in_cycle: int = 0
    cycles: int = 0
    events: int = 0
    key: tuple = (0, PLANE_PLUS, 0, 0)  # (array_id, plane, row, col)

    @classmethod
    def fresh(cls, params: DeviceModelParams, key=(0, PLANE_PLUS, 0, 0)):
        return cls(g_prog=params.g_min, key=tuple(key))


@dataclass
class BinaryDevice:
    g_prog: float
    state: int = 0
    t_prog: float = 0.0
    nu: float = 0.0
    flips: int = 0
    cycles: int = 0
    events: int = 0
    key: tuple = (0, PLANE_LSB0, 0, 0)

    @classmethod
    def fresh(cls, params: DeviceModelParams, key=(0, PLANE_LSB0, 0, 0)):
        return cls(g_prog=params.g_min, key=tuple(key))


def _sample_nu(params, rng, key, counter):
    if params.nu_sigma == 0:
        return max(0.0, params.nu_mean)
    z = float(rng.normal(rngmod.DRIFT, *key, counter)[0])
    return max(0.0, params.nu_mean + params.nu_sigma * z)


def _write_noise(params, rng, key, counter):
    if params.sigma_write == 0:
        return 0.0
    return params.sigma_write * float(rng.normal(rngmod.WRITE, *key, counter)[0])


def _clamp(g, params):
    return min(params.g_max, max(params.g_min, g))


def set_pulse(dev: MultiLevelDevice, params: DeviceModelParams, clock: SimClock,
              rng: CounterRNG) -> MultiLevelDevice:
    """Apply one partial SET pulse; the increment lands on the drifted state."""
    g_now = dev.g_prog * drift_factor(clock.now, dev.t_prog, dev.nu, params.t0)
    dev.n_set += 1
    dev.events += 1
    g = g_now + mean_increment(dev.n_set, params) + _write_noise(params, rng, dev.key, dev.events)
    dev.g_prog = _clamp(g, params)
    dev.t_prog = clock.now
    dev.nu = _sample_nu(params, rng, dev.key, dev.events)
    dev.set_in_cycle += 1
    if dev.set_in_cycle > params.pulses_per_cycle:
        dev.cycles += 1
        dev.set_in_cycle = 1
    return dev


def reset(dev, params: DeviceModelParams, clock: SimClock):
    """RESET a multi-level or binary device to ``g_min``.

    Closes the open write-erase cycle.  A RESET with no SET pulses since the
    previous one only counts when it actually changes the device state.
    """
    if isinstance(dev, BinaryDevice):
        if dev.state == 0:
            return dev
        dev.state = 0
        dev.flips += 1
        dev.cycles += 1
    else:
        if dev.set_in_cycle > 0:
            dev.cycles += 1
        elif dev.g_prog != params.g_min:
            dev.cycles += 1
        else:
            return dev
        dev.n_set = 0
        dev.set_in_cycle = 0
    dev.events += 1
    dev.g_prog = params.g_min
    dev.t_prog = clock.now
    return dev


def read_analog(dev, params: DeviceModelParams, t: float, rng: CounterRNG | None = None,
                read_index: int = 0) -> float:
    """Drifted conductance plus additive read noise, floored at zero.

    The device is not modified; ``read_index`` selects the noise draw.
    """
    if t < dev.t_prog:
        raise ClockOrderError(f"read at t={t} precedes last programming at {dev.t_prog}")
    g = dev.g_prog * drift_factor(t, dev.t_prog, dev.nu, params.t0)
    if params.sigma_read > 0 and rng is not None:
        g += params.sigma_read * float(rng.normal(rngmod.READ, *dev.key, read_index)[0])
    return max(0.0, g)


def write_bit(dev: BinaryDevice, bit: int, params: DeviceModelParams, clock: SimClock,
              rng: CounterRNG) -> BinaryDevice:
    """Read-and-flip write: devices already holding ``bit`` are untouched."""
    bit = int(bit)
    if bit not in (0, 1):
        raise ValueError(f"bit must be 0 or 1, got {bit}")
    if bit == dev.state:
        return dev
    if bit == 0:
        return reset(dev, params, clock)
    dev.events += 1
    dev.state = 1
    dev.g_prog = _clamp(params.g_high + _write_noise(params, rng, dev.key, dev.events), params)
    dev.t_prog = clock.now
    dev.nu = _sample_nu(params, rng, dev.key, dev.events)
    dev.flips += 1
    return dev


def read_bit(dev: BinaryDevice, params: DeviceModelParams, t: float,
             rng: CounterRNG | None = None, read_index: int = 0) -> int:
    return int(read_analog(dev, params, t, rng, read_index) > params.g_threshold)


# --------------------------------------------------------------------------
# vectorised grids


@dataclass
class EventLog:
    """Append-only programming event log: one entry per device programming."""

    chunks: list = field(default_factory=list)

    def record(self, array_id: int, plane, index, kind: int):
        index = np.asarray(index, dtype=np.int64).ravel()
        if index.size == 0:
            return
        plane = np.broadcast_to(np.asarray(plane, dtype=np.int16), index.shape)
        self.chunks.append((
            np.full(index.shape, array_id, dtype=np.int32),
            plane.astype(np.int16),
            index.astype(np.int32),
            np.full(index.shape, kind, dtype=np.int8),
        ))

    def arrays(self):
        if not self.chunks:
            empty = np.zeros(0, dtype=np.int32)
            return {"array_id": empty, "plane": empty.astype(np.int16),
                    "index": empty, "kind": empty.astype(np.int8)}
        cols = list(zip(*self.chunks))
        return {
            "array_id": np.concatenate(cols[0]),
            "plane": np.concatenate(cols[1]),
            "index": np.concatenate(cols[2]),
            "kind": np.concatenate(cols[3]),
        }

    def __len__(self):
        return sum(len(c[0]) for c in self.chunks)


class _GridBase:
    def __init__(self, rows: int, cols: int, params: DeviceModelParams, array_id: int = 0,
                 log: EventLog | None = None):
        self.rows, self.cols = int(rows), int(cols)
        self.params = params
        self.array_id = int(array_id)
        self.log = log

    @property
    def shape(self):
        return (self.rows, self.cols)

    def _rc(self, idx):
        return np.divmod(idx, self.cols)

    def _noise(self, rng, purpose, plane, idx, counter):
        r, c = self._rc(idx)
        return rng.normal(purpose, self.array_id, plane, r, c, counter)

    def drifted(self, t: float, idx=None) -> np.ndarray:
        """Noise-free drifted conductance at time ``t``."""
        g, tp, nu = self.g_prog, self.t_prog, self.nu
        if idx is not None:
            g, tp, nu = g.reshape(-1)[idx], tp.reshape(-1)[idx], nu.reshape(-1)[idx]
        if np.any(t < tp):
            raise ClockOrderError(f"read at t={t} precedes last programming time")
        if not np.any(nu):
            return g.copy()
        return g * drift_factor(t, tp, nu, self.params.t0)

    def read(self, t: float, rng: CounterRNG | None = None, read_index: int = 0, idx=None,
             plane=None) -> np.ndarray:
        """Per-device noisy read (``read_analog`` over the grid or ``idx``)."""
        g = self.drifted(t, idx)
        if self.params.sigma_read > 0 and rng is not None:
            flat = np.arange(self.rows * self.cols) if idx is None else np.asarray(idx)
            r, c = self._rc(flat)
            z = rng.normal(rngmod.READ, self.array_id, self._plane if plane is None else plane,
                           r, c, read_index)
            g = g + self.params.sigma_read * z.reshape(g.shape)
        return np.maximum(g, 0.0)

    def _sample_nu(self, rng, plane, idx, counter):
        p = self.params
        if p.nu_sigma == 0:
            return np.full(len(idx), max(0.0, p.nu_mean))
        z = self._noise(rng, rngmod.DRIFT, plane, idx, counter)
        return np.maximum(0.0, p.nu_mean + p.nu_sigma * z)

    def _write_noise(self, rng, plane, idx, counter):
        if self.params.sigma_write == 0:
            return np.zeros(len(idx))
        return self.params.sigma_write * self._noise(rng, rngmod.WRITE, plane, idx, counter)


class MultiLevelArray(_GridBase):
    """Grid of multi-level devices sharing one plane of an array."""

    def __init__(self, rows, cols, params, array_id=0, plane=PLANE_PLUS, log=None):
        super().__init__(rows, cols, params, array_id, log)
        self._plane = int(plane)
        shape = (self.rows, self.cols)
        self.g_prog = np.full(shape, params.g_min)
        self.t_prog = np.zeros(shape)
        self.nu = np.zeros(shape)
        self.n_set = np.zeros(shape, dtype=np.int64)
        self.set_in_cycle = np.zeros(shape, dtype=np.int64)
        self.cycles = np.zeros(shape, dtype=np.int64)
        self.events = np.zeros(shape, dtype=np.int64)

    @property
    def plane(self):
        return self._plane

    def set_pulse(self, idx, clock: SimClock, rng: CounterRNG):
        """One SET pulse on each flat index in ``idx`` (indices must be unique)."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return
        p = self.params
        g, tp, nu = self.g_prog.reshape(-1), self.t_prog.reshape(-1), self.nu.reshape(-1)
        n_set, sic = self.n_set.reshape(-1), self.set_in_cycle.reshape(-1)
        cyc, ev = self.cycles.reshape(-1), self.events.reshape(-1)

        g_now = g[idx] * drift_factor(clock.now, tp[idx], nu[idx], p.t0)
        n_set[idx] += 1
        ev[idx] += 1
        counter = ev[idx]
        inc = p.delta0 / n_set[idx] if p.nonlinear else p.delta_linear
        g[idx] = np.clip(g_now + inc + self._write_noise(rng, self._plane, idx, counter), p.g_min, p.g_max)
        tp[idx] = clock.now
        nu[idx] = self._sample_nu(rng, self._plane, idx, counter)
        s = sic[idx] + 1
        over = s > p.pulses_per_cycle
        cyc[idx[over]] += 1
        s[over] = 1
        sic[idx] = s
        if self.log is not None:
            self.log.record(self.array_id, self._plane, idx, EV_SET)

    def reset(self, idx, clock: SimClock):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            return
        p = self.params
        g, sic = self.g_prog.reshape(-1), self.set_in_cycle.reshape(-1)
        changes = (sic[idx] > 0) | (g[idx] != p.g_min)
        idx = idx[changes]
        if idx.size == 0:
            return
        self.cycles.reshape(-1)[idx] += 1
        self.n_set.reshape(-1)[idx] = 0
        sic[idx] = 0
        self.events.reshape(-1)[idx] += 1
        g[idx] = p.g_min
        self.t_prog.reshape(-1)[idx] = clock.now
        if self.log is not None:
            self.log.record(self.array_id, self._plane, idx, EV_RESET)

    def device(self, i: int, j: int) -> MultiLevelDevice:
        """Scalar snapshot of one element."""
        return MultiLevelDevice(
            g_prog=float(self.g_prog[i, j]), t_prog=float(self.t_prog[i, j]),
            nu=float(self.nu[i, j]), n_set=int(self.n_set[i, j]),
            set_in_cycle=int(self.set_in_cycle[i, j]), cycles=int(self.cycles[i, j]),
            events=int(self.events[i, j]), key=(self.array_id, self._plane, i, j),
        )

    def state_dict(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("g_prog", "t_prog", "nu", "n_set", "set_in_cycle", "cycles", "events")}

    def load_state_dict(self, d: dict, prefix: str):
        for k in ("g_prog", "t_prog", "nu", "n_set", "set_in_cycle", "cycles", "events"):
            arr = np.asarray(d[f"{prefix}.{k}"])
            if arr.shape != self.shape:
                raise ValueError(f"{prefix}.{k}: shape {arr.shape} != {self.shape}")
            setattr(self, k, arr.astype(getattr(self, k).dtype, copy=True))


class BinaryArray(_GridBase):
    """``planes`` grids of binary devices (bit-planes of an accumulator)."""

    def __init__(self, planes, rows, cols, params, array_id=0, first_plane=PLANE_LSB0, log=None):
        super().__init__(rows, cols, params, array_id, log)
        self.planes = int(planes)
        self.first_plane = int(first_plane)
        self._plane = self.first_plane
        shape = (self.planes, self.rows, self.cols)
        self.state = np.zeros(shape, dtype=np.int8)
        self.g_prog = np.full(shape, params.g_min)
        self.t_prog = np.zeros(shape)
        self.nu = np.zeros(shape)
        self.flips = np.zeros(shape, dtype=np.int64)
        self.cycles = np.zeros(shape, dtype=np.int64)
        self.events = np.zeros(shape, dtype=np.int64)

    def _split(self, fidx):
        # flat index over (planes, rows, cols) -> plane, within-plane index
        return np.divmod(fidx, self.rows * self.cols)

    def drifted(self, t, idx=None):
        g, tp, nu = self.g_prog, self.t_prog, self.nu
        if idx is not None:
            g, tp, nu = g.reshape(-1)[idx], tp.reshape(-1)[idx], nu.reshape(-1)[idx]
        if np.any(t < tp):
            raise ClockOrderError(f"read at t={t} precedes last programming time")
        if not np.any(nu):
            return g.copy()
        return g * drift_factor(t, tp, nu, self.params.t0)

    def read(self, t, rng=None, read_index=0, idx=None, plane=None):
        g = self.drifted(t, idx)
        if self.params.sigma_read > 0 and rng is not None:
            fidx = np.arange(self.state.size) if idx is None else np.asarray(idx)
            pl, within = self._split(fidx)
            r, c = self._rc(within)
            z = rng.normal(rngmod.READ, self.array_id, self.first_plane + pl, r, c, read_index)
            g = g + self.params.sigma_read * z.reshape(g.shape)
        return np.maximum(g, 0.0)

    def read_bits(self, t, rng=None, read_index=0, idx=None) -> np.ndarray:
        return (self.read(t, rng, read_index, idx) > self.params.g_threshold).astype(np.int8)

    def write(self, fidx, bits, clock: SimClock, rng: CounterRNG) -> int:
        """Read-and-flip write over flat ``(plane, row, col)`` indices.

        Returns the number of devices flipped.
        """
        fidx = np.asarray(fidx, dtype=np.int64)
        bits = np.asarray(bits, dtype=np.int8)
        st = self.state.reshape(-1)
        differ = st[fidx] != bits
        fidx, bits = fidx[differ], bits[differ]
        if fidx.size == 0:
            return 0
        p = self.params
        g, tp, nu = self.g_prog.reshape(-1), self.t_prog.reshape(-1), self.nu.reshape(-1)
        ev = self.events.reshape(-1)
        ev[fidx] += 1
        self.flips.reshape(-1)[fidx] += 1
        st[fidx] = bits
        tp[fidx] = clock.now

        up = fidx[bits == 1]
        if up.size:
            pl, within = self._split(up)
            counter = ev[up]
            noise = (np.zeros(up.size) if p.sigma_write == 0
                     else p.sigma_write * self._noise(rng, rngmod.WRITE, self.first_plane + pl, within, counter))
            g[up] = np.clip(p.g_high + noise, p.g_min, p.g_max)
            if p.nu_sigma == 0:
                nu[up] = max(0.0, p.nu_mean)
            else:
                z = self._noise(rng, rngmod.DRIFT, self.first_plane + pl, within, counter)
                nu[up] = np.maximum(0.0, p.nu_mean + p.nu_sigma * z)
        down = fidx[bits == 0]
        if down.size:
            g[down] = p.g_min
            self.cycles.reshape(-1)[down] += 1
        if self.log is not None:
            pl_up, w_up = self._split(up)
            pl_dn, w_dn = self._split(down)
            self.log.record(self.array_id, self.first_plane + pl_up, w_up, EV_BIT_SET)
            self.log.record(self.array_id, self.first_plane + pl_dn, w_dn, EV_BIT_RESET)
        return int(fidx.size)

    def device(self, b: int, i: int, j: int) -> BinaryDevice:
        return BinaryDevice(
            g_prog=float(self.g_prog[b, i, j]), state=int(self.state[b, i, j]),
            t_prog=float(self.t_prog[b, i, j]), nu=float(self.nu[b, i, j]),
            flips=int(self.flips[b, i, j]), cycles=int(self.cycles[b, i, j]),
            events=int(self.events[b, i, j]), key=(self.array_id, self.first_plane + b, i, j),
        )

    _FIELDS = ("state", "g_prog", "t_prog", "nu", "flips", "cycles", "events")

    def state_dict(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in self._FIELDS}

    def load_state_dict(self, d: dict, prefix: str):
        for k in self._FIELDS:
            arr = np.asarray(d[f"{prefix}.{k}"])
            if arr.shape != self.state.shape:
                raise ValueError(f"{prefix}.{k}: shape {arr.shape} != {self.state.shape}")
            setattr(self, k, arr.astype(getattr(self, k).dtype, copy=True))


def replay_cycles(kinds: np.ndarray, pulses_per_cycle: int) -> int:
    """Write-erase cycles implied by one device's event sequence.

    Independent of the device state machines: a RESET closes
    ``ceil(k / pulses_per_cycle)`` cycles for ``k`` SETs since the previous
    RESET (at least one), and an open run of ``k`` SETs has already closed
    ``(k - 1) // pulses_per_cycle`` cycles.
    """
    cycles = 0
    run = 0
    for k in kinds:
        if k in (EV_SET, EV_BIT_SET):
            run += 1
        elif k in (EV_RESET, EV_BIT_RESET):
            cycles += max(1, math.ceil(run / pulses_per_cycle))
            run = 0
    if run:
        cycles += (run - 1) // pulses_per_cycle
    return cycles
