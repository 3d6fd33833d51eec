"""Weight backends for dense/conv layers.

* :class:`AnalogWeights`: hybrid PCM storage and crossbar VMM (the simulated
  architecture).
* :class:`FixedPointWeights`: digital shadow with integer MSB levels and LSB
  ticks with the same quantized-update rule, no devices or converters.
* :class:`FloatWeights`: FP32-style baseline with plain SGD.

All three see the gradient as ``(rows, cols)`` including a bias row when the
layer has one; the bias input is a constant 1.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import rng as rngmod
from ..crossbar import ConverterConfig, Crossbar
from ..device import SimClock
from ..hybridweight import IDEAL, HybridWeightMatrix, QuantScheme, UpdateStats
from ..rng import CounterRNG

NEAREST = "nearest-even"
STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class GradQuantizer:
    rounding: str = NEAREST
    clip_ticks: int = 127

    def __post_init__(self):
        if self.rounding not in (NEAREST, STOCHASTIC):
            raise ValueError(f"unknown rounding {self.rounding!r}")
        if self.clip_ticks < 1:
            raise ValueError("clip_ticks must be >= 1")

    def __call__(self, scaled: np.ndarray, gen: np.random.Generator | None = None):
        """Integer ticks for real-valued ``scaled`` updates; returns ``(ticks, n_clipped)``."""
        if self.rounding == NEAREST:
            r = np.rint(scaled)
        else:
            if gen is None:
                raise ValueError("stochastic rounding needs a generator")
            r = np.floor(scaled + gen.random(scaled.shape))
        clipped = int(np.count_nonzero(np.abs(r) > self.clip_ticks))
        return np.clip(r, -self.clip_ticks, self.clip_ticks).astype(np.int64), clipped


def _with_bias(x):
    return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)


def quantize_and_apply(grad: np.ndarray, lr: float, quantizer: GradQuantizer,
                       weights: HybridWeightMatrix, clock: SimClock,
                       rng: CounterRNG | None = None, step: int = 0) -> UpdateStats:
    """Quantize ``-lr * grad`` to LSB ticks and accumulate them on the array."""
    gen = None
    if quantizer.rounding == STOCHASTIC:
        gen = (rng or weights.rng).generator(rngmod.ROUND, weights.array_id, step)
    ticks, clipped = quantizer(-lr * grad / weights.scheme.delta_lsb, gen)
    idx = np.flatnonzero(ticks)
    stats = weights.accumulate_many(idx, ticks.reshape(-1)[idx], clock, rng)
    stats.tick_clips = clipped
    return stats


class WeightBackend:
    rows: int
    cols: int
    bias_row: bool
    grad: np.ndarray | None = None

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, dy, ctx):
        raise NotImplementedError

    def apply_update(self, lr: float, clock: SimClock) -> UpdateStats:
        raise NotImplementedError

    def matrix(self, t: float = 0.0, mode: str = IDEAL) -> np.ndarray:
        """Effective compute weights ``(rows, cols)``."""
        raise NotImplementedError

    def state_dict(self, prefix: str) -> dict:
        raise NotImplementedError

    def load_state_dict(self, d: dict, prefix: str):
        raise NotImplementedError


class FloatWeights(WeightBackend):
    def __init__(self, w: np.ndarray, bias_row: bool = False):
        self.w = np.array(w, dtype=np.float64)
        self.rows, self.cols = self.w.shape
        self.bias_row = bias_row

    def forward(self, x, ctx):
        return (_with_bias(x) if self.bias_row else x) @ self.w

    def backward(self, dy, ctx):
        dx = dy @ self.w.T
        return dx[:, :-1] if self.bias_row else dx

    def apply_update(self, lr, clock):
        self.w -= lr * self.grad
        return UpdateStats()

    def matrix(self, t=0.0, mode=IDEAL):
        return self.w.copy()

    def state_dict(self, prefix):
        return {f"{prefix}.w": self.w}

    def load_state_dict(self, d, prefix):
        self.w = np.array(d[f"{prefix}.w"], dtype=np.float64)


class FixedPointWeights(WeightBackend):
    """Integer-exact digital model of the hybrid weight (no devices)."""

    def __init__(self, levels: np.ndarray, scheme: QuantScheme, quantizer: GradQuantizer,
                 bias_row: bool = False, array_id: int = 0, rng: CounterRNG | None = None):
        self.levels = np.array(levels, dtype=np.int64)
        self.acc = np.zeros_like(self.levels)
        self.rows, self.cols = self.levels.shape
        self.scheme, self.quantizer = scheme, quantizer
        self.bias_row = bias_row
        self.array_id = array_id
        self.rng = rng or CounterRNG(0)
        self.steps = 0

    def matrix(self, t=0.0, mode=IDEAL):
        return self.levels * self.scheme.delta_msb

    def forward(self, x, ctx):
        return (_with_bias(x) if self.bias_row else x) @ self.matrix()

    def backward(self, dy, ctx):
        dx = dy @ self.matrix().T
        return dx[:, :-1] if self.bias_row else dx

    def apply_update(self, lr, clock):
        s = self.scheme
        self.steps += 1
        gen = None
        if self.quantizer.rounding == STOCHASTIC:
            gen = self.rng.generator(rngmod.ROUND, self.array_id, self.steps)
        ticks, clipped = self.quantizer(-lr * self.grad / s.delta_lsb, gen)
        span = s.acc_span
        total = self.acc + ticks
        carry = np.trunc(total / span).astype(np.int64)
        new_levels = np.clip(self.levels + carry, -s.msb_levels, s.msb_levels)
        applied = new_levels - self.levels
        self.acc = np.clip(total - applied * span, -span, span - 1)
        stats = UpdateStats(carries=int(np.count_nonzero(applied)),
                            clamps=int(np.count_nonzero(applied != carry)), tick_clips=clipped)
        self.levels = new_levels
        return stats

    def ticks(self):
        return self.levels.copy(), self.acc.copy()

    def state_dict(self, prefix):
        return {f"{prefix}.levels": self.levels, f"{prefix}.acc": self.acc,
                f"{prefix}.steps": np.array(self.steps)}

    def load_state_dict(self, d, prefix):
        self.levels = np.array(d[f"{prefix}.levels"], dtype=np.int64)
        self.acc = np.array(d[f"{prefix}.acc"], dtype=np.int64)
        self.steps = int(d[f"{prefix}.steps"])


class AnalogWeights(WeightBackend):
    """Hybrid PCM weight matrix driven through a tiled crossbar."""

    def __init__(self, hw: HybridWeightMatrix, quantizer: GradQuantizer,
                 converters: ConverterConfig | None = None, bias_row: bool = False,
                 max_rows: int = 256, max_cols: int = 256):
        self.hw = hw
        self.rows, self.cols = hw.shape
        self.quantizer = quantizer
        self.bias_row = bias_row
        self.crossbar = Crossbar(hw, converters, max_rows, max_cols, bias_row)
        self.steps = 0

    def forward(self, x, ctx):
        return self.crossbar.vmm_forward(x, ctx.t, ctx.mode)

    def backward(self, dy, ctx):
        return self.crossbar.vmm_transpose(dy, ctx.t, ctx.mode)

    def apply_update(self, lr, clock):
        self.steps += 1
        return quantize_and_apply(self.grad, lr, self.quantizer, self.hw, clock, step=self.steps)

    def ticks(self):
        """``(levels, accumulators)`` as stored (logical LSB states)."""
        return self.hw.levels.copy(), self.hw.accumulators()

    def refresh(self, clock):
        return self.hw.refresh_many(clock)

    def matrix(self, t=0.0, mode=IDEAL):
        return self.hw.msb_weights(t, mode)

    def state_dict(self, prefix):
        d = self.hw.state_dict(prefix)
        d.update(self.crossbar.state_dict(prefix))
        d[f"{prefix}.steps"] = np.array(self.steps)
        return d

    def load_state_dict(self, d, prefix):
        self.hw.load_state_dict(d, prefix)
        self.crossbar.load_state_dict(d, prefix)
        self.steps = int(d[f"{prefix}.steps"])


__all__ = [
    "GradQuantizer", "NEAREST", "STOCHASTIC", "quantize_and_apply", "WeightBackend",
    "FloatWeights", "FixedPointWeights", "AnalogWeights",
]
