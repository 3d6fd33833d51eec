"""Transposable analog crossbar VMM with DAC/ADC quantization and tiling.

A layer's weight matrix (rows = inputs, cols = outputs) lives on one
:class:`~hicsim.hybridweight.HybridWeightMatrix`.  The physical array is split
into tiles of at most ``max_rows x max_cols``; each tile output goes through its
own ADC and partial sums along the input dimension are added digitally.
Convolutions are lowered to the same VMM with :func:`im2col`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import rng as rngmod
from .hybridweight import IDEAL, NOISY, HybridWeightMatrix

FIXED = "fixed"
PERCENTILE = "percentile-from-warmup"

# cap on elements of one (ops, rows, cols) noisy weight block
_BLOCK_ELEMENTS = 1 << 22


@dataclass
class ConverterConfig:
    enabled: bool = True
    dac_bits: int = 8
    adc_bits: int = 8
    input_clip: float = 1.0
    output_clip: float = 1.0
    grad_input_clip: float = 1.0
    grad_output_clip: float = 1.0
    calibration: str = PERCENTILE
    percentile: float = 99.7
    warmup_batches: int = 10
    quantize_backward: bool = True

    def __post_init__(self):
        if self.dac_bits < 1 or self.adc_bits < 1:
            raise ValueError("converter bits must be >= 1")
        for name in ("input_clip", "output_clip", "grad_input_clip", "grad_output_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.calibration not in (FIXED, PERCENTILE):
            raise ValueError(f"unknown calibration policy {self.calibration!r}")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must be in (0, 100]")


def quantize_symmetric(x, bits: int, clip: float) -> np.ndarray:
    """Uniform symmetric quantizer with ``2**bits - 1`` levels on ``[-clip, clip]``.

    Saturating, round-half-to-even.
    """
    half = (1 << (bits - 1)) - 1
    if half == 0:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    step = clip / half
    codes = np.clip(np.rint(np.asarray(x, dtype=np.float64) / step), -half, half)
    return codes * step


def dac_quantize(x, cfg: ConverterConfig, clip: float | None = None) -> np.ndarray:
    if not cfg.enabled:
        return np.asarray(x, dtype=np.float64)
    return quantize_symmetric(x, cfg.dac_bits, cfg.input_clip if clip is None else clip)


def adc_quantize(y, cfg: ConverterConfig, clip: float | None = None) -> np.ndarray:
    if not cfg.enabled:
        return np.asarray(y, dtype=np.float64)
    return quantize_symmetric(y, cfg.adc_bits, cfg.output_clip if clip is None else clip)


# ---------------------------------------------------------------- tiling


@dataclass(frozen=True)
class Tile:
    row0: int
    row1: int
    col0: int
    col1: int


@dataclass
class TilingPlan:
    rows: int
    cols: int
    max_rows: int
    max_cols: int
    tiles: list = field(default_factory=list)

    @property
    def row_blocks(self):
        return sorted({(t.row0, t.row1) for t in self.tiles})

    @property
    def col_blocks(self):
        return sorted({(t.col0, t.col1) for t in self.tiles})

    def __len__(self):
        return len(self.tiles)


def _blocks(n, size):
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def plan_tiles(rows: int, cols: int, max_rows: int = 256, max_cols: int = 256) -> TilingPlan:
    if rows < 1 or cols < 1:
        raise ValueError("matrix must be non-empty")
    if max_rows < 1 or max_cols < 1:
        raise ValueError("tile limits must be positive")
    tiles = [Tile(r0, r1, c0, c1) for r0, r1 in _blocks(rows, max_rows)
             for c0, c1 in _blocks(cols, max_cols)]
    return TilingPlan(rows, cols, max_rows, max_cols, tiles)


def map_layer(kind: str, shape, max_rows: int = 256, max_cols: int = 256, bias: bool = False) -> TilingPlan:
    """Tiling plan for a dense ``(in, out)`` or conv2d ``(kh, kw, cin, cout)`` layer."""
    if kind == "dense":
        n_in, n_out = shape
        rows, cols = n_in, n_out
    elif kind == "conv2d":
        kh, kw, cin, cout = shape
        rows, cols = kh * kw * cin, cout
    else:
        raise ValueError(f"layer kind {kind!r} has no crossbar mapping")
    return plan_tiles(rows + int(bias), cols, max_rows, max_cols)


# ---------------------------------------------------------------- im2col


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """NHWC input to ``(B*Ho*Wo, kh*kw*C)`` patches, ordered ``(kh, kw, C)``."""
    b, h, w, c = x.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # win: (B, Ho, Wo, C, kh, kw)
    return win[:, :ho, :wo].transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to an NHWC array."""
    b, h, w, c = x_shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    patches = cols.reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += patches[:, :, :, i, j, :]
    if pad:
        out = out[:, pad:pad + h, pad:pad + w, :]
    return out


# ------------------------------------------------------------- crossbar


class ClipTracker:
    """Clip range for one converter: fixed, or the warmup percentile frozen."""

    def __init__(self, value: float, policy: str, percentile: float):
        self.value = float(value)
        self.policy = policy
        self.percentile = percentile
        self.frozen = policy == FIXED
        self._samples: list[np.ndarray] = []

    def clip_for(self, x: np.ndarray) -> float:
        if self.frozen:
            return self.value
        mags = np.abs(x).ravel()
        if mags.size > 65536:
            mags = mags[:: mags.size // 65536 + 1]
        self._samples.append(mags)
        peak = float(mags.max()) if mags.size else 0.0
        return peak if peak > 0 else self.value

    def freeze(self):
        if self.frozen:
            return
        if self._samples:
            p = float(np.percentile(np.concatenate(self._samples), self.percentile))
            if p > 0:
                self.value = p
        self._samples = []
        self.frozen = True


class CrossbarTile:
    """View of one physical tile on a weight matrix."""

    def __init__(self, weights: HybridWeightMatrix, tile: Tile):
        self.weights = weights
        self.tile = tile
        if tile.row1 > weights.rows or tile.col1 > weights.cols:
            raise ValueError("tile exceeds weight matrix")

    @property
    def shape(self):
        return (self.tile.row1 - self.tile.row0, self.tile.col1 - self.tile.col0)


class Crossbar:
    """Forward and transposed analog VMM over a tiled hybrid weight matrix."""

    def __init__(self, weights: HybridWeightMatrix, converters: ConverterConfig | None = None,
                 max_rows: int = 256, max_cols: int = 256, bias_row: bool = False):
        self.weights = weights
        self.cfg = converters or ConverterConfig(enabled=False)
        self.plan = plan_tiles(weights.rows, weights.cols, max_rows, max_cols)
        self.tiles = [CrossbarTile(weights, t) for t in self.plan.tiles]
        self.bias_row = bias_row
        pol, pct = self.cfg.calibration, self.cfg.percentile
        self.clips = {
            "fwd_in": ClipTracker(self.cfg.input_clip, pol, pct),
            "fwd_out": ClipTracker(self.cfg.output_clip, pol, pct),
            "bwd_in": ClipTracker(self.cfg.grad_input_clip, pol, pct),
            "bwd_out": ClipTracker(self.cfg.grad_output_clip, pol, pct),
        }

    def freeze_calibration(self):
        for c in self.clips.values():
            c.freeze()

    @property
    def calibrated(self) -> bool:
        return all(c.frozen for c in self.clips.values())

    # weight reads ------------------------------------------------------

    def _weight_blocks(self, t: float, mode: str, n_ops: int):
        """Yield ``(start, stop, W)``; ``W`` is ``(rows, cols)`` or per-op ``(n, rows, cols)``."""
        hw = self.weights
        s = hw.scheme
        scale = s.delta_msb / s.g_unit
        if mode == IDEAL:
            yield 0, n_ops, hw.msb_weights(t, IDEAL)
            return
        if mode != NOISY:
            raise ValueError(f"unknown read mode {mode!r}")
        gp = hw.plus.drifted(t)
        gm = hw.minus.drifted(t)
        sigma = hw.params.sigma_read
        if sigma == 0:
            yield 0, n_ops, (np.maximum(gp, 0) - np.maximum(gm, 0)) * scale
            return
        op = hw._next_read()
        gen_p = hw.rng.generator(rngmod.READ, hw.array_id, hw.plus.plane, op)
        gen_m = hw.rng.generator(rngmod.READ, hw.array_id, hw.minus.plane, op)
        chunk = max(1, _BLOCK_ELEMENTS // hw.size)
        for start in range(0, n_ops, chunk):
            n = min(chunk, n_ops - start)
            zp = gen_p.standard_normal((n,) + hw.shape)
            zm = gen_m.standard_normal((n,) + hw.shape)
            w = np.maximum(gp + sigma * zp, 0.0)
            w -= np.maximum(gm + sigma * zm, 0.0)
            w *= scale
            yield start, start + n, w

    @staticmethod
    def _apply(x, w):
        if w.ndim == 2:
            return x @ w
        return np.einsum("ni,nij->nj", x, w)

    @staticmethod
    def _apply_t(dy, w):
        if w.ndim == 2:
            return dy @ w.T
        return np.einsum("nj,nij->ni", dy, w)

    # VMM ---------------------------------------------------------------

    def vmm_forward(self, x: np.ndarray, t: float, mode: str = NOISY) -> np.ndarray:
        """``y = adc(dac(x) @ W)`` for a batch of row vectors ``x``.

        With ``bias_row`` set, ``x`` omits the last row's input, which is driven
        at a constant 1 outside the DAC.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n_in = self.weights.rows - int(self.bias_row)
        if x.shape[1] != n_in:
            raise ValueError(f"input length {x.shape[1]} != crossbar rows {n_in}")
        cfg = self.cfg
        if cfg.enabled:
            x = dac_quantize(x, cfg, self.clips["fwd_in"].clip_for(x))
        if self.bias_row:
            x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
        y = np.zeros((x.shape[0], self.weights.cols))
        raw = [] if cfg.enabled else None
        for a, b, w in self._weight_blocks(t, mode, x.shape[0]):
            for r0, r1 in self.plan.row_blocks:
                for c0, c1 in self.plan.col_blocks:
                    wt = w[..., r0:r1, c0:c1]
                    part = self._apply(x[a:b, r0:r1], wt)
                    if raw is None:
                        y[a:b, c0:c1] += part
                    else:
                        raw.append((a, b, c0, c1, part))
        if raw is not None:
            clip = self.clips["fwd_out"].clip_for(np.concatenate([p[4].ravel() for p in raw]))
            for a, b, c0, c1, part in raw:
                y[a:b, c0:c1] += adc_quantize(part, cfg, clip)
        return y

    def vmm_transpose(self, dy: np.ndarray, t: float, mode: str = NOISY) -> np.ndarray:
        """``dx = adc(dac(dy) @ W.T)`` over the same devices (fresh read noise)."""
        dy = np.atleast_2d(np.asarray(dy, dtype=np.float64))
        if dy.shape[1] != self.weights.cols:
            raise ValueError(f"gradient length {dy.shape[1]} != crossbar cols {self.weights.cols}")
        cfg = self.cfg
        quant = cfg.enabled and cfg.quantize_backward
        if quant:
            dy = dac_quantize(dy, cfg, self.clips["bwd_in"].clip_for(dy))
        dx = np.zeros((dy.shape[0], self.weights.rows))
        raw = [] if quant else None
        for a, b, w in self._weight_blocks(t, mode, dy.shape[0]):
            for r0, r1 in self.plan.row_blocks:
                for c0, c1 in self.plan.col_blocks:
                    part = self._apply_t(dy[a:b, c0:c1], w[..., r0:r1, c0:c1])
                    if raw is None:
                        dx[a:b, r0:r1] += part
                    else:
                        raw.append((a, b, r0, r1, part))
        if raw is not None:
            clip = self.clips["bwd_out"].clip_for(np.concatenate([p[4].ravel() for p in raw]))
            for a, b, r0, r1, part in raw:
                dx[a:b, r0:r1] += adc_quantize(part, cfg, clip)
        if self.bias_row:
            dx = dx[:, :-1]
        return dx

    def state_dict(self, prefix: str) -> dict:
        return {f"{prefix}.clip.{k}": np.array([c.value, float(c.frozen)]) for k, c in self.clips.items()}

    def load_state_dict(self, d: dict, prefix: str):
        for k, c in self.clips.items():
            value, frozen = d[f"{prefix}.clip.{k}"]
            c.value, c.frozen = float(value), bool(frozen)
            c._samples = []
