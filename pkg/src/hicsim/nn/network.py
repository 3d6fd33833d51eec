"""Layer graphs, the width-multiplier builder, and network checkpoints."""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..crossbar import ConverterConfig
from ..device import DeviceModelParams, EventLog, SimClock
from ..hybridweight import NOISY, HybridWeightMatrix, QuantScheme, UpdateStats, load_arrays, save_arrays
from ..rng import CounterRNG
from .backends import AnalogWeights, FixedPointWeights, FloatWeights, GradQuantizer
from .layers import (
    AvgPool,
    BatchNorm,
    Context,
    Conv2d,
    CrossbarLayer,
    Dense,
    ReLU,
    ResidualAdd,
    SoftmaxXent,
)

HIC = "hic"
FIXED_POINT = "fixed-point"
FP32 = "fp32"
BACKENDS = (HIC, FIXED_POINT, FP32)

LAYER_KINDS = ("dense", "conv2d", "batchnorm", "relu", "residual-add", "avgpool", "softmax-xent")


@dataclass
class LayerSpec:
    """One layer of an architecture description.

    ``units`` is the neuron/channel count of dense and conv2d layers (or
    ``"classes"`` for the classifier); ``inputs`` names earlier layers, and
    defaults to the previous layer.
    """

    kind: str
    units: int | str | None = None
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    bias: bool | None = None
    name: str | None = None
    inputs: list | None = None
    scale: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv2d") and self.units is None:
            raise ValueError(f"{self.kind} layer needs units")

    @property
    def uses_crossbar(self):
        return self.kind in ("dense", "conv2d")


@dataclass
class HardwareConfig:
    """How crossbar-layer weights are stored and updated."""

    backend: str = HIC
    device: DeviceModelParams = field(default_factory=DeviceModelParams)
    msb_levels: int = 7
    lsb_bits: int = 7
    g_unit: float = 1.0
    w_max_sigmas: float = 3.0
    verify_tol: float = 0.25
    max_verify_pulses: int = 20
    refresh_threshold: float = 0.9
    refresh_attempts: int = 3
    lsb_read_mode: str = NOISY
    converters: ConverterConfig = field(default_factory=ConverterConfig)
    max_rows: int = 256
    max_cols: int = 256
    quantizer: GradQuantizer = field(default_factory=GradQuantizer)

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["device"] = DeviceModelParams(**d["device"])
        d["converters"] = ConverterConfig(**d["converters"])
        d["quantizer"] = GradQuantizer(**d["quantizer"])
        return cls(**d)


def scale_width(units: int, multiplier: float) -> int:
    """Neuron/channel count after a width multiplier, nearest integer, at least 1."""
    return max(1, int(math.floor(units * multiplier + 0.5)))


def mlp_specs(hidden=(32, 32), batchnorm: bool = True) -> list:
    specs = []
    for h in hidden:
        specs.append(LayerSpec("dense", h, bias=not batchnorm))
        if batchnorm:
            specs.append(LayerSpec("batchnorm"))
        specs.append(LayerSpec("relu"))
    specs.append(LayerSpec("dense", "classes", bias=True))
    specs.append(LayerSpec("softmax-xent"))
    return specs


def resnet_specs(channels=(8, 16), blocks_per_stage: int = 1) -> list:
    """Small ResNet: conv stem, residual stages, global pool, classifier."""
    specs = [LayerSpec("conv2d", channels[0], kernel=3, padding=1, name="stem"),
             LayerSpec("batchnorm"), LayerSpec("relu", name="s0")]
    prev = "s0"
    for si, ch in enumerate(channels):
        for bi in range(blocks_per_stage):
            stride = 2 if (si > 0 and bi == 0) else 1
            tag = f"st{si}b{bi}"
            specs += [
                LayerSpec("conv2d", ch, kernel=3, stride=stride, padding=1, name=f"{tag}c1", inputs=[prev]),
                LayerSpec("batchnorm"), LayerSpec("relu"),
                LayerSpec("conv2d", ch, kernel=3, padding=1, name=f"{tag}c2"),
                LayerSpec("batchnorm", name=f"{tag}bn2"),
            ]
            shortcut = prev
            if stride != 1 or (si > 0 and bi == 0):
                specs += [LayerSpec("conv2d", ch, kernel=1, stride=stride, name=f"{tag}sc", inputs=[prev]),
                          LayerSpec("batchnorm", name=f"{tag}scbn")]
                shortcut = f"{tag}scbn"
            specs += [LayerSpec("residual-add", name=f"{tag}add", inputs=[f"{tag}bn2", shortcut]),
                      LayerSpec("relu", name=f"{tag}out")]
            prev = f"{tag}out"
    specs += [LayerSpec("avgpool"), LayerSpec("dense", "classes", bias=True), LayerSpec("softmax-xent")]
    return specs


@dataclass
class Node:
    name: str
    layer: object
    inputs: list
    shape: tuple


class Network:
    """A layer DAG evaluated in list order; the last node is the loss."""

    def __init__(self, nodes: list, input_shape: tuple, n_classes: int, specs: list,
                 hardware: HardwareConfig, seed: int, width_multiplier: float = 1.0,
                 log: EventLog | None = None):
        self.nodes = nodes
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.specs = specs
        self.hardware = hardware
        self.seed = seed
        self.width_multiplier = width_multiplier
        self.log = log
        self.init_stats = UpdateStats()
        self._index = {n.name: i for i, n in enumerate(nodes)}
        ctx_need = {}
        for n in nodes:
            if isinstance(n.layer, CrossbarLayer):
                ctx_need[id(n.layer)] = any(src != "input" for src in n.inputs)
        self._need_input_grad = ctx_need

    # structure ------------------------------------------------------------

    @property
    def crossbar_layers(self):
        return [n.layer for n in self.nodes if isinstance(n.layer, CrossbarLayer)]

    @property
    def batchnorm_layers(self):
        return [n.layer for n in self.nodes if isinstance(n.layer, BatchNorm)]

    @property
    def analog_backends(self):
        return [l.backend for l in self.crossbar_layers if isinstance(l.backend, AnalogWeights)]

    def parameter_count(self) -> int:
        n = sum(l.weight_shape[0] * l.weight_shape[1] for l in self.crossbar_layers)
        return n + sum(2 * b.channels for b in self.batchnorm_layers)

    def weight_count(self) -> int:
        return sum(l.weight_shape[0] * l.weight_shape[1] for l in self.crossbar_layers)

    # passes -------------------------------------------------------------

    def context(self, **kw) -> Context:
        ctx = Context(**kw)
        ctx.need_input_grad = self._need_input_grad
        return ctx

    def _run(self, x, ctx, upto):
        acts = {"input": np.asarray(x, dtype=np.float64)}
        for n in self.nodes[:upto]:
            acts[n.name] = n.layer.forward([acts[s] for s in n.inputs], ctx)
        return acts

    def forward(self, x, labels, ctx: Context):
        """Loss over the batch; logits are kept on ``self.logits``."""
        ctx.labels = labels
        acts = self._run(x, ctx, len(self.nodes))
        last = self.nodes[-1]
        self.logits = acts[last.inputs[0]]
        return float(acts[last.name])

    def predict(self, x, ctx: Context) -> np.ndarray:
        acts = self._run(x, ctx, len(self.nodes) - 1)
        return acts[self.nodes[-1].inputs[0]]

    def backward(self, ctx: Context):
        grads = {self.nodes[-1].name: 1.0}
        for n in reversed(self.nodes):
            g = grads.pop(n.name, None)
            if g is None:
                continue
            for src, gi in zip(n.inputs, n.layer.backward(g, ctx)):
                if src == "input" or gi is None:
                    continue
                grads[src] = gi if src not in grads else grads[src] + gi

    def apply_updates(self, lr: float, clock: SimClock) -> UpdateStats:
        stats = UpdateStats()
        for layer in self.crossbar_layers:
            stats += layer.backend.apply_update(lr, clock)
        for bn in self.batchnorm_layers:
            bn.gamma -= lr * bn.dgamma
            bn.beta -= lr * bn.dbeta
        return stats

    def refresh(self, clock: SimClock) -> UpdateStats:
        stats = UpdateStats()
        for b in self.analog_backends:
            stats += b.refresh(clock)
        return stats

    def freeze_converters(self):
        for b in self.analog_backends:
            b.crossbar.freeze_calibration()

    def ticks(self):
        """Per-layer ``(levels, accumulators)`` for fixed-point and hybrid backends."""
        return [l.backend.ticks() for l in self.crossbar_layers]

    @contextlib.contextmanager
    def read_stream(self, stream: int):
        """Temporarily switch analog read noise to an independent stream."""
        saved = [(b.hw.rng, b.hw.read_ops) for b in self.analog_backends]
        for b in self.analog_backends:
            b.hw.rng = b.hw.rng.with_stream(stream)
            b.hw.read_ops = 0
        try:
            yield self
        finally:
            for b, (r, k) in zip(self.analog_backends, saved):
                b.hw.rng, b.hw.read_ops = r, k

    # state ------------------------------------------------------------------

    def state_dict(self) -> dict:
        d = {}
        for n in self.nodes:
            if isinstance(n.layer, CrossbarLayer):
                d.update(n.layer.backend.state_dict(n.name))
            elif isinstance(n.layer, BatchNorm):
                bn = n.layer
                for k in ("gamma", "beta", "running_mean", "running_var"):
                    d[f"{n.name}.{k}"] = getattr(bn, k)
        return d

    def load_state_dict(self, d: dict):
        for n in self.nodes:
            if isinstance(n.layer, CrossbarLayer):
                n.layer.backend.load_state_dict(d, n.name)
            elif isinstance(n.layer, BatchNorm):
                for k in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(n.layer, k, np.array(d[f"{n.name}.{k}"], dtype=np.float64))


def _make_layer(spec: LayerSpec, shape, n_classes, multiplier):
    if spec.kind in ("dense", "conv2d"):
        if spec.units == "classes":
            units = n_classes
        elif isinstance(spec.units, str):
            raise ValueError(f"bad units {spec.units!r}")
        else:
            units = scale_width(int(spec.units), multiplier) if spec.scale else int(spec.units)
        bias = bool(spec.bias) if spec.bias is not None else spec.kind == "dense"
        if spec.kind == "dense":
            if len(shape) != 1:
                raise ValueError(f"dense layer needs a flat input, got shape {shape}")
            return Dense(shape[0], units, bias)
        if len(shape) != 3:
            raise ValueError(f"conv2d layer needs an (H, W, C) input, got shape {shape}")
        return Conv2d(shape[2], units, spec.kernel, spec.stride, spec.padding, bias)
    if spec.kind == "batchnorm":
        return BatchNorm(shape[-1])
    return {"relu": ReLU, "residual-add": ResidualAdd, "avgpool": AvgPool,
            "softmax-xent": SoftmaxXent}[spec.kind]()


def _make_backend(layer: CrossbarLayer, index: int, hardware: HardwareConfig, seed: int,
                  clock: SimClock, log: EventLog | None, stats: UpdateStats):
    rows, cols = layer.weight_shape
    std = math.sqrt(2.0 / layer.fan_in)
    w = np.random.default_rng([seed, 1000 + index]).normal(0.0, std, (rows, cols))
    if layer.bias:
        w[-1] = 0.0
    if hardware.backend == FP32:
        return FloatWeights(w, layer.bias)
    scheme = QuantScheme(hardware.w_max_sigmas * std, hardware.msb_levels, hardware.lsb_bits,
                         hardware.g_unit)
    L = scheme.msb_levels
    levels = np.clip(np.rint(w / scheme.delta_msb), -L, L).astype(np.int64)
    rng = CounterRNG(seed)
    array_id = index + 1
    if hardware.backend == FIXED_POINT:
        return FixedPointWeights(levels, scheme, hardware.quantizer, layer.bias, array_id, rng)
    hw = HybridWeightMatrix(
        rows, cols, scheme, hardware.device, array_id=array_id, rng=rng, log=log,
        verify_tol=hardware.verify_tol, max_verify_pulses=hardware.max_verify_pulses,
        refresh_threshold=hardware.refresh_threshold, refresh_attempts=hardware.refresh_attempts,
        lsb_read_mode=hardware.lsb_read_mode,
    )
    stats += hw.initialize(levels, clock)
    return AnalogWeights(hw, hardware.quantizer, hardware.converters, layer.bias,
                         hardware.max_rows, hardware.max_cols)


def build_network(specs: list, input_shape, n_classes: int, hardware: HardwareConfig | None = None,
                  seed: int = 0, width_multiplier: float = 1.0, clock: SimClock | None = None,
                  log: EventLog | None = None) -> Network:
    """Instantiate ``specs`` with neuron/channel counts scaled by ``width_multiplier``."""
    if width_multiplier <= 0:
        raise ValueError("width multiplier must be positive")
    hardware = hardware or HardwareConfig()
    clock = clock or SimClock()
    specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
    if not specs or specs[-1].kind != "softmax-xent":
        raise ValueError("architecture must end with a softmax-xent layer")
    shapes = {"input": tuple(input_shape)}
    nodes, prev = [], "input"
    init_stats = UpdateStats()
    n_crossbar = 0
    for i, spec in enumerate(specs):
        name = spec.name or f"L{i:02d}-{spec.kind}"
        if name in shapes:
            raise ValueError(f"duplicate layer name {name!r}")
        if spec.kind == "residual-add":
            inputs = list(spec.inputs or [])
            if len(inputs) == 1:
                inputs = [prev] + inputs
            if len(inputs) < 2:
                raise ValueError(f"{name}: residual-add needs two inputs")
        else:
            inputs = list(spec.inputs or [prev])
            if len(inputs) != 1:
                raise ValueError(f"{name}: {spec.kind} takes exactly one input")
        for src in inputs:
            if src not in shapes:
                raise ValueError(f"{name}: unknown or later input {src!r}")
        layer = _make_layer(spec, shapes[inputs[0]], n_classes, width_multiplier)
        shape = layer.output_shape(*[shapes[s] for s in inputs])
        if isinstance(layer, CrossbarLayer):
            layer.backend = _make_backend(layer, n_crossbar, hardware, seed, clock, log, init_stats)
            n_crossbar += 1
        shapes[name] = shape
        nodes.append(Node(name, layer, inputs, shape))
        prev = name
    net = Network(nodes, input_shape, n_classes, specs, hardware, seed, width_multiplier, log)
    net.init_stats = init_stats
    return net


# ------------------------------------------------------------- checkpoints


def save_network(path, net: Network, clock: SimClock | None = None, extra: dict | None = None):
    header = {
        "kind": "network",
        "specs": [asdict(s) for s in net.specs],
        "input_shape": list(net.input_shape),
        "n_classes": net.n_classes,
        "hardware": net.hardware.to_dict(),
        "seed": net.seed,
        "width_multiplier": net.width_multiplier,
        "clock": None if clock is None else [clock.now, clock.seconds_per_batch],
        **(extra or {}),
    }
    save_arrays(path, net.state_dict(), header)


def load_network(path, log: EventLog | None = None):
    """Rebuild a network from :func:`save_network`; returns ``(net, clock, header)``."""
    header, arrays = load_arrays(path)
    if header.get("kind") != "network":
        raise ValueError(f"{path}: not a network checkpoint")
    hardware = HardwareConfig.from_dict(header["hardware"])
    # rebuild with a throwaway clock; device state comes from the arrays
    net = build_network([LayerSpec(**s) for s in header["specs"]], header["input_shape"],
                        header["n_classes"], hardware, header["seed"], header["width_multiplier"],
                        SimClock(), None)
    net.load_state_dict(arrays)
    if log is not None:
        for b in net.analog_backends:
            b.hw.set_log(log)
        net.log = log
    clock = None if header["clock"] is None else SimClock(*header["clock"])
    return net, clock, header
