"""Experiment configuration: a validated YAML document.

Every section rejects unknown keys.  ``ExperimentConfig()`` is the toy
spirals setup; :func:`load_config` reads a file and :meth:`ExperimentConfig.to_yaml`
writes every field back out, so an exhaustive file round-trips unchanged.
"""
from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..crossbar import FIXED, PERCENTILE, ConverterConfig
from ..device import DeviceModelParams
from ..hybridweight import NOISY
from ..nn.backends import NEAREST, STOCHASTIC, GradQuantizer
from ..nn.network import FIXED_POINT, FP32, HIC, LAYER_KINDS, HardwareConfig, LayerSpec, mlp_specs, resnet_specs
from ..nn.train import TrainingConfig
from . import datasets


class ConfigError(ValueError):
    """Config file missing, unparseable, or failing validation."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DeviceSection(_Section):
    g_max: float = 25.0
    g_min: float = 0.1
    delta0: float = Field(3.0, gt=0)
    sigma_write: float = Field(1.0, ge=0)
    sigma_read: float = Field(0.2, ge=0)
    nu_mean: float = 0.05
    nu_sigma: float = Field(0.02, ge=0)
    t0: float = Field(1.0, gt=0)
    g_high: float = 20.0
    g_threshold: float = 5.0
    pulses_per_cycle: int = Field(10, ge=1)
    delta_linear: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _order(self):
        if not 0 <= self.g_min < self.g_threshold < self.g_high <= self.g_max:
            raise ValueError("need 0 <= g_min < g_threshold < g_high <= g_max")
        return self


class NonidealitySection(_Section):
    write_noise: bool = True
    read_noise: bool = True
    drift: bool = True
    nonlinearity: bool = True


class QuantSection(_Section):
    msb_levels: int = Field(7, ge=1)
    lsb_bits: int = Field(7, ge=2)
    g_unit: float = Field(1.0, gt=0)
    w_max_sigmas: float = Field(3.0, gt=0)
    verify_tol: float = Field(0.25, gt=0)
    max_verify_pulses: int = Field(20, ge=1)
    refresh_threshold: float = Field(0.9, gt=0, le=1)
    refresh_attempts: int = Field(3, ge=0)
    lsb_read_mode: Literal["ideal", "noisy"] = NOISY
    rounding: Literal["nearest-even", "stochastic"] = NEAREST
    clip_ticks: int = Field(127, ge=1)


class ConverterSection(_Section):
    enabled: bool = True
    dac_bits: int = Field(8, ge=1)
    adc_bits: int = Field(8, ge=1)
    input_clip: float = Field(1.0, gt=0)
    output_clip: float = Field(1.0, gt=0)
    grad_input_clip: float = Field(1.0, gt=0)
    grad_output_clip: float = Field(1.0, gt=0)
    calibration: Literal["percentile-from-warmup", "fixed"] = PERCENTILE
    percentile: float = Field(99.7, gt=0, le=100)
    warmup_batches: int = Field(10, ge=0)
    quantize_backward: bool = True


class CrossbarSection(_Section):
    max_rows: int = Field(256, ge=1)
    max_cols: int = Field(256, ge=1)


class LayerSection(_Section):
    kind: Literal["dense", "conv2d", "batchnorm", "relu", "residual-add", "avgpool", "softmax-xent"]
    units: int | Literal["classes"] | None = None
    kernel: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    bias: bool | None = None
    name: str | None = None
    inputs: list[str] | None = None
    scale: bool = True


class ModelSection(_Section):
    backend: Literal["hic", "fixed-point", "fp32"] = HIC
    preset: Literal["mlp", "resnet", "custom"] = "mlp"
    hidden: list[int] = Field(default_factory=lambda: [32, 32])
    batchnorm: bool = True
    channels: list[int] = Field(default_factory=lambda: [8, 16])
    blocks_per_stage: int = Field(1, ge=1)
    layers: list[LayerSection] = Field(default_factory=list)
    width_multiplier: float = Field(1.0, gt=0)
    width_multipliers: list[float] = Field(default_factory=lambda: [0.5, 1.0, 1.7, 2.0])

    @model_validator(mode="after")
    def _layers(self):
        if self.preset == "custom" and not self.layers:
            raise ValueError("preset 'custom' needs a layers list")
        if any(m <= 0 for m in self.width_multipliers):
            raise ValueError("width multipliers must be positive")
        return self


class TrainingSection(_Section):
    learning_rate: float = Field(0.05, gt=0)
    lr_decay_factor: float = Field(0.45, gt=0, lt=1)
    lr_decay_epochs: list[int] | None = None
    batch_size: int = Field(100, ge=1)
    epochs: int = Field(30, ge=0)
    refresh_interval_batches: int = Field(10, ge=1)
    seconds_per_batch: float = Field(1.0, gt=0)


class DatasetSection(_Section):
    kind: Literal["synthetic-gaussians", "synthetic-spirals", "image-idx", "csv"] = datasets.SPIRALS
    n_classes: int | None = Field(2, ge=2)
    samples_per_class: int = Field(500, ge=1)
    dim: int = Field(2, ge=1)
    separation: float = 2.0
    turns: float = 1.0
    noise: float = Field(0.05, ge=0)
    path: str | None = None
    labels_path: str | None = None
    label_column: int = -1
    test_fraction: float = Field(0.25, gt=0, lt=1)
    normalization: Literal["none", "standard", "unit"] = "none"
    seed: int = Field(0, ge=0)


class AblationSection(_Section):
    seeds: int = Field(5, ge=1)
    include_fp32: bool = True


class DriftSection(_Section):
    times: list[float] = Field(default_factory=lambda: [100.0, 1e3, 1e4, 1e5, 1e6, 1e7, 4e7])
    training_runs: int = Field(3, ge=1)
    inference_runs: int = Field(3, ge=1)
    calibration_fraction: float = Field(0.05, gt=0, le=1)

    @model_validator(mode="after")
    def _times(self):
        if not self.times or any(t <= 0 for t in self.times):
            raise ValueError("drift times must be a non-empty list of positive seconds")
        if list(self.times) != sorted(self.times):
            raise ValueError("drift times must be increasing")
        return self


class EnduranceSection(_Section):
    limit: float = Field(1e8, gt=0)
    bins: int = Field(20, ge=1)


class OutputSection(_Section):
    dir: str = "runs"
    record_wall_clock: bool = False
    checkpoint: bool = True
    event_log: bool = True


class ExperimentConfig(_Section):
    name: str = "toy-spirals"
    seed: int = Field(0, ge=0, lt=2**64)
    device: DeviceSection = Field(default_factory=DeviceSection)
    nonidealities: NonidealitySection = Field(default_factory=NonidealitySection)
    quant: QuantSection = Field(default_factory=QuantSection)
    converters: ConverterSection = Field(default_factory=ConverterSection)
    crossbar: CrossbarSection = Field(default_factory=CrossbarSection)
    model: ModelSection = Field(default_factory=ModelSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    ablation: AblationSection = Field(default_factory=AblationSection)
    drift: DriftSection = Field(default_factory=DriftSection)
    endurance: EnduranceSection = Field(default_factory=EnduranceSection)
    output: OutputSection = Field(default_factory=OutputSection)

    # --- conversions into the engine's types ------------------------------

    def device_params(self) -> DeviceModelParams:
        p = DeviceModelParams(**self.device.model_dump())
        f = self.nonidealities
        return p.with_nonidealities(f.write_noise, f.read_noise, f.drift, f.nonlinearity)

    def hardware(self, backend: str | None = None) -> HardwareConfig:
        q = self.quant
        return HardwareConfig(
            backend=backend or self.model.backend,
            device=self.device_params(),
            msb_levels=q.msb_levels, lsb_bits=q.lsb_bits, g_unit=q.g_unit,
            w_max_sigmas=q.w_max_sigmas, verify_tol=q.verify_tol,
            max_verify_pulses=q.max_verify_pulses, refresh_threshold=q.refresh_threshold,
            refresh_attempts=q.refresh_attempts,
            lsb_read_mode=q.lsb_read_mode,
            converters=ConverterConfig(**self.converters.model_dump()),
            max_rows=self.crossbar.max_rows, max_cols=self.crossbar.max_cols,
            quantizer=GradQuantizer(q.rounding, q.clip_ticks),
        )

    def training_config(self, seed: int | None = None, width_multiplier: float | None = None) -> TrainingConfig:
        t = self.training
        return TrainingConfig(
            learning_rate=t.learning_rate, lr_decay_factor=t.lr_decay_factor,
            lr_decay_epochs=t.lr_decay_epochs, batch_size=t.batch_size, epochs=t.epochs,
            refresh_interval_batches=t.refresh_interval_batches,
            width_multiplier=self.model.width_multiplier if width_multiplier is None else width_multiplier,
            seconds_per_batch=t.seconds_per_batch,
            seed=self.seed if seed is None else seed,
        )

    def layer_specs(self) -> list:
        m = self.model
        if m.preset == "mlp":
            return mlp_specs(tuple(m.hidden), m.batchnorm)
        if m.preset == "resnet":
            return resnet_specs(tuple(m.channels), m.blocks_per_stage)
        return [LayerSpec(**l.model_dump()) for l in m.layers]

    # --- text form ---------------------------------------------------------

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def with_updates(self, **sections) -> "ExperimentConfig":
        """Copy with nested overrides, e.g. ``with_updates(training={"epochs": 2})``."""
        data = self.model_dump()
        for key, val in sections.items():
            if isinstance(val, dict) and isinstance(data.get(key), dict):
                data[key].update(val)
            else:
                data[key] = val
        return ExperimentConfig.model_validate(data)


assert set(LAYER_KINDS) == set(LayerSection.model_fields["kind"].annotation.__args__)
assert {FIXED, PERCENTILE} == set(ConverterSection.model_fields["calibration"].annotation.__args__)
assert {NEAREST, STOCHASTIC} == set(QuantSection.model_fields["rounding"].annotation.__args__)
assert {HIC, FIXED_POINT, FP32} == set(ModelSection.model_fields["backend"].annotation.__args__)


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"{source}: YAML parse error: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        lines = [f"{source}: invalid config"]
        for err in e.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"  {loc}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from e


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read config ({e.strerror})") from e
    return parse_config(text, str(path))
