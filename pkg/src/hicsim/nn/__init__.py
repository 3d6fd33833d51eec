"""Network engine on top of the crossbar/hybrid-weight simulator."""
from .backends import (
    NEAREST,
    STOCHASTIC,
    AnalogWeights,
    FixedPointWeights,
    FloatWeights,
    GradQuantizer,
    quantize_and_apply,
)
from .layers import CALIBRATE, EVAL, TRAIN, Context
from .network import (
    FIXED_POINT,
    FP32,
    HIC,
    HardwareConfig,
    LayerSpec,
    Network,
    build_network,
    load_network,
    mlp_specs,
    resnet_specs,
    save_network,
    scale_width,
)
from .train import (
    TrainingConfig,
    TrainingDiverged,
    adabs_calibrate,
    calibration_subset,
    evaluate,
    train,
)
