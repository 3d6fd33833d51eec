"""Shared builders for the test suite."""
import numpy as np

from hicsim.device import SimClock
from hicsim.harness.config import ExperimentConfig
from hicsim.harness.datasets import load_dataset
from hicsim.nn.layers import TRAIN
from hicsim.nn.network import FIXED_POINT, HIC, build_network

ALL_OFF = {"write_noise": False, "read_noise": False, "drift": False, "nonlinearity": False}


def shadow_config(**updates) -> ExperimentConfig:
    """2-16-16-2 MLP, every non-ideality off, converters bypassed."""
    base = ExperimentConfig().with_updates(
        nonidealities=ALL_OFF, converters={"enabled": False},
        model={"hidden": [16, 16], "batchnorm": False},
        dataset={"kind": "synthetic-gaussians", "samples_per_class": 200},
        training={"learning_rate": 0.05, "batch_size": 20},
    )
    return base.with_updates(**updates) if updates else base


def lockstep_shadow(steps=100, seed=0, cfg=None):
    """Train a hybrid network and its fixed-point shadow on identical batches.

    Returns the list of steps at which any layer's ``(levels, accumulators)``
    differ, plus the number of steps that moved at least one tick.
    """
    cfg = cfg or shadow_config()
    data = load_dataset(cfg.dataset)
    specs = cfg.layer_specs()
    clock_h = SimClock(0.0, 1.0)
    clock_s = SimClock(0.0, 1.0)
    hic = build_network(specs, (2,), 2, cfg.hardware(HIC), seed=seed, clock=clock_h)
    shadow = build_network(specs, (2,), 2, cfg.hardware(FIXED_POINT), seed=seed, clock=clock_s)
    lr, bs = cfg.training.learning_rate, cfg.training.batch_size
    x, y = data.x_train, data.y_train
    rng = np.random.default_rng(seed)
    mismatches, active = [], 0
    prev = None
    for step in range(1, steps + 1):
        idx = rng.choice(len(x), bs, replace=False)
        for net, clock in ((hic, clock_h), (shadow, clock_s)):
            ctx = net.context(t=clock.now, bn_mode=TRAIN)
            net.forward(x[idx], y[idx], ctx)
            net.backward(ctx)
            net.apply_updates(lr, clock)
            clock.advance()
            if step % cfg.training.refresh_interval_batches == 0:
                net.refresh(clock)
        th, ts = hic.ticks(), shadow.ticks()
        if any(not (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])) for a, b in zip(th, ts)):
            mismatches.append(step)
        flat = np.concatenate([np.concatenate([l.ravel(), a.ravel()]) for l, a in ts])
        if prev is not None and not np.array_equal(flat, prev):
            active += 1
        prev = flat
    return mismatches, active


def random_digital_net(seed):
    """Small FP32 network mixing conv, batchnorm, residual and dense layers."""
    from hicsim.nn.network import FP32, HardwareConfig, LayerSpec

    rng = np.random.default_rng(seed)
    c = int(rng.integers(2, 4))
    specs = [
        LayerSpec("conv2d", c, kernel=3, padding=1, bias=bool(rng.integers(2)), name="c0"),
        LayerSpec("batchnorm", name="bn0"),
        LayerSpec("relu", name="r0"),
        LayerSpec("conv2d", c, kernel=3, padding=1, name="c1"),
        LayerSpec("batchnorm", name="bn1"),
        LayerSpec("residual-add", name="add", inputs=["bn1", "r0"]),
        LayerSpec("relu"),
        LayerSpec("avgpool"),
        LayerSpec("dense", int(rng.integers(3, 6))),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
        LayerSpec("dense", "classes"),
        LayerSpec("softmax-xent"),
    ]
    n_classes = int(rng.integers(2, 4))
    net = build_network(specs, (4, 4, 2), n_classes, HardwareConfig(backend=FP32), seed=seed)
    x = rng.normal(size=(6, 4, 4, 2))
    y = rng.integers(0, n_classes, 6)
    return net, x, y


def gradient_check(net, x, y, h=1e-4):
    """Largest per-parameter relative error between backprop and central differences."""
    def loss():
        return net.forward(x, y, net.context(bn_mode=TRAIN))

    loss()
    net.backward(net.context(bn_mode=TRAIN))
    params = [(l.backend.w, l.backend.grad.copy()) for l in net.crossbar_layers]
    params += [(v, g.copy()) for bn in net.batchnorm_layers for v, g in bn.digital_params().values()]
    worst = 0.0
    for value, grad in params:
        flat, gflat = value.reshape(-1), grad.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = loss()
            flat[k] = old - h
            down = loss()
            flat[k] = old
            num = (up - down) / (2 * h)
            denom = max(abs(num), abs(gflat[k]), 1e-6)
            worst = max(worst, abs(num - gflat[k]) / denom)
    return worst
