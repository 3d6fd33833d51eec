import math

import numpy as np
import pytest
from helpers import ALL_OFF, gradient_check, lockstep_shadow, random_digital_net, shadow_config
from hypothesis import given, settings
from hypothesis import strategies as st

from hicsim.device import EV_BIT_RESET, EV_BIT_SET, PLANE_LSB0, DeviceModelParams, EventLog, SimClock
from hicsim.harness.datasets import load_dataset
from hicsim.hybridweight import IDEAL, HybridWeightMatrix, QuantScheme
from hicsim.nn import (
    FIXED_POINT,
    FP32,
    HIC,
    GradQuantizer,
    HardwareConfig,
    LayerSpec,
    TrainingConfig,
    adabs_calibrate,
    build_network,
    calibration_subset,
    evaluate,
    mlp_specs,
    quantize_and_apply,
    scale_width,
    train,
)
from hicsim.nn.layers import EVAL, TRAIN, BatchNorm, Context, SoftmaxXent

QUIET = DeviceModelParams().with_nonidealities(False, False, False, False)


def hic_hardware(**kw):
    from hicsim.crossbar import ConverterConfig
    kw.setdefault("converters", ConverterConfig(enabled=False))
    return HardwareConfig(backend=HIC, device=QUIET, **kw)


class TestForward:
    def test_identity_dense(self):
        spec = [LayerSpec("dense", 3, bias=False), LayerSpec("softmax-xent")]
        net = build_network(spec, (3,), 3, hic_hardware(), seed=0)
        hw = net.analog_backends[0].hw
        fresh = HybridWeightMatrix(3, 3, hw.scheme, QUIET)
        fresh.initialize(np.eye(3, dtype=int), SimClock())
        net.analog_backends[0].hw = fresh
        net.analog_backends[0].crossbar.weights = fresh
        x = np.array([[0.5, -1.0, 2.0]])
        out = net.predict(x, net.context(mode=IDEAL, bn_mode=EVAL))
        assert np.allclose(out, hw.scheme.delta_msb * x, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("c", [2, 3, 10])
    def test_uniform_logits_loss(self, c):
        layer = SoftmaxXent()
        loss = layer.forward([np.zeros((4, c))], Context(labels=np.zeros(4, dtype=int)))
        assert loss == pytest.approx(math.log(c), abs=1e-15)

    def test_matches_shadow_forward(self):
        cfg = shadow_config()
        x = np.random.default_rng(0).normal(size=(50, 2))
        nets = [build_network(cfg.layer_specs(), (2,), 2, cfg.hardware(b), seed=4) for b in (HIC, FIXED_POINT)]
        outs = [n.predict(x, n.context(mode=IDEAL, bn_mode=EVAL)) for n in nets]
        # conductance sums round at the last ulp; levels are identical
        assert np.allclose(outs[0], outs[1], rtol=1e-12, atol=1e-15)
        assert all(np.array_equal(a[0], b[0]) for a, b in zip(nets[0].ticks(), nets[1].ticks()))


class TestBackward:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        assert gradient_check(*random_digital_net(seed)) <= 1e-4

    def test_zero_output_gradient(self):
        net, x, y = random_digital_net(0)
        ctx = net.context(bn_mode=TRAIN)
        net.forward(x, y, ctx)
        # push a zero loss gradient through every layer
        grads = {net.nodes[-1].name: 0.0}
        for node in reversed(net.nodes):
            g = grads.pop(node.name, None)
            if g is None:
                continue
            for src, gi in zip(node.inputs, node.layer.backward(g, ctx)):
                if src != "input":
                    assert np.all(gi == 0), node.name
                    grads[src] = gi
        for layer in net.crossbar_layers:
            assert np.all(layer.backend.grad == 0)

    def test_batch_linearity(self):
        cfg = shadow_config()
        x = np.array([[0.3, -0.7]])
        y = np.array([1])
        grads = []
        for xb, yb in ((x, y), (np.repeat(x, 2, 0), np.repeat(y, 2))):
            net = build_network(cfg.layer_specs(), (2,), 2, cfg.hardware(FP32), seed=1)
            ctx = net.context(bn_mode=TRAIN)
            # undo the batch mean so the loss is a sum over samples
            net.forward(xb, yb, ctx)
            net.backward(ctx)
            grads.append([l.backend.grad * len(xb) for l in net.crossbar_layers])
        for g1, g2 in zip(*grads):
            assert np.allclose(g2, 2 * g1, rtol=1e-14, atol=0)


class TestQuantizeAndApply:
    def _hw(self):
        return HybridWeightMatrix(1, 1, QuantScheme(0.7), QUIET)

    def test_rounds_to_nearest(self):
        hw = self._hw()
        grad = np.array([[-2.4 * hw.scheme.delta_lsb]])
        quantize_and_apply(grad, 1.0, GradQuantizer(), hw, SimClock())
        assert hw.lsb_read(0, 0, 0.0) == 2

    def test_zero_gradient(self):
        hw = self._hw()
        s = quantize_and_apply(np.zeros((1, 1)), 1.0, GradQuantizer(), hw, SimClock())
        assert (s.flips, s.carries) == (0, 0)

    def test_clip_counted(self):
        hw = self._hw()
        grad = np.array([[-400 * hw.scheme.delta_lsb]])
        s = quantize_and_apply(grad, 1.0, GradQuantizer(), hw, SimClock())
        assert s.tick_clips == 1
        assert hw.levels[0, 0] * 64 + hw.lsb_read(0, 0, 0.0) == 127

    def test_half_to_even(self):
        q = GradQuantizer()
        ticks, _ = q(np.array([0.5, 1.5, 2.5, -0.5]))
        assert list(ticks) == [0, 2, 2, 0]

    def test_stochastic_unbiased(self):
        q = GradQuantizer("stochastic")
        ticks, _ = q(np.full(100_000, 0.3), np.random.default_rng(0))
        assert set(np.unique(ticks)) == {0, 1}
        assert abs(ticks.mean() - 0.3) < 0.01

    def test_stochastic_needs_generator(self):
        with pytest.raises(ValueError):
            GradQuantizer("stochastic")(np.zeros(2))

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-300, 300, allow_nan=False))
    def test_scalar_oracle(self, v):
        ticks, clipped = GradQuantizer()(np.array([v]))
        want = max(-127, min(127, round(v)))  # python round is half-to-even
        assert ticks[0] == want
        assert clipped == int(abs(round(v)) > 127)


class TestTrain:
    def _setup(self, backend=HIC, epochs=2, cfg=None):
        cfg = cfg or shadow_config(training={"epochs": epochs})
        data = load_dataset(cfg.dataset)
        clock = SimClock(0.0, 1.0)
        log = EventLog()
        net = build_network(cfg.layer_specs(), data.input_shape, 2, cfg.hardware(backend), seed=0,
                            clock=clock, log=log)
        return net, data, cfg.training_config(), clock, log

    def test_zero_epochs(self):
        net, data, tcfg, clock, log = self._setup(epochs=0)
        n_init = len(log)
        recs = train(net, data.as_tuple(), tcfg, clock)
        assert len(recs) == 1 and recs[0].epoch == 0
        assert len(log) == n_init
        assert clock.now == 0.0

    def test_clock_and_steps(self):
        net, data, tcfg, clock, _ = self._setup(epochs=2)
        recs = train(net, data.as_tuple(), tcfg, clock)
        per_epoch = math.ceil(len(data.y_train) / tcfg.batch_size)
        assert [r.step for r in recs] == [0, per_epoch, 2 * per_epoch]
        assert clock.now == 2 * per_epoch * tcfg.seconds_per_batch
        assert all(b.step > a.step for a, b in zip(recs, recs[1:]))

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            cfg = shadow_config(nonidealities={"write_noise": True, "read_noise": True, "drift": True,
                                               "nonlinearity": True},
                                converters={"enabled": True}, training={"epochs": 2})
            net, data, tcfg, clock, _ = self._setup(cfg=cfg)
            runs.append([r.as_dict() for r in train(net, data.as_tuple(), tcfg, clock)])
        assert runs[0] == runs[1]

    def test_shadow_equivalence(self):
        mismatches, active = lockstep_shadow(100)
        assert mismatches == []
        assert active > 50

    def test_learns(self):
        net, data, tcfg, clock, _ = self._setup(epochs=5)
        recs = train(net, data.as_tuple(), tcfg, clock)
        assert recs[-1].test_acc > 0.9

    def test_lr_schedule(self):
        c = TrainingConfig(learning_rate=1.0, lr_decay_factor=0.5, epochs=8)
        assert c.decay_epochs() == [4, 6]
        assert [c.lr_at(e) for e in (0, 3, 4, 5, 6, 7)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]

    def test_update_locality(self):
        # between refreshes, a batch touches MSB devices only where a carry happened
        cfg = shadow_config(nonidealities={"write_noise": True, "read_noise": True, "drift": True,
                                           "nonlinearity": True},
                            training={"refresh_interval_batches": 1000})
        net, data, tcfg, clock, log = self._setup(cfg=cfg)
        x, y = data.x_train, data.y_train
        for step in range(10):
            before_pulses = [(b.hw.plus.events.copy(), b.hw.minus.events.copy()) for b in net.analog_backends]
            n0 = len(log)
            ctx = net.context(t=clock.now, bn_mode=TRAIN)
            idx = slice(step * 20, step * 20 + 20)
            net.forward(x[idx], y[idx], ctx)
            net.backward(ctx)
            stats = net.apply_updates(0.05, clock)
            clock.advance()
            ev = log.arrays()
            kinds, planes = ev["kind"][n0:], ev["plane"][n0:]
            assert np.all(np.isin(kinds[planes >= PLANE_LSB0], [EV_BIT_SET, EV_BIT_RESET]))
            touched = sum(int(np.count_nonzero((b.hw.plus.events != p0) | (b.hw.minus.events != m0)))
                          for b, (p0, m0) in zip(net.analog_backends, before_pulses))
            assert touched == stats.carries
            if stats.carries == 0:
                assert np.all(planes >= PLANE_LSB0)


class TestAdaBS:
    def test_fraction(self):
        idx = calibration_subset(1000, 0.05, seed=3)
        assert len(idx) == 50 and len(np.unique(idx)) == 50
        assert np.array_equal(idx, calibration_subset(1000, 0.05, seed=3))

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            calibration_subset(100, 0.0)

    def _trained(self, drift, epochs=3):
        from hicsim.harness.config import ExperimentConfig
        flags = dict(ALL_OFF, drift=drift)
        cfg = ExperimentConfig().with_updates(nonidealities=flags, training={"epochs": epochs},
                                              dataset={"samples_per_class": 300})
        data = load_dataset(cfg.dataset)
        clock = SimClock(0.0, 1.0)
        net = build_network(cfg.layer_specs(), data.input_shape, 2, cfg.hardware(), seed=0, clock=clock)
        train(net, data.as_tuple(), cfg.training_config(), clock)
        return net, data, clock

    def test_idempotent_and_leaves_weights(self):
        net, data, clock = self._trained(drift=True)
        w = [b.hw.plus.g_prog.copy() for b in net.analog_backends]
        gammas = [bn.gamma.copy() for bn in net.batchnorm_layers]
        with net.read_stream(5):
            s1 = adabs_calibrate(net, data.x_train[:100], clock.now + 1e6)
        with net.read_stream(5):
            s2 = adabs_calibrate(net, data.x_train[:100], clock.now + 1e6)
        for (m1, v1), (m2, v2) in zip(s1, s2):
            assert np.array_equal(m1, m2) and np.array_equal(v1, v2)
        assert all(np.array_equal(a, b.hw.plus.g_prog) for a, b in zip(w, net.analog_backends))
        assert all(np.array_equal(a, bn.gamma) for a, bn in zip(gammas, net.batchnorm_layers))

    def test_drift_off_full_set_invariance(self):
        # needs a converged network: running averages lag while weights still move
        net, data, clock = self._trained(drift=False, epochs=20)
        x_te, y_te = data.x_test, data.y_test
        before = evaluate(net, x_te, y_te, clock.now)[1]
        adabs_calibrate(net, data.x_train, clock.now)
        after = evaluate(net, x_te, y_te, clock.now)[1]
        assert abs(after - before) <= 0.01

    def test_empty_set(self):
        net, _, clock = self._trained(drift=False)
        with pytest.raises(ValueError):
            adabs_calibrate(net, np.zeros((0, 2)), clock.now)


class TestBuild:
    def test_width_rounding(self):
        assert scale_width(16, 1.7) == 27
        assert scale_width(32, 2.0) == 64
        assert scale_width(3, 0.1) == 1

    def test_multiplier_one_unchanged(self):
        specs = mlp_specs((32, 32))
        a = build_network(specs, (2,), 2, HardwareConfig(backend=FP32), width_multiplier=1.0)
        assert [l.out_features for l in a.crossbar_layers] == [32, 32, 2]

    def test_square_layer_scales_fourfold(self):
        specs = [LayerSpec("dense", 32, bias=False), LayerSpec("dense", 32, bias=False),
                 LayerSpec("dense", "classes"), LayerSpec("softmax-xent")]
        nets = [build_network(specs, (2,), 2, HardwareConfig(backend=FP32), width_multiplier=m)
                for m in (1.0, 2.0)]
        sq = [n.crossbar_layers[1].weight_shape for n in nets]
        assert sq == [(32, 32), (64, 64)]
        assert nets[1].parameter_count() > 3 * nets[0].parameter_count()

    def test_conv_width(self):
        specs = [LayerSpec("conv2d", 16), LayerSpec("avgpool"), LayerSpec("dense", "classes"),
                 LayerSpec("softmax-xent")]
        net = build_network(specs, (5, 5, 1), 2, HardwareConfig(backend=FP32), width_multiplier=1.7)
        assert net.crossbar_layers[0].out_channels == 27

    def test_rejects_bad_graphs(self):
        with pytest.raises(ValueError):
            build_network([LayerSpec("dense", 3)], (2,), 2)
        with pytest.raises(ValueError):
            build_network([LayerSpec("relu", inputs=["nope"]), LayerSpec("softmax-xent")], (2,), 2)
        with pytest.raises(ValueError):
            build_network(mlp_specs(), (2,), 2, width_multiplier=0.0)

    def test_initial_levels_match_across_backends(self):
        specs = mlp_specs((8,))
        a = build_network(specs, (2,), 2, hic_hardware(), seed=7)
        b = build_network(specs, (2,), 2, HardwareConfig(backend=FIXED_POINT), seed=7)
        for (la, _), (lb, _) in zip(a.ticks(), b.ticks()):
            assert np.array_equal(la, lb)

    def test_checkpoint_roundtrip(self, tmp_path):
        from hicsim.nn import load_network, save_network
        net = build_network(mlp_specs((8,)), (2,), 2, HardwareConfig(), seed=2)
        clock = SimClock(123.0, 2.0)
        save_network(tmp_path / "n.npz", net, clock)
        back, c2, _ = load_network(tmp_path / "n.npz")
        assert (c2.now, c2.seconds_per_batch) == (123.0, 2.0)
        for k, v in net.state_dict().items():
            assert np.array_equal(back.state_dict()[k], v), k


class TestBatchNorm:
    @given(st.integers(0, 1000))
    @settings(max_examples=20)
    def test_normalizes(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(3.0, 5.0, size=(64, 4))
        y = BatchNorm(4).forward([x], Context(bn_mode=TRAIN))
        assert np.allclose(y.mean(axis=0), 0, atol=1e-12)
        assert np.allclose(y.var(axis=0), 1, atol=1e-3)

    def test_running_stats(self):
        bn = BatchNorm(2, momentum=1.0)
        x = np.array([[1.0, 2.0], [3.0, 6.0]])
        bn.forward([x], Context(bn_mode=TRAIN))
        assert np.allclose(bn.running_mean, [2.0, 4.0])
        out = bn.forward([x], Context(bn_mode=EVAL))
        assert np.allclose(out.mean(axis=0), 0, atol=1e-6)
