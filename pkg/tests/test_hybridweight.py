import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hicsim.device import EV_RESET, DeviceModelParams, EventLog, SimClock
from hicsim.hybridweight import (
    IDEAL,
    NOISY,
    HybridWeightMatrix,
    QuantScheme,
    carry_split,
    from_twos_complement,
    load_weights,
    save_weights,
    to_twos_complement,
)
from hicsim.rng import CounterRNG

LINEAR_QUIET = DeviceModelParams(sigma_write=0.0, sigma_read=0.0, nu_mean=0.0, nu_sigma=0.0,
                                 nonlinear=False)
QUIET = DeviceModelParams(sigma_write=0.0, sigma_read=0.0, nu_mean=0.0, nu_sigma=0.0)
SCHEME = QuantScheme(w_max=0.7)


def oracle_carry(a, q, level, L=7, span=64):
    """Move whole MSB steps out of the accumulator one at a time."""
    r, lv, clamped = a + q, level, False
    while r >= span or r <= -span:
        step = 1 if r > 0 else -1
        if abs(lv + step) > L:
            clamped = True
            break
        r -= step * span
        lv += step
    r = min(max(r, -span), span - 1)
    return r, lv - level, clamped


def matrix(rows=1, cols=1, params=LINEAR_QUIET, **kw):
    return HybridWeightMatrix(rows, cols, SCHEME, params, **kw)


class TestScheme:
    def test_tick_identity(self):
        s = QuantScheme(w_max=0.37)
        assert s.delta_lsb * 2 ** (s.lsb_bits - 1) == s.delta_msb
        assert (s.acc_min, s.acc_max) == (-64, 63)

    def test_levels_must_fit_conductance(self):
        with pytest.raises(ValueError):
            HybridWeightMatrix(1, 1, QuantScheme(1.0, msb_levels=7, g_unit=4.0))

    @pytest.mark.parametrize("kw", [{"w_max": 0.0}, {"w_max": 1.0, "lsb_bits": 1},
                                    {"w_max": 1.0, "g_unit": 0.0}])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            QuantScheme(**kw)


class TestTwosComplement:
    def test_exhaustive_roundtrip(self):
        v = np.arange(-64, 64)
        assert np.array_equal(from_twos_complement(to_twos_complement(v, 7)), v)

    def test_extremes(self):
        assert from_twos_complement(np.array([1, 1, 1, 1, 1, 1, 0])) == 63
        assert from_twos_complement(np.array([0, 0, 0, 0, 0, 0, 1])) == -64
        assert from_twos_complement(np.zeros(7, dtype=int)) == 0


class TestDecode:
    def test_msb_examples(self):
        hw = matrix(1, 3)
        g = LINEAR_QUIET.g_min
        hw.plus.g_prog[0] = [g + 3, g + 4, g + 2]
        hw.minus.g_prog[0] = [g, g + 4, g + 5]
        d = SCHEME.delta_msb
        assert hw.decode_msb(0, 0, 0.0) == pytest.approx(3 * d, abs=1e-12)
        assert hw.decode_msb(0, 1, 0.0) == 0.0
        assert hw.decode_msb(0, 2, 0.0) == pytest.approx(-3 * d, abs=1e-12)

    def test_index_error(self):
        with pytest.raises(IndexError):
            matrix(2, 2).decode_msb(2, 0, 0.0)

    def test_full_examples(self):
        hw, clock = matrix(1, 3), SimClock()
        hw.initialize(np.array([[1, 0, -2]]), clock)
        hw.write_accumulators([0, 1, 2], [0, 32, -10], clock)
        s = SCHEME
        assert hw.decode_full(0, 0, 0.0) == pytest.approx(s.delta_msb)
        assert hw.decode_full(0, 1, 0.0) == pytest.approx(s.delta_msb / 2)
        assert hw.decode_full(0, 2, 0.0) == pytest.approx(-2 * s.delta_msb - 10 * s.delta_lsb)
        assert np.allclose(hw.full_weights()[0], [s.delta_msb, s.delta_msb / 2,
                                                  -2 * s.delta_msb - 10 * s.delta_lsb])

    def test_noisy_reads_differ_from_ideal(self):
        hw, clock = matrix(2, 2, DeviceModelParams()), SimClock()
        hw.initialize(np.array([[3, -1], [0, 5]]), clock)
        clock.advance_to(1000.0)
        assert not np.allclose(hw.msb_weights(clock.now, NOISY), hw.msb_weights(clock.now, IDEAL))


class TestLSB:
    def test_read_examples(self):
        hw, clock = matrix(), SimClock()
        assert hw.lsb_read(0, 0, 0.0) == 0
        hw.planes.state[:, 0, 0] = [1, 1, 1, 1, 1, 1, 0]
        assert hw.lsb_read(0, 0, 0.0, IDEAL) == 63
        hw.planes.state[:, 0, 0] = [0, 0, 0, 0, 0, 0, 1]
        assert hw.lsb_read(0, 0, 0.0, IDEAL) == -64

    def test_exhaustive_write_read(self):
        hw, clock = matrix(1, 128, DeviceModelParams()), SimClock()
        v = np.arange(-64, 64)
        hw.write_accumulators(np.arange(128), v, clock)
        assert np.array_equal(hw.read_accumulators(np.arange(128), 0.0, IDEAL), v)
        assert np.array_equal(hw.read_accumulators(np.arange(128), 1.0, NOISY), v)

    def test_flip_examples(self):
        hw, clock = matrix(), SimClock()
        assert hw.lsb_write(0, 0, 0, clock) == 0
        assert hw.lsb_write(0, 0, -1, clock) == 7
        assert hw.lsb_write(0, 0, -1, clock) == 0
        hw.lsb_write(0, 0, 5, clock)
        assert hw.lsb_write(0, 0, -5, clock) == 6

    def test_range_violation(self):
        hw, clock = matrix(), SimClock()
        for v in (64, -65):
            with pytest.raises(ValueError):
                hw.lsb_write(0, 0, v, clock)

    @given(st.integers(-64, 63), st.integers(-64, 63))
    def test_flip_minimality(self, old, new):
        hw, clock = matrix(), SimClock()
        hw.lsb_write(0, 0, old, clock)
        before = hw.planes.flips.sum()
        n = hw.lsb_write(0, 0, new, clock)
        assert n == bin((old & 127) ^ (new & 127)).count("1")
        assert hw.planes.flips.sum() - before == n


class TestProgram:
    def test_zero_target_no_pulses(self):
        r = matrix().program_msb(0, 0, 0, SimClock())
        assert (r.pulses, r.saturated) == (0, False)

    def test_positive_target_uses_plus_only(self):
        hw = matrix(params=LINEAR_QUIET)
        r = hw.program_msb(0, 0, 2, SimClock())
        assert r.pulses == 2
        assert hw.minus.g_prog[0, 0] == LINEAR_QUIET.g_min
        assert abs(hw.ideal_levels()[0, 0] - 2) <= hw.verify_tol

    def test_matches_programming_curve(self):
        # single-device oracle: after k pulses g = g_min + delta0 * H_k
        hw, p = matrix(params=QUIET), QUIET
        r = hw.program_msb(0, 0, 3, SimClock())
        assert r.pulses == 1
        assert hw.plus.g_prog[0, 0] == pytest.approx(p.g_min + p.delta0, abs=1e-12)

    def test_within_tolerance_all_levels(self):
        for params in (QUIET, LINEAR_QUIET):
            hw = matrix(1, 15, params)
            hw.initialize(np.arange(-7, 8)[None, :], SimClock())
            assert np.all(np.abs(hw.ideal_levels()[0] - np.arange(-7, 8)) <= hw.verify_tol)

    def test_saturation_signal(self):
        hw = matrix(params=LINEAR_QUIET)
        hw.plus.g_prog[0, 0] = LINEAR_QUIET.g_max
        hw.minus.g_prog[0, 0] = 0.9 * LINEAR_QUIET.g_max
        r = hw.program_msb(0, 0, 7, SimClock())
        assert r.saturated

    def test_target_out_of_range(self):
        with pytest.raises(ValueError):
            matrix().program_msb(0, 0, 8, SimClock())

    def test_never_resets(self):
        hw, log = matrix(4, 4, DeviceModelParams()), EventLog()
        hw.set_log(log)
        clock = SimClock()
        rng = np.random.default_rng(0)
        for _ in range(5):
            for i in range(4):
                for j in range(4):
                    hw.program_msb(i, j, int(rng.integers(-7, 8)), clock)
        assert len(log) > 0
        assert not np.any(log.arrays()["kind"] == EV_RESET)


class TestAccumulate:
    def test_examples(self):
        hw, clock = matrix(1, 3), SimClock()
        hw.write_accumulators([1, 2], [60, -60], clock)
        assert hw.accumulate(0, 0, 0, clock) == 0 and hw.lsb_read(0, 0, 0.0) == 0
        assert hw.accumulate(0, 1, 10, clock) == 1 and hw.lsb_read(0, 1, 0.0) == 6
        assert hw.accumulate(0, 2, -10, clock) == -1 and hw.lsb_read(0, 2, 0.0) == -6
        assert list(hw.levels[0]) == [0, 1, -1]

    def test_zero_update_no_flips(self):
        hw, clock = matrix(), SimClock()
        hw.lsb_write(0, 0, 17, clock)
        assert hw.accumulate_many([0], [0], clock).flips == 0

    @pytest.mark.parametrize("level", [-7, -6, 0, 5, 7])
    def test_carry_split_exhaustive(self, level):
        a, q = np.meshgrid(np.arange(-64, 64), np.arange(-127, 128), indexing="ij")
        r, c, k = carry_split(a.ravel(), q.ravel(), level, 7, 64)
        want = [oracle_carry(int(x), int(y), level) for x, y in zip(a.ravel(), q.ravel())]
        assert np.array_equal(r, [w[0] for w in want])
        assert np.array_equal(c, [w[1] for w in want])
        assert np.array_equal(k, [w[2] for w in want])

    def test_exhaustive_on_devices(self):
        a, q = np.meshgrid(np.arange(-64, 64), np.arange(-127, 128), indexing="ij")
        hw, clock = matrix(128, 255), SimClock()
        idx = np.arange(hw.size)
        hw.write_accumulators(idx, a.ravel(), clock)
        before = hw.full_weights().ravel()
        t = time.perf_counter()
        stats = hw.accumulate_many(idx, q.ravel(), clock)
        assert time.perf_counter() - t < 1.0
        res = hw.accumulators().ravel()
        assert res.min() >= -64 and res.max() <= 63
        want = [oracle_carry(int(x), int(y), 0) for x, y in zip(a.ravel(), q.ravel())]
        assert np.array_equal(res, [w[0] for w in want])
        assert np.array_equal(hw.levels.ravel(), [w[1] for w in want])
        assert stats.clamps == 0 and stats.program_failures == 0
        assert np.allclose(hw.full_weights().ravel() - before, q.ravel() * SCHEME.delta_lsb, atol=1e-12)

    def test_rail_clamp_counted(self):
        hw, clock = matrix(), SimClock()
        hw.initialize(np.array([[7]]), clock)
        hw.lsb_write(0, 0, 60, clock)
        stats = hw.accumulate_many([0], [100], clock)
        assert stats.clamps == 1
        assert hw.levels[0, 0] == 7 and hw.lsb_read(0, 0, 0.0) == 63

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-127, 127), min_size=1, max_size=30))
    def test_conservation(self, qs):
        hw, clock = matrix(params=QUIET), SimClock()
        w0 = hw.decode_full(0, 0, 0.0)
        for q in qs:
            hw.accumulate(0, 0, q, clock)
        lv = hw.levels[0, 0]
        if abs(lv) == 7:
            return  # rail hit, conservation does not apply
        got = hw.decode_full(0, 0, 0.0) - w0
        tol = hw.verify_tol * SCHEME.delta_msb + 1e-12
        assert abs(got - sum(qs) * SCHEME.delta_lsb) <= tol
        assert lv * 64 + hw.lsb_read(0, 0, 0.0) == sum(qs)


class TestRefresh:
    def test_balanced_saturated(self):
        hw, clock = matrix(), SimClock()
        hw.plus.g_prog[0, 0] = hw.minus.g_prog[0, 0] = LINEAR_QUIET.g_max
        assert hw.refresh(0, 0, clock)
        assert hw.plus.g_prog[0, 0] == hw.minus.g_prog[0, 0] == LINEAR_QUIET.g_min
        assert hw.decode_msb(0, 0, 0.0) == 0.0

    def test_reencodes_into_one_device(self):
        hw, clock, p = matrix(), SimClock(), LINEAR_QUIET
        hw.plus.g_prog[0, 0] = p.g_max
        hw.minus.g_prog[0, 0] = p.g_max - 2
        assert hw.refresh(0, 0, clock)
        assert hw.minus.g_prog[0, 0] == p.g_min
        assert hw.plus.g_prog[0, 0] == pytest.approx(p.g_min + 2)
        assert hw.levels[0, 0] == 2

    def test_unsaturated_noop(self):
        hw, clock, log = matrix(), SimClock(), EventLog()
        hw.initialize(np.array([[3]]), clock)
        hw.set_log(log)
        assert not hw.refresh(0, 0, clock)
        assert len(log) == 0

    def test_idempotent(self):
        hw, clock = matrix(), SimClock()
        hw.plus.g_prog[0, 0] = 24.0
        hw.minus.g_prog[0, 0] = 20.0
        assert hw.refresh(0, 0, clock)
        state = (hw.plus.g_prog.copy(), hw.minus.g_prog.copy(), hw.plus.events.copy())
        assert not hw.refresh(0, 0, clock)
        assert np.array_equal(state[0], hw.plus.g_prog)
        assert np.array_equal(state[1], hw.minus.g_prog)
        assert np.array_equal(state[2], hw.plus.events)

    def _saturated(self, params, n=1000, seed=0):
        rng = np.random.default_rng(seed)
        hw = HybridWeightMatrix(1, n, SCHEME, params, rng=CounterRNG(seed))
        levels = rng.integers(-7, 8, n)
        high = rng.uniform(0.9 * params.g_max, params.g_max, n)
        plus_high = rng.random(n) < 0.5
        hw.plus.g_prog[0] = np.where(plus_high, high, high + levels)
        hw.minus.g_prog[0] = np.where(plus_high, high - levels, high)
        hw.plus.g_prog[0] = np.clip(hw.plus.g_prog[0], params.g_min, params.g_max)
        hw.minus.g_prog[0] = np.clip(hw.minus.g_prog[0], params.g_min, params.g_max)
        return hw

    @pytest.mark.parametrize("params", [QUIET, LINEAR_QUIET])
    def test_preserves_level_noise_off(self, params):
        hw, clock = self._saturated(params), SimClock()
        before = np.rint(hw.ideal_levels()[0])
        stats = hw.refresh_many(clock)
        assert stats.refreshes >= 1000
        assert np.array_equal(np.rint(hw.ideal_levels()[0]), before)

    def test_preserves_level_default_noise(self):
        p = DeviceModelParams()
        hw, clock = self._saturated(p), SimClock()
        before = hw.ideal_levels()[0]
        hw.refresh_many(clock)
        ok = np.abs(hw.ideal_levels()[0] - np.rint(before)) <= hw.verify_tol
        assert ok.mean() >= 0.99


def test_save_load_roundtrip(tmp_path):
    hw, clock = HybridWeightMatrix(3, 4, SCHEME, DeviceModelParams(), array_id=2, rng=CounterRNG(11)), SimClock()
    rng = np.random.default_rng(1)
    hw.initialize(rng.integers(-7, 8, (3, 4)), clock)
    hw.accumulate_many(np.arange(12), rng.integers(-127, 128, 12), clock)
    save_weights(tmp_path / "w.npz", hw)
    back = load_weights(tmp_path / "w.npz")
    for k, v in hw.state_dict().items():
        assert np.array_equal(back.state_dict()[k], v), k
    clock.advance_to(50.0)
    assert np.array_equal(back.msb_weights(50.0, NOISY), hw.msb_weights(50.0, NOISY))


def test_save_is_byte_stable(tmp_path):
    hw = matrix(2, 2, DeviceModelParams())
    save_weights(tmp_path / "a.npz", hw)
    save_weights(tmp_path / "b.npz", hw)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
