"""Periphery tests: SAR ADC transfer, bit-serial scheduling, shift-add,
ReLU, and full-scale auto-calibration."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cimcube.device_models import InvalidInputError
from cimcube.periphery import (
    QuantConfig,
    adc_transfer_csv,
    bit_serial_schedule,
    calibrate_full_scale,
    reassemble_bits,
    relu,
    sar_adc,
    shift_add_accumulate,
)

CFG = QuantConfig()
LSB = CFG.adc_full_scale / 16


class TestSarAdc:
    def test_floor_quantization_edges(self):
        assert sar_adc(7.5 * LSB, CFG) == 7
        assert sar_adc(8.0 * LSB, CFG) == 8
        assert sar_adc(0.0, CFG) == 0
        assert sar_adc(np.nextafter(LSB, 0.0), CFG) == 0
        assert sar_adc(LSB, CFG) == 1

    def test_saturates_at_top_code(self):
        assert sar_adc(16 * LSB, CFG) == 15
        assert sar_adc(1.0, CFG) == 15

    def test_negative_rejected(self):
        with pytest.raises(InvalidInputError):
            sar_adc(-1e-9, CFG)

    def test_monotone_transfer(self):
        i = np.linspace(0, 1.2 * CFG.adc_full_scale, 5000)
        codes = sar_adc(i, CFG)
        assert np.all(np.diff(codes) >= 0)
        assert set(np.unique(codes)) == set(range(16))

    def test_array_and_scalar_agree(self):
        vals = np.linspace(0, CFG.adc_full_scale, 100)
        codes = sar_adc(vals, CFG)
        assert all(codes[k] == sar_adc(float(v), CFG) for k, v in enumerate(vals))

    def test_only_four_bit_configs_allowed(self):
        with pytest.raises(InvalidInputError):
            QuantConfig(adc_bits=8)

    def test_transfer_csv(self):
        text = adc_transfer_csv(CFG)
        lines = text.strip().splitlines()
        assert lines[0] == "I,code"
        codes = [int(l.split(",")[1]) for l in lines[1:]]
        assert codes[0] == 0 and codes[-1] == 15
        assert all(b >= a for a, b in zip(codes, codes[1:]))


class TestBitSerial:
    @given(st.integers(min_value=0, max_value=4095),
           st.integers(min_value=12, max_value=16))
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, value, bits):
        slices = bit_serial_schedule(value, bits)
        assert len(slices) == bits
        assert set(slices) <= {0, 1}
        assert reassemble_bits(slices) == value

    def test_exhaustive_eight_bit(self):
        for v in range(256):
            assert reassemble_bits(bit_serial_schedule(v)) == v

    def test_lsb_first(self):
        assert bit_serial_schedule(1)[0] == 1
        assert bit_serial_schedule(128)[7] == 1

    def test_out_of_range_rejected(self):
        with pytest.raises(InvalidInputError):
            bit_serial_schedule(256, 8)
        with pytest.raises(InvalidInputError):
            bit_serial_schedule(-1, 8)


class TestShiftAdd:
    def test_matches_brute_force_dot_product(self):
        # full pipeline identity on random int vectors: slicing activations
        # into bits and weights into 2-bit slices, digitizing exactly, and
        # shift-adding must reproduce the plain integer dot product
        rng = np.random.default_rng(0)
        for _ in range(50):
            acts = rng.integers(0, 256, 4)
            weights = rng.integers(0, 16, 4)
            codes = np.zeros((8, 2), dtype=int)
            for b in range(8):
                bits = [bit_serial_schedule(int(a))[b] for a in acts]
                for s in range(2):
                    slice_vals = (weights >> (2 * s)) & 0b11
                    codes[b, s] = int(np.dot(bits, slice_vals))
            got = shift_add_accumulate(codes, CFG)
            assert got == int(np.dot(acts, weights))

    def test_one_bit_slice_preset(self):
        cfg = QuantConfig(levels_per_device=2)
        assert cfg.n_slices == 4
        assert cfg.slice_weights == (1, 2, 4, 8)
        rng = np.random.default_rng(1)
        acts = rng.integers(0, 256, 4)
        weights = rng.integers(0, 16, 4)
        codes = np.zeros((8, 4), dtype=int)
        for b in range(8):
            bits = [bit_serial_schedule(int(a))[b] for a in acts]
            for s in range(4):
                codes[b, s] = int(np.dot(bits, (weights >> s) & 1))
        assert shift_add_accumulate(codes, cfg) == int(np.dot(acts, weights))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            shift_add_accumulate(np.zeros((7, 2), dtype=int), CFG)

    def test_negative_codes_supported(self):
        # differential subtraction can make per-read codes negative
        codes = np.zeros((8, 2), dtype=int)
        codes[0, 0] = -3
        assert shift_add_accumulate(codes, CFG) == -3


class TestRelu:
    def test_scalar(self):
        assert relu(-1.5) == 0.0
        assert relu(2.5) == 2.5
        assert relu(0) == 0

    def test_array(self):
        x = np.array([-2.0, 0.0, 3.0])
        assert np.array_equal(relu(x), [0.0, 0.0, 3.0])


class TestCalibration:
    def test_small_reads_get_transparent_lsb(self):
        fs = calibrate_full_scale([3e-7, 1e-6, 1.4e-6], unit_current=1e-7)
        assert fs == 16e-7
        cfg = QuantConfig(adc_full_scale=fs)
        # every unit-count bin up to 15 digitizes to itself (midpoints avoid
        # float representation noise exactly on the bin edges)
        lsb = fs / 16
        for k in range(16):
            assert sar_adc((k + 0.5) * lsb, cfg) == k

    def test_large_reads_double_the_range(self):
        fs = calibrate_full_scale([40e-7], unit_current=1e-7)
        assert fs == 64e-7       # 16 units doubled twice
        fs = calibrate_full_scale([16e-7], unit_current=1e-7)
        assert fs == 32e-7

    def test_percentile_ignores_outliers(self):
        currents = np.full(100_000, 1e-7)
        currents[0] = 1.0
        fs = calibrate_full_scale(currents, unit_current=1e-7)
        assert fs == 16e-7

    def test_bad_unit_rejected(self):
        with pytest.raises(InvalidInputError):
            calibrate_full_scale([1e-6], unit_current=0.0)
