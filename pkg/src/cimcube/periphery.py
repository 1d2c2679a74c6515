"""Behavioral mixed-signal periphery.

Bit-serial input scheduling, the 4-bit SAR ADC transfer function, shift-add
accumulation across activation bits and weight slices, and ReLU. Everything
here is a pure function; the accumulation order over (bit, slice) pairs is
fixed so results are bit-exact reproducible.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .device_models import InvalidInputError

__all__ = [
    "QuantConfig",
    "sar_adc",
    "bit_serial_schedule",
    "reassemble_bits",
    "shift_add_accumulate",
    "relu",
    "calibrate_full_scale",
    "adc_transfer_csv",
]

ADC_BITS = 4  # fixed by the periphery design


@dataclass(frozen=True)
class QuantConfig:
    """Bit widths and ADC range of the mixed-signal datapath.

    ``levels_per_device`` selects the weight-slice preset: 4 means 2-bit
    slices (two devices per weight magnitude, scale factors 1 and 4), 2 means
    1-bit slices on four devices (scale factors 1, 2, 4, 8).
    """

    act_bits: int = 8
    weight_bits: int = 4
    adc_bits: int = ADC_BITS
    adc_full_scale: float = 1e-4   # amperes
    levels_per_device: int = 4

    def __post_init__(self):
        if self.act_bits < 1 or self.weight_bits < 1:
            raise InvalidInputError("bit widths must be >= 1")
        if self.adc_bits != ADC_BITS:
            raise InvalidInputError("the periphery ships a fixed 4-bit SAR ADC")
        if self.adc_full_scale <= 0:
            raise InvalidInputError("adc_full_scale must be > 0")
        if self.levels_per_device not in (2, 4):
            raise InvalidInputError("levels_per_device presets are 2 and 4")

    @property
    def slice_bits(self) -> int:
        return {4: 2, 2: 1}[self.levels_per_device]

    @property
    def n_slices(self) -> int:
        return self.weight_bits // self.slice_bits

    @property
    def slice_weights(self) -> tuple:
        """Scale factor of each weight slice, least significant first."""
        return tuple(2 ** (s * self.slice_bits) for s in range(self.n_slices))


def sar_adc(i, cfg: QuantConfig):
    """Digitize a unipolar column current: floor(i / LSB), saturating at 15.

    Code k covers [k*LSB, (k+1)*LSB); the top code absorbs everything at or
    above full scale. Bin edges sit exactly on integer multiples of the LSB,
    so unit-current-per-LSB calibration makes the converter transparent.
    """
    arr = np.asarray(i, dtype=float)
    if np.any(arr < 0):
        raise InvalidInputError("column currents are unipolar; got a negative input")
    lsb = cfg.adc_full_scale / (1 << cfg.adc_bits)
    code = np.floor(arr / lsb).astype(np.int64)
    code = np.minimum(code, (1 << cfg.adc_bits) - 1)
    if code.ndim == 0:
        return int(code)
    return code


def bit_serial_schedule(activation: int, act_bits: int = 8) -> list[int]:
    """Split an activation into single-bit slices, LSB first."""
    if not 0 <= activation < (1 << act_bits):
        raise InvalidInputError(
            f"activation {activation} outside 0..{(1 << act_bits) - 1}")
    return [(activation >> b) & 1 for b in range(act_bits)]


def reassemble_bits(slices) -> int:
    """Inverse of bit_serial_schedule."""
    return sum(bit << b for b, bit in enumerate(slices))


def shift_add_accumulate(codes, cfg: QuantConfig, slice_weights=None) -> int:
    """Combine ADC codes over (activation bit, weight slice) into one integer.

    ``codes[b][s]`` is the (already differential-subtracted) code for
    activation bit ``b`` and weight slice ``s``. The result is
    sum_b sum_s codes[b][s] * 2^b * slice_weight[s].
    """
    codes = np.asarray(codes)
    if slice_weights is None:
        slice_weights = cfg.slice_weights
    if codes.ndim != 2 or codes.shape != (cfg.act_bits, len(slice_weights)):
        raise InvalidInputError(
            f"expected a {cfg.act_bits} x {len(slice_weights)} code grid, "
            f"got {codes.shape}")
    total = 0
    for b in range(cfg.act_bits):
        for s, w in enumerate(slice_weights):
            total += int(codes[b, s]) * (1 << b) * w
    return total


def relu(x):
    """Clamp negatives to zero; works on scalars and arrays."""
    if np.ndim(x) == 0:
        return x if x > 0 else type(x)(0)
    return np.maximum(x, 0)


def calibrate_full_scale(currents, unit_current: float,
                         percentile: float = 99.9) -> float:
    """Auto-calibrate the ADC full scale from simulated column currents.

    Takes the given percentile of the observed currents and rounds it up to
    the next power-of-two multiple of 16 unit currents, so that whenever the
    currents fit in 15 units the LSB equals exactly one unit and the ADC is
    transparent to the digital dot product.
    """
    if unit_current <= 0:
        raise InvalidInputError("unit_current must be > 0")
    p = float(np.percentile(np.asarray(currents, dtype=float), percentile))
    units = p / unit_current
    doublings = max(0, math.ceil(math.log2(max(units, 1.0) / 15.0))) if units > 15 else 0
    return unit_current * 16.0 * (1 << doublings)


def adc_transfer_csv(cfg: QuantConfig, n_points: int = 256) -> str:
    """CSV transfer curve `I,code` spanning a little beyond full scale."""
    buf = io.StringIO()
    buf.write("I,code\n")
    for i in np.linspace(0.0, 1.1 * cfg.adc_full_scale, n_points):
        buf.write(f"{i!r},{sar_adc(float(i), cfg)}\n")
    return buf.getvalue()
