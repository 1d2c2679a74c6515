"""Variation-aware inference through the analog pipeline.

``ideal`` mode abstracts every cell to an exactly linear conductance
(level-proportional, times its device-to-device factor) with no wire
parasitics and no transistor drop; bit-serial input slices, per-tile-layer
reads, 4-bit ADC codes, and shift-add accumulation are modeled exactly.
``with_ir_drop`` mode routes every tile read through the full nonlinear
network solver and is only practical for small runs.

Activations are unsigned fixed point (act_bits), weights signed codes on
differential column pairs; maxpool, ReLU, and the inter-tile accumulation
run in digital periphery arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..device_models import InvalidInputError
from ..periphery import QuantConfig
from ..tile import ReadStimulus, mac_with_ir_drop
from ..variation import STREAM_DEVICE, VariationSpec, sample_d2d, substream
from .mapping import NetworkMapping, level_stride
from .network import ConvSpec, DenseSpec, MaxPoolSpec, propagate_shapes
from .quant import quantize_weights
from .train import ACT_QMAX

__all__ = ["InferenceReport", "infer", "analog_forward", "software_forward",
           "sample_network_d2d", "calibrate_adc_units"]


class UnprogrammedError(RuntimeError):
    """Inference was requested before tiles were programmed."""


# patch rows processed per matmul block (bounds peak memory of a read grid)
_PATCH_BLOCK = 256
# pre-ADC unit-current histogram used during full-scale calibration
_CAL_BIN_W = 0.01
_CAL_BINS = 16384


def _hist_percentile(hist: np.ndarray, percentile: float) -> float:
    """Upper bin edge at the given percentile (conservative round-up)."""
    total = int(hist.sum())
    if total == 0:
        return 0.0
    target = math.ceil(total * percentile / 100.0)
    idx = int(np.searchsorted(np.cumsum(hist), target))
    return (min(idx, len(hist) - 1) + 1) * _CAL_BIN_W


@dataclass
class InferenceReport:
    accuracy: float
    confusion: np.ndarray
    n_images: int
    adc_saturation_events: int = 0
    adc_lsb_units: dict = field(default_factory=dict)


def sample_network_d2d(mapping: NetworkMapping, spec: VariationSpec) -> dict:
    """One d2d factor per physical cell: layer index -> (K_pad, C, ns, 2)."""
    rng = substream(spec.seed, STREAM_DEVICE)
    out = {}
    for li in sorted(mapping.layers):
        m = mapping.layers[li]
        shape = m.levels.shape
        out[li] = sample_d2d(spec, int(np.prod(shape)), rng=rng).reshape(shape)
    return out


def _quantize_input(images: np.ndarray) -> np.ndarray:
    """Images in [0, 1] to 8-bit integers, NCHW."""
    arr = np.clip(np.round(images * ACT_QMAX), 0, ACT_QMAX)
    return arr.transpose(0, 3, 1, 2).astype(np.int64)


def _act_requant(y: np.ndarray, scale_in: float, scale_w: np.ndarray,
                 scale_out: float) -> np.ndarray:
    """ReLU + requantize an integer MAC result to the next layer's grid."""
    real = np.maximum(y, 0) * (scale_in * scale_w)
    return np.clip(np.round(real / scale_out), 0, ACT_QMAX).astype(np.int64)


def _im2col(x_int: np.ndarray, layer: ConvSpec) -> tuple[np.ndarray, int, int]:
    """Integer activations (N, C, H, W) -> patches (N*P, K) plus out size."""
    t = torch.from_numpy(x_int.astype(np.float32))
    cols = F.unfold(t, layer.kernel, padding=layer.pad, stride=layer.stride)
    n, k, p = cols.shape
    h = (x_int.shape[2] + 2 * layer.pad - layer.kernel) // layer.stride + 1
    w = (x_int.shape[3] + 2 * layer.pad - layer.kernel) // layer.stride + 1
    out = cols.permute(0, 2, 1).reshape(n * p, k).numpy().astype(np.int64)
    return out, h, w


def calibrate_adc_units(mapping: NetworkMapping, images: np.ndarray,
                        act_scales: dict, d2d: dict | None = None,
                        percentile: float = 99.9) -> dict:
    """Per-layer ADC LSB in slice-current units (a power of two).

    Runs the ideal pipeline on a calibration batch, records the distribution
    of per-read column currents, and rounds the given percentile up to the
    next power-of-two multiple of 15 units so in-range reads keep
    unit-per-LSB resolution whenever they fit.
    """
    lsb = {}
    _pipeline(mapping, images, act_scales, d2d, mode="ideal",
              lsb_units=None, calibrated=lsb, percentile=percentile)
    return lsb


def analog_forward(mapping: NetworkMapping, images: np.ndarray,
                   act_scales: dict, d2d: dict | None = None,
                   mode: str = "ideal", lsb_units: dict | None = None,
                   saturation_counter: list | None = None) -> np.ndarray:
    """Logits of the analog pipeline for a batch of images in [0, 1]."""
    if lsb_units is None:
        lsb_units = {li: 1 for li in mapping.layers}
    return _pipeline(mapping, images, act_scales, d2d, mode=mode,
                     lsb_units=lsb_units, saturation_counter=saturation_counter)


def _pipeline(mapping: NetworkMapping, images, act_scales, d2d, mode,
              lsb_units, calibrated=None, percentile=99.9,
              saturation_counter=None):
    net = mapping.net
    cfg = mapping.cfg
    propagate_shapes(net)
    if not mapping.layers:
        raise UnprogrammedError("network mapping has no programmed layers")
    x_int = _quantize_input(np.asarray(images))
    scale_in = 1.0 / ACT_QMAX
    n_images = x_int.shape[0]
    h, w, c = net.input_shape
    flat = None

    for i, layer in enumerate(net.layers):
        if isinstance(layer, MaxPoolSpec):
            x_int = x_int.reshape(n_images, c, h, w)
            t = torch.from_numpy(x_int.astype(np.float32))
            x_int = F.max_pool2d(t, layer.size).numpy().astype(np.int64)
            h, w = h // layer.size, w // layer.size
            flat = None
            continue
        if isinstance(layer, ConvSpec):
            patches, h, w = _im2col(x_int, layer)
        else:  # dense
            if flat is None:
                x_int = x_int.reshape(n_images, -1)
            patches = x_int
        m = mapping.layers.get(i)
        if m is None:
            raise UnprogrammedError(f"layer {i} is not programmed")
        if calibrated is not None:
            y, hist = _layer_mac(mapping, m, patches, mode, d2d,
                                 lsb=1, collect_units=True)
            p = _hist_percentile(hist, percentile)
            dbl = max(0, math.ceil(math.log2(p / 15.0))) if p > 15 else 0
            calibrated[i] = 1 << dbl
        else:
            y, _ = _layer_mac(mapping, m, patches, mode, d2d,
                              lsb=lsb_units.get(i, 1),
                              saturation_counter=saturation_counter)
        scale_w = m.scales
        if isinstance(layer, ConvSpec):
            c = layer.out_channels
            next_scale = _next_scale(mapping, act_scales, i)
            if next_scale is None:
                raise InvalidInputError("conv cannot be the final layer")
            x_int = _act_requant(y, scale_in, scale_w[None, :], next_scale)
            x_int = x_int.reshape(n_images, h * w, c).transpose(0, 2, 1) \
                .reshape(n_images, c, h, w)
            scale_in = next_scale
            flat = None
        else:
            next_scale = _next_scale(mapping, act_scales, i)
            if next_scale is None:   # logits
                return y * (scale_in * scale_w[None, :])
            x_int = _act_requant(y, scale_in, scale_w[None, :], next_scale)
            scale_in = next_scale
            h, w, c = 1, 1, layer.units
            flat = True
    raise InvalidInputError("network did not end in a dense layer")


def _next_scale(mapping: NetworkMapping, act_scales: dict, current: int):
    mapped = sorted(mapping.layers)
    later = [i for i in mapped if i > current]
    if not later:
        return None
    return act_scales[later[0]]


def _layer_mac(mapping: NetworkMapping, m, patches: np.ndarray, mode: str,
               d2d: dict | None, lsb: int, collect_units: bool = False,
               saturation_counter: list | None = None):
    """Bit-serial, chunked, ADC-quantized MAC of one layer.

    ``patches``: integer activations (N, K). Returns the accumulated signed
    integers (N, C) in units of (activation LSB x weight-code unit), plus the
    pre-ADC unit currents when collecting calibration data.
    """
    cfg = mapping.cfg
    if mode not in ("ideal", "with_ir_drop"):
        raise InvalidInputError(f"unknown inference mode {mode!r}")
    if mode == "with_ir_drop":
        return _layer_mac_ir(mapping, m, patches, d2d, lsb, saturation_counter)

    k_pad, c_out = m.matrix_codes.shape
    n = patches.shape[0]
    if patches.shape[1] != m.k:
        raise InvalidInputError(f"activation width {patches.shape[1]} != {m.k}")
    stride = level_stride(cfg, mapping.rram.n_levels)
    # slice values 0..2^slice_bits-1 per (row, channel, slice, polarity)
    values = (m.levels.astype(np.float32) / stride)
    factors = d2d.get(m.layer_index) if d2d else None
    if factors is not None:
        values = values * factors.astype(np.float32)
    n_chunks = k_pad // 8
    values = values.reshape(n_chunks, 8, c_out, cfg.n_slices, 2)

    x = np.zeros((n, k_pad), dtype=np.int64)
    x[:, :m.k] = patches
    xbits = x.reshape(n, n_chunks, 8)

    # calibration records a histogram of pre-ADC unit currents rather than the
    # raw samples: the memory of one read grid is (N, chunks, cols), far too
    # large to retain across a whole layer of a deep preset
    hist = np.zeros(_CAL_BINS, dtype=np.int64) if collect_units else None
    tx = torch.from_numpy
    vt = tx(values.reshape(n_chunks, 8, c_out * cfg.n_slices * 2))
    # one fused matvec applies the differential subtraction and the slice
    # weights: column order per channel is (s0+, s0-, s1+, s1-, ...)
    w2 = torch.tensor([float(s * w) for w in cfg.slice_weights
                       for s in (1, -1)], dtype=torch.float32)
    acc_t = torch.zeros((n, c_out), dtype=torch.float64)
    sat = 0
    # cap the per-block read grid at ~64M entries so deep layers stay in RAM
    read_cols = n_chunks * c_out * cfg.n_slices * 2
    block = max(8, min(_PATCH_BLOCK, (64 << 20) // max(read_cols, 1)))
    for p0 in range(0, n, block):
        xb = xbits[p0:p0 + block]
        nb = xb.shape[0]
        for b in range(cfg.act_bits):
            bits = tx(((xb >> b) & 1).astype(np.float32))
            # (chunks, N, 8) x (chunks, 8, M) -> per-read unit currents
            units = torch.bmm(bits.permute(1, 0, 2), vt)
            if collect_units:
                # calibration pass: tally raw currents, skip the saturation clamp
                units_np = units.numpy()
                idx = np.minimum((units_np / _CAL_BIN_W).astype(np.int64),
                                 _CAL_BINS - 1)
                hist += np.bincount(idx.ravel(), minlength=_CAL_BINS)
            # all code arithmetic is integer-valued and stays exact in float32
            codes = units.mul_(1.0 / lsb).add_(1e-4).floor_()
            if not collect_units:
                sat += int((codes > 15).sum())
            codes.clamp_(max=15.0)
            contrib = (codes.view(n_chunks, nb, c_out, -1) @ w2).sum(dim=0)
            acc_t[p0:p0 + block] += contrib.double() * float((1 << b) * lsb)
    if saturation_counter is not None:
        saturation_counter.append(sat)
    acc = acc_t.numpy().round().astype(np.int64)
    return acc, hist


def _layer_mac_ir(mapping: NetworkMapping, m, patches: np.ndarray,
                  d2d: dict | None, lsb: int, saturation_counter):
    """Physical-tile route: every (image, chunk, bit, tile layer) is one
    network solve. Only sensible for small smoke runs."""
    cfg = mapping.cfg
    g = mapping.geometry
    k_pad, c_out = m.matrix_codes.shape
    n = patches.shape[0]
    x = np.zeros((n, k_pad), dtype=np.int64)
    x[:, :m.k] = patches
    unit = _branch_unit_current(mapping)
    acc = np.zeros((n, c_out), dtype=np.int64)
    sw = cfg.slice_weights
    sat = 0
    factors = d2d.get(m.layer_index) if d2d else None
    for rb in range(m.n_row_blocks):
        for cb in range(m.n_chan_blocks):
            tile_d2d = _tile_d2d(mapping, m, factors, rb, cb)
            tile = mapping.tile(m.layer_index, rb, cb, d2d=tile_d2d)
            for img in range(n):
                rows = x[img, rb * 64:(rb + 1) * 64]
                for b in range(cfg.act_bits):
                    bits = (rows >> b) & 1
                    for tl in range(g.n_layers):
                        sel = tuple(int(v) for v in bits[tl * 8:(tl + 1) * 8])
                        if not any(sel):
                            continue
                        stim = ReadStimulus(input_bits=sel,
                                            layer_select=tuple(int(l == tl) for l in range(g.n_layers)),
                                            v_read=mapping.v_read)
                        cols, _ = mac_with_ir_drop(tile, stim)
                        codes = np.floor(cols / (lsb * unit) + 1e-4).astype(np.int64)
                        sat += int(np.count_nonzero(codes > 15))
                        codes = np.minimum(codes, 15)
                        for c in range(m.chans_per_tile):
                            chan = cb * m.chans_per_tile + c
                            if chan >= c_out:
                                continue
                            for s in range(cfg.n_slices):
                                base = c * (2 * cfg.n_slices) + 2 * s
                                diff = int(codes[base] - codes[base + 1])
                                acc[img, chan] += diff * sw[s] * (1 << b) * lsb
    if saturation_counter is not None:
        saturation_counter.append(sat)
    return acc, None


def _tile_d2d(mapping: NetworkMapping, m, factors, rb, cb):
    if factors is None:
        return None
    g = mapping.geometry
    cfg = mapping.cfg
    out = np.ones((g.n_rows, g.n_cols, g.n_layers))
    for r in range(m.rows_per_tile):
        row, layer = r % g.n_rows, r // g.n_rows
        for c in range(m.chans_per_tile):
            chan = cb * m.chans_per_tile + c
            if chan >= factors.shape[1]:
                continue
            for s in range(cfg.n_slices):
                for pol in range(2):
                    col = c * (2 * cfg.n_slices) + 2 * s + pol
                    out[row, col, layer] = factors[rb * m.rows_per_tile + r,
                                                   chan, s, pol]
    return out


def _branch_unit_current(mapping: NetworkMapping) -> float:
    """Physical read current of one slice unit (A): the series-branch current
    at one level stride, minus the level-0 branch leakage. Calibrating the
    ADC unit on the full branch (transistor included) keeps single-cell reads
    code-exact; the residual ir-drop error is the multi-cell interaction."""
    from ..device_models import RramState, level_gap_table
    from ..tile import solve_branch
    stride = level_stride(mapping.cfg, mapping.rram.n_levels)
    table = level_gap_table(mapping.rram, v_read=mapping.v_read,
                            scheme=mapping.level_scheme)
    i_one = solve_branch(mapping.tft, RramState(gap=float(table[stride])),
                         mapping.rram, mapping.v_read, True)
    i_zero = solve_branch(mapping.tft, RramState(gap=float(table[0])),
                          mapping.rram, mapping.v_read, True)
    return i_one - i_zero


def software_forward(net, weights_or_codes, act_scales: dict,
                     images: np.ndarray, cfg: QuantConfig | None = None,
                     already_quantized: bool = False) -> np.ndarray:
    """Software fixed-point reference: same quantization grids, exact integer
    dot products, no ADC. The oracle the analog pipeline is checked against.
    """
    cfg = cfg or QuantConfig()
    propagate_shapes(net)
    qweights = {}
    for li in net.mapped_layers:
        if already_quantized:
            qweights[li] = weights_or_codes[li]
        else:
            qweights[li] = quantize_weights(weights_or_codes[li], cfg.weight_bits)
    x_int = _quantize_input(np.asarray(images))
    n_images = x_int.shape[0]
    scale_in = 1.0 / ACT_QMAX
    h, w, c = net.input_shape
    mapped = net.mapped_layers
    for i, layer in enumerate(net.layers):
        if isinstance(layer, MaxPoolSpec):
            t = torch.from_numpy(x_int.reshape(n_images, c, h, w).astype(np.float32))
            x_int = F.max_pool2d(t, layer.size).numpy().astype(np.int64)
            h, w = h // layer.size, w // layer.size
            continue
        codes, scales = qweights[i]
        codes = np.asarray(codes, dtype=np.int64)
        if isinstance(layer, ConvSpec):
            patches, h, w = _im2col(x_int, layer)
            y = patches @ codes.reshape(codes.shape[0], -1).T
            c = layer.out_channels
        else:
            x_int = x_int.reshape(n_images, -1)
            patches = x_int
            y = patches @ codes.T
        later = [j for j in mapped if j > i]
        if not later:
            return y * (scale_in * np.asarray(scales)[None, :])
        next_scale = act_scales[later[0]]
        x_int = _act_requant(y, scale_in, np.asarray(scales)[None, :], next_scale)
        if isinstance(layer, ConvSpec):
            x_int = x_int.reshape(n_images, h * w, c).transpose(0, 2, 1) \
                .reshape(n_images, c, h, w)
        else:
            h, w, c = 1, 1, layer.units
        scale_in = next_scale
    raise InvalidInputError("network did not end in a dense layer")


def infer(mapping: NetworkMapping, images: np.ndarray, labels: np.ndarray,
          act_scales: dict, variation: VariationSpec | None = None,
          mode: str = "ideal", lsb_units: dict | None = None,
          batch_size: int = 256) -> InferenceReport:
    """Top-1 accuracy and confusion matrix through the analog pipeline."""
    d2d = None
    if variation is not None and variation.sigma_d2d > 0:
        d2d = sample_network_d2d(mapping, variation)
    if lsb_units is None:
        n_cal = min(64, len(images))
        lsb_units = calibrate_adc_units(mapping, images[:n_cal], act_scales, d2d)
    confusion = np.zeros((10, 10), dtype=np.int64)
    sat: list = []
    correct = 0
    for b0 in range(0, len(images), batch_size):
        logits = analog_forward(mapping, images[b0:b0 + batch_size], act_scales,
                                d2d=d2d, mode=mode, lsb_units=lsb_units,
                                saturation_counter=sat)
        pred = logits.argmax(axis=1)
        truth = labels[b0:b0 + batch_size]
        correct += int((pred == truth).sum())
        for t, p in zip(truth, pred):
            confusion[t, p] += 1
    return InferenceReport(accuracy=correct / len(images), confusion=confusion,
                           n_images=len(images),
                           adc_saturation_events=int(sum(sat)),
                           adc_lsb_units=dict(lsb_units))
