"""Software training with fake quantization and tile-column dropout.

Training is float/torch only; the analog array is inference-only. Tile-column
dropout zeroes, per training step and per tile, the contribution of one
pseudo-randomly chosen physical column (one polarity of one weight slice of
one channel group); at inference the weights are rescaled by the keep
fraction 7/8.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..device_models import InvalidInputError
from ..periphery import QuantConfig
from ..variation import STREAM_DROPOUT, STREAM_INIT, substream
from .network import ConvSpec, DenseSpec, MaxPoolSpec, NetworkSpec, propagate_shapes
from .quant import fake_quant_weight, fake_quant_activation

__all__ = ["TrainConfig", "TrainingError", "TrainResult", "QuantNet", "train",
           "calibrate_act_scales"]

ACT_QMAX = 255


class TrainingError(RuntimeError):
    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"       # or "constant"
    dropout: str = "off"              # or "tile-column"
    drop_per_tile: int = 1
    quant_aware: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.dropout not in ("off", "tile-column"):
            raise InvalidInputError(f"unknown dropout mode {self.dropout!r}")


class _ActQuant(nn.Module):
    """Unsigned activation fake quantizer with a tracked running max."""

    def __init__(self, act_bits=8, enabled=True):
        super().__init__()
        self.act_bits = act_bits
        self.enabled = enabled
        self.register_buffer("running_max", torch.tensor(0.0))

    def forward(self, x):
        if self.training:
            with torch.no_grad():
                m = x.amax().clamp(min=1e-8)
                if self.running_max == 0:
                    self.running_max.fill_(m)
                else:
                    self.running_max.mul_(0.95).add_(0.05 * m)
        if not self.enabled:
            return x
        scale = (self.running_max / ((1 << self.act_bits) - 1)).clamp(min=1e-12)
        return fake_quant_activation(x, scale.item(), self.act_bits)

    @property
    def scale(self) -> float:
        return float(self.running_max) / ((1 << self.act_bits) - 1)


class _QuantLayer(nn.Module):
    """Conv or dense layer with fake-quant weights and tile-column dropout."""

    def __init__(self, weight_shape, is_conv, conv_spec, qcfg: QuantConfig,
                 rows_per_tile: int, chans_per_tile: int, quant_aware: bool):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(weight_shape))
        self.is_conv = is_conv
        self.conv_spec = conv_spec
        self.qcfg = qcfg
        self.rows_per_tile = rows_per_tile
        self.chans_per_tile = chans_per_tile
        self.quant_aware = quant_aware
        self.drops = None  # per-step (n_row_blocks, n_chan_blocks) int array
        fan_in = int(np.prod(weight_shape[1:]))
        nn.init.normal_(self.weight, std=math.sqrt(2.0 / fan_in))

    @property
    def n_row_blocks(self) -> int:
        k = int(np.prod(self.weight.shape[1:]))
        return math.ceil(k / self.rows_per_tile)

    @property
    def n_chan_blocks(self) -> int:
        return math.ceil(self.weight.shape[0] / self.chans_per_tile)

    def _effective_weight(self):
        w = fake_quant_weight(self.weight, self.qcfg.weight_bits) \
            if self.quant_aware else self.weight
        if self.drops is None:
            return w
        with torch.no_grad():
            delta = self._drop_delta()
        return w - delta

    def _drop_delta(self):
        """Weight correction removing the dropped columns' contributions."""
        cfg = self.qcfg
        qmax = (1 << (cfg.weight_bits - 1)) - 1
        w = self.weight.detach()
        flat = w.reshape(w.shape[0], -1)                      # (C, K)
        scale = flat.abs().amax(dim=1).clamp(min=1e-12) / qmax
        codes = torch.round(flat / scale[:, None]).clamp(-qmax, qmax)
        c_out, k = flat.shape
        sb, ns = cfg.slice_bits, cfg.n_slices
        mask_val = (1 << sb) - 1
        mag = codes.abs().to(torch.int64)
        # signed contribution of each (slice, polarity) column to the code
        comp = torch.zeros(c_out, k, ns, 2)
        for s in range(ns):
            val = torch.bitwise_and(mag >> (s * sb), mask_val).float() * (1 << (s * sb))
            comp[:, :, s, 0] = torch.where(codes > 0, val, torch.zeros(()))
            comp[:, :, s, 1] = torch.where(codes < 0, -val, torch.zeros(()))
        # dropped-column mask over (row block, channel, slice, polarity)
        drops = self.drops
        n_rb, n_cb = drops.shape
        dmask = torch.zeros(n_rb, c_out, ns, 2)
        per_group = 2 * ns
        for rb in range(n_rb):
            for cb in range(n_cb):
                for col in np.atleast_1d(drops[rb, cb]):
                    chan = cb * self.chans_per_tile + col // per_group
                    if chan >= c_out:
                        continue
                    s, pol = (col % per_group) // 2, col % 2
                    dmask[rb, chan, s, pol] = 1.0
        row_mask = dmask.repeat_interleave(self.rows_per_tile, dim=0)[:k]
        delta_codes = (comp * row_mask.permute(1, 0, 2, 3)).sum(dim=(2, 3))
        return (delta_codes * scale[:, None]).reshape(self.weight.shape)

    def forward(self, x):
        w = self._effective_weight()
        if self.is_conv:
            return F.conv2d(x, w, stride=self.conv_spec.stride,
                            padding=self.conv_spec.pad)
        return F.linear(x, w)


class QuantNet(nn.Module):
    """Torch realization of a NetworkSpec with the analog-aware knobs."""

    def __init__(self, spec: NetworkSpec, qcfg: QuantConfig,
                 geometry_rows_per_tile: int = 64, chans_per_tile: int | None = None,
                 quant_aware: bool = True):
        super().__init__()
        propagate_shapes(spec)
        self.spec = spec
        self.qcfg = qcfg
        cpt = chans_per_tile or max(1, 8 // (2 * qcfg.n_slices))
        mods = []
        self.quant_layers = {}
        h, w, c = spec.input_shape
        for i, layer in enumerate(spec.layers):
            last = i == len(spec.layers) - 1
            if isinstance(layer, ConvSpec):
                ql = _QuantLayer((layer.out_channels, c, layer.kernel, layer.kernel),
                                 True, layer, qcfg, geometry_rows_per_tile, cpt,
                                 quant_aware)
                mods += [ql, nn.ReLU(), _ActQuant(qcfg.act_bits, quant_aware)]
                self.quant_layers[i] = ql
                h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
                c = layer.out_channels
            elif isinstance(layer, MaxPoolSpec):
                mods.append(nn.MaxPool2d(layer.size))
                h, w = h // layer.size, w // layer.size
            elif isinstance(layer, DenseSpec):
                if not any(isinstance(m, nn.Flatten) for m in mods):
                    mods.append(nn.Flatten())
                ql = _QuantLayer((layer.units, h * w * c), False, None, qcfg,
                                 geometry_rows_per_tile, cpt, quant_aware)
                mods.append(ql)
                self.quant_layers[i] = ql
                if not last:
                    mods += [nn.ReLU(), _ActQuant(qcfg.act_bits, quant_aware)]
                h, w, c = 1, 1, layer.units
            else:
                raise InvalidInputError(f"unknown layer {layer!r}")
        self.body = nn.Sequential(*mods)

    def forward(self, x):
        return self.body(x)

    def set_drops(self, drops_by_layer):
        for i, ql in self.quant_layers.items():
            ql.drops = None if drops_by_layer is None else drops_by_layer.get(i)

    def float_weights(self) -> dict:
        return {i: ql.weight.detach().clone().numpy()
                for i, ql in self.quant_layers.items()}

    def act_input_scales(self) -> dict:
        """Input activation scale of every mapped layer (first layer: 1/255)."""
        scales = {}
        prev_scale = 1.0 / ACT_QMAX
        for m in self.body:
            if isinstance(m, _QuantLayer):
                idx = next(i for i, ql in self.quant_layers.items() if ql is m)
                scales[idx] = prev_scale
            elif isinstance(m, _ActQuant):
                prev_scale = max(m.scale, 1e-12)
        return scales


@dataclass
class TrainResult:
    weights: dict                # mapped layer index -> float ndarray
    act_scales: dict             # mapped layer index -> input activation scale
    log: list = field(default_factory=list)   # (epoch, split, accuracy, loss)
    dropout_trained: bool = False
    drop_history: list = field(default_factory=list)


def draw_drops(net: QuantNet, rng: np.random.Generator, n_per_tile: int = 1) -> dict:
    """One step's dropped-column choice for every tile of every layer."""
    out = {}
    for i, ql in net.quant_layers.items():
        out[i] = rng.integers(0, 8, size=(ql.n_row_blocks, ql.n_chan_blocks, n_per_tile)) \
            .squeeze(-1) if n_per_tile == 1 else \
            rng.integers(0, 8, size=(ql.n_row_blocks, ql.n_chan_blocks, n_per_tile))
    return out


def train(spec: NetworkSpec, dataset, cfg: TrainConfig,
          qcfg: QuantConfig | None = None,
          max_train_images: int | None = None,
          progress=None) -> TrainResult:
    """SGD-with-momentum training; returns weights, scales, and the epoch log."""
    qcfg = qcfg or QuantConfig()
    init_rng = substream(cfg.seed, STREAM_INIT)
    torch.manual_seed(int(init_rng.integers(0, 2**63 - 1)))
    drop_rng = substream(cfg.seed, STREAM_DROPOUT)
    shuffle_rng = substream(cfg.seed, STREAM_INIT, 1)

    net = QuantNet(spec, qcfg, quant_aware=cfg.quant_aware)
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    xs = torch.from_numpy(np.ascontiguousarray(
        dataset.train_images.transpose(0, 3, 1, 2))).float()
    ys = torch.from_numpy(dataset.train_labels)
    if max_train_images is not None:
        xs, ys = xs[:max_train_images], ys[:max_train_images]
    n = xs.shape[0]
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    log = []
    result = TrainResult(weights={}, act_scales={}, log=log,
                         dropout_trained=cfg.dropout == "tile-column")
    step = 0
    for epoch in range(cfg.epochs):
        net.train()
        order = shuffle_rng.permutation(n)
        epoch_loss, correct = 0.0, 0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            xb, yb = xs[idx], ys[idx]
            if cfg.dropout == "tile-column":
                drops = draw_drops(net, drop_rng, cfg.drop_per_tile)
                result.drop_history.append(
                    {i: np.array(d, copy=True) for i, d in drops.items()})
                net.set_drops(drops)
            if cfg.lr_schedule == "cosine":
                lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / max(1, total_steps)))
                for g in opt.param_groups:
                    g["lr"] = lr
            opt.zero_grad()
            out = net(xb)
            loss = F.cross_entropy(out, yb)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", log)
            loss.backward()
            opt.step()
            epoch_loss += float(loss.detach()) * len(idx)
            correct += int((out.argmax(1) == yb).sum())
            step += 1
        net.set_drops(None)
        acc = correct / n
        log.append((epoch, "train", acc, epoch_loss / n))
        if progress:
            progress(epoch, acc, epoch_loss / n)

    net.eval()
    result.weights = net.float_weights()
    result.act_scales = net.act_input_scales()
    if result.dropout_trained:
        # inference-time compensation for the per-step dropped column, then
        # re-derive activation scales for the rescaled weights
        result.weights = {i: w * (7.0 / 8.0) for i, w in result.weights.items()}
        result.act_scales = calibrate_act_scales(
            spec, result.weights, dataset.train_images[:512], qcfg)
    return result


def build_eval_net(spec: NetworkSpec, weights: dict, act_scales: dict | None = None,
                   qcfg: QuantConfig | None = None,
                   quant_aware: bool = True) -> QuantNet:
    """QuantNet loaded with trained weights, ready for software evaluation."""
    qcfg = qcfg or QuantConfig()
    net = QuantNet(spec, qcfg, quant_aware=quant_aware)
    with torch.no_grad():
        for i, ql in net.quant_layers.items():
            ql.weight.copy_(torch.from_numpy(np.asarray(weights[i])).float())
        if act_scales is not None:
            qmax = (1 << qcfg.act_bits) - 1
            it = iter(sorted(i for i in net.quant_layers if i in act_scales))
            next(it, None)  # first mapped layer's input scale is the image scale
            for m in net.body:
                if isinstance(m, _ActQuant):
                    idx = next(it, None)
                    if idx is not None:
                        m.running_max.fill_(act_scales[idx] * qmax)
    net.eval()
    return net


def evaluate(net: QuantNet, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    net.eval()
    xs = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()
    ys = torch.from_numpy(labels)
    correct = 0
    with torch.no_grad():
        for b0 in range(0, len(xs), batch_size):
            out = net(xs[b0:b0 + batch_size])
            correct += int((out.argmax(1) == ys[b0:b0 + batch_size]).sum())
    return correct / len(xs)


def calibrate_act_scales(spec: NetworkSpec, weights: dict, images: np.ndarray,
                         qcfg: QuantConfig | None = None) -> dict:
    """Post-hoc input-scale calibration for float-trained weights."""
    qcfg = qcfg or QuantConfig()
    net = QuantNet(spec, qcfg, quant_aware=True)
    with torch.no_grad():
        for i, ql in net.quant_layers.items():
            ql.weight.copy_(torch.from_numpy(np.asarray(weights[i])).float())
    net.train()
    xs = torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()
    with torch.no_grad():
        net(xs)
    net.eval()
    return net.act_input_scales()
