"""Network presets, shape propagation, and the torch model builder.

Layers are conv / pointwise conv / maxpool / dense with ReLU between them;
the final dense layer emits 10 class logits. Convolutions and dense layers
carry no bias: the analog tiles implement pure dot products, and biases are
not part of the datapath.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..device_models import InvalidInputError

__all__ = [
    "ConvSpec",
    "MaxPoolSpec",
    "DenseSpec",
    "NetworkSpec",
    "build_network",
    "propagate_shapes",
    "build_torch_model",
    "prune_channels",
]


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class MaxPoolSpec:
    size: int = 2


@dataclass(frozen=True)
class DenseSpec:
    units: int


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple        # (H, W, C)
    layers: tuple

    @property
    def mapped_layers(self):
        """Indices of layers that own weights (conv and dense)."""
        return [i for i, l in enumerate(self.layers)
                if isinstance(l, (ConvSpec, DenseSpec))]


def pointwise(out_channels: int) -> ConvSpec:
    return ConvSpec(out_channels, kernel=1, stride=1, pad=0)


_VGG16_CHANNELS = [64, 64, "P", 128, 128, "P", 256, 256, 256, "P",
                   512, 512, 512, "P", 512, 512, 512, "P"]

# fixed desk-scale preset: 6 conv + 2 dense, channels 32-32-64-64-128-128
_VGG_MINI_CHANNELS = [32, 32, "P", 64, 64, "P", 128, 128, "P"]


def _stack(channels, dense_units):
    layers = []
    for c in channels:
        if c == "P":
            layers.append(MaxPoolSpec(2))
        else:
            layers.append(ConvSpec(c))
    layers.extend(DenseSpec(u) for u in dense_units)
    return tuple(layers)


def build_network(preset: str, input_shape=None) -> NetworkSpec:
    """Named network presets; unknown names raise."""
    if preset == "vgg16":
        shape = input_shape or (32, 32, 3)
        spec = NetworkSpec("vgg16", shape, _stack(_VGG16_CHANNELS, [4096, 4096, 10]))
    elif preset == "vgg-mini":
        shape = input_shape or (28, 28, 1)
        spec = NetworkSpec("vgg-mini", shape, _stack(_VGG_MINI_CHANNELS, [256, 10]))
    else:
        raise InvalidInputError(f"unknown network preset {preset!r}")
    propagate_shapes(spec)  # validates consistency
    return spec


def propagate_shapes(spec: NetworkSpec) -> list:
    """Shape after every layer; raises if any layer is inconsistent."""
    h, w, c = spec.input_shape
    shapes = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvSpec):
            h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            c = layer.out_channels
            if h < 1 or w < 1:
                raise InvalidInputError(f"layer {i}: spatial size collapsed to {h}x{w}")
            shapes.append((h, w, c))
        elif isinstance(layer, MaxPoolSpec):
            h, w = h // layer.size, w // layer.size
            if h < 1 or w < 1:
                raise InvalidInputError(f"layer {i}: pooled away the feature map")
            shapes.append((h, w, c))
        elif isinstance(layer, DenseSpec):
            fan_in = h * w * c
            h, w, c = 1, 1, layer.units
            shapes.append((1, 1, layer.units))
            del fan_in
        else:
            raise InvalidInputError(f"layer {i}: unknown layer {layer!r}")
    if c != 10:
        raise InvalidInputError(f"final layer width {c}, expected 10 classes")
    return shapes


def build_torch_model(spec: NetworkSpec) -> nn.Sequential:
    """Float torch model matching the spec (ReLU after every weighted layer
    except the logits)."""
    h, w, c = spec.input_shape
    mods = []
    for i, layer in enumerate(spec.layers):
        last = i == len(spec.layers) - 1
        if isinstance(layer, ConvSpec):
            mods.append(nn.Conv2d(c, layer.out_channels, layer.kernel,
                                  stride=layer.stride, padding=layer.pad, bias=False))
            mods.append(nn.ReLU())
            h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            c = layer.out_channels
        elif isinstance(layer, MaxPoolSpec):
            mods.append(nn.MaxPool2d(layer.size))
            h, w = h // layer.size, w // layer.size
        elif isinstance(layer, DenseSpec):
            if not any(isinstance(m, nn.Flatten) for m in mods):
                mods.append(nn.Flatten())
            mods.append(nn.Linear(h * w * c, layer.units, bias=False))
            if not last:
                mods.append(nn.ReLU())
            h, w, c = 1, 1, layer.units
    return nn.Sequential(*mods)


def prune_channels(spec: NetworkSpec, state, ratio: float):
    """Drop the lowest-L1-norm output channels of every conv layer.

    ``state`` maps mapped-layer index -> weight array (torch tensor or
    ndarray, conv [C_out, C_in, kh, kw] or dense [units, fan_in]). Returns
    the rewired spec, the pruned state, and per-layer kept-channel indices.
    The dense layer following the last conv has its fan-in rewired to the
    surviving channels.
    """
    if not 0 <= ratio < 1:
        raise InvalidInputError("prune ratio must be in [0, 1)")
    if ratio == 0:
        return spec, dict(state), {}

    shapes = propagate_shapes(spec)
    mapped = spec.mapped_layers
    new_layers = list(spec.layers)
    new_state = {}
    kept: dict = {}
    prev_keep = None        # surviving input channels of the next conv
    for li in mapped:
        layer = spec.layers[li]
        w = torch.as_tensor(state[li]).clone()
        if isinstance(layer, ConvSpec):
            if prev_keep is not None:
                w = w[:, prev_keep]
            norms = w.abs().flatten(1).sum(dim=1)
            n_keep = max(1, layer.out_channels - int(layer.out_channels * ratio))
            keep = torch.argsort(norms, descending=True)[:n_keep].sort().values
            kept[li] = keep.tolist()
            new_layers[li] = ConvSpec(n_keep, layer.kernel, layer.stride, layer.pad)
            new_state[li] = w[keep]
            prev_keep = keep
        else:  # dense
            if prev_keep is not None:
                # fan-in is (channels, h*w) flattened channel-major by torch
                h, wd, _ = shapes[li - 1] if li > 0 else spec.input_shape
                w3 = w.reshape(w.shape[0], -1, h * wd)
                w = w3[:, prev_keep].reshape(w.shape[0], -1)
                prev_keep = None
            new_state[li] = w
    new_spec = NetworkSpec(spec.name + f"-pruned{ratio:g}", spec.input_shape,
                           tuple(new_layers))
    propagate_shapes(new_spec)
    return new_spec, new_state, kept
