#!/usr/bin/env python3
"""Configuration-level smoke run of the full vgg16 preset.

Maps randomly initialized, quantized VGG-16 weights onto tiles (reporting the
tile count per layer) and pushes a small batch of random images through
ideal-mode analog inference. No training: the point is that the full preset
fits the mapping scheme and the pipeline completes at scale.

Usage: run_vgg16_smoke.py [--images N] [--seed N]
"""

import argparse
import time

import numpy as np

from cimcube.device_models import reference_rram, reference_tft
from cimcube.nn.infer import analog_forward
from cimcube.nn.mapping import map_network
from cimcube.nn.network import ConvSpec, build_network, propagate_shapes
from cimcube.nn.quant import quantize_weights
from cimcube.periphery import QuantConfig
from cimcube.tile import TileGeometry


def random_weights(spec, rng):
    """He-initialized float weights for every mapped layer."""
    shapes = propagate_shapes(spec)
    out = {}
    h, w, c = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ConvSpec):
            shape = (layer.out_channels, c, layer.kernel, layer.kernel)
        elif i in spec.mapped_layers:  # dense
            prev = shapes[i - 1] if i > 0 else spec.input_shape
            shape = (layer.units, int(np.prod(prev)))
        else:
            h, w, c = shapes[i]
            continue
        fan_in = int(np.prod(shape[1:]))
        out[i] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
        h, w, c = shapes[i]
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--images", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)

    spec = build_network("vgg16")
    qcfg = QuantConfig()
    weights = random_weights(spec, rng)
    qw = {li: quantize_weights(weights[li], qcfg.weight_bits)
          for li in spec.mapped_layers}
    t0 = time.time()
    mapping = map_network(spec, qw, TileGeometry(), qcfg,
                          reference_tft(), reference_rram())
    print(f"mapped {len(mapping.layers)} layers onto "
          f"{mapping.tile_count} tiles in {time.time() - t0:.1f} s")
    for li, m in sorted(mapping.layers.items()):
        print(f"  layer {li}: {m.matrix_codes.shape[0]}x{m.matrix_codes.shape[1]} "
              f"codes -> {m.tile_count} tiles")

    act_scales = {li: 1.0 / 255 for li in spec.mapped_layers}
    images = rng.random((args.images,) + tuple(spec.input_shape)).astype(np.float32)
    t0 = time.time()
    logits = analog_forward(mapping, images, act_scales, mode="ideal")
    print(f"ideal-mode inference on {args.images} images: "
          f"{time.time() - t0:.1f} s, logits shape {logits.shape}")


if __name__ == "__main__":
    main()
