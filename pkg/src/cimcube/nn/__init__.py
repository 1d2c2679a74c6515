"""Quantized CNN harness: presets, training with tile-column dropout,
weight mapping onto tiles, datasets, and variation-aware inference."""

from .network import NetworkSpec, ConvSpec, DenseSpec, MaxPoolSpec, build_network, propagate_shapes
from .quant import quantize_weights, dequantize_weights
from .mapping import LayerMapping, NetworkMapping, map_network, unmap_layer
from .datasets import Dataset, load_dataset
