"""Symmetric per-channel weight quantization and fake-quant training ops."""

from __future__ import annotations

import numpy as np
import torch

__all__ = [
    "quantize_weights",
    "dequantize_weights",
    "fake_quant_weight",
    "fake_quant_activation",
]


def quantize_weights(w, weight_bits: int = 4):
    """Per-output-channel symmetric quantization.

    scale = max|w| / qmax with qmax = 2^(bits-1) - 1; codes are
    round-to-nearest-even integers in [-qmax, qmax]. All-zero channels get
    scale 1 by convention.
    """
    w = np.asarray(w, dtype=np.float64)
    qmax = (1 << (weight_bits - 1)) - 1
    flat = w.reshape(w.shape[0], -1)
    scales = np.abs(flat).max(axis=1) / qmax
    scales[scales == 0] = 1.0
    codes = np.round(flat / scales[:, None])  # numpy rounds half to even
    codes = np.clip(codes, -qmax, qmax).astype(np.int8)
    return codes.reshape(w.shape), scales


def dequantize_weights(codes, scales):
    codes = np.asarray(codes, dtype=np.float64)
    shape = (-1,) + (1,) * (codes.ndim - 1)
    return codes * np.asarray(scales).reshape(shape)


class _RoundSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return torch.round(x)

    @staticmethod
    def backward(ctx, g):
        return g


def fake_quant_weight(w: torch.Tensor, weight_bits: int = 4) -> torch.Tensor:
    """Per-channel fake quantization with a straight-through gradient."""
    qmax = (1 << (weight_bits - 1)) - 1
    flat = w.detach().reshape(w.shape[0], -1)
    scale = flat.abs().amax(dim=1) / qmax
    scale = torch.where(scale == 0, torch.ones_like(scale), scale)
    shape = (-1,) + (1,) * (w.ndim - 1)
    scale = scale.reshape(shape)
    q = _RoundSTE.apply(w / scale).clamp(-qmax, qmax)
    return q * scale


def fake_quant_activation(x: torch.Tensor, scale: float, act_bits: int = 8) -> torch.Tensor:
    """Unsigned fake quantization of a post-ReLU activation tensor."""
    qmax = (1 << act_bits) - 1
    q = _RoundSTE.apply(x / scale).clamp(0, qmax)
    return q * scale
