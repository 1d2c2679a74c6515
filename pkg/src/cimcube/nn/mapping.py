"""Channel-based mapping of quantized weights onto tiles.

A conv layer is unrolled to a K x C matrix (K = kernel-input patch entries,
C = output channels). Rows are packed 64-deep per tile (8 physical rows times
8 stacked layers, read layer by layer); each output channel occupies one
differential column group: per weight slice a (G+, G-) column pair, so with
2-bit slices a tile holds 2 channels and with 1-bit slices 1 channel.

Slice values map to nominal levels through a fixed stride of the
uniform-in-conductance level table, which keeps conductance exactly linear in
the slice value and lets the common level-0 offset cancel in the differential
subtraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..device_models import (
    InvalidInputError,
    RramParams,
    TftParams,
    level_gap_table,
)
from ..periphery import QuantConfig
from ..tile import Tile, TileGeometry
from .network import ConvSpec, DenseSpec, NetworkSpec, propagate_shapes

__all__ = [
    "CapacityError",
    "LayerMapping",
    "NetworkMapping",
    "map_network",
    "unmap_layer",
    "slice_levels",
    "level_stride",
]


class CapacityError(RuntimeError):
    """The layer does not fit the configured tile budget."""

    def __init__(self, message, required_tiles):
        super().__init__(message)
        self.required_tiles = required_tiles


def level_stride(cfg: QuantConfig, n_levels: int = 32) -> int:
    """Level-table step per slice unit; keeps conductance linear in the value."""
    return (n_levels - 1) // ((1 << cfg.slice_bits) - 1)


def slice_levels(codes: np.ndarray, cfg: QuantConfig,
                 n_levels: int = 32) -> np.ndarray:
    """Decompose signed codes into nominal levels, shape (..., n_slices, 2).

    Last axis is (G+, G-); slice axis is least significant first.
    """
    codes = np.asarray(codes)
    mag = np.abs(codes.astype(np.int32))
    pos = codes > 0
    stride = level_stride(cfg, n_levels)
    mask = (1 << cfg.slice_bits) - 1
    out = np.zeros(codes.shape + (cfg.n_slices, 2), dtype=np.int32)
    for s in range(cfg.n_slices):
        val = (mag >> (s * cfg.slice_bits)) & mask
        out[..., s, 0] = np.where(pos, val, 0) * stride
        out[..., s, 1] = np.where(pos, 0, val) * stride
    return out


@dataclass(frozen=True)
class LayerMapping:
    """Tile assignment of one conv or dense layer."""

    layer_index: int
    matrix_codes: np.ndarray   # (K_pad, C) int8, zero-padded rows
    scales: np.ndarray         # (C,) per-channel weight scale
    levels: np.ndarray         # (K_pad, C, n_slices, 2) nominal levels
    k: int                     # true (unpadded) row count
    rows_per_tile: int
    chans_per_tile: int

    @property
    def n_row_blocks(self) -> int:
        return self.matrix_codes.shape[0] // self.rows_per_tile

    @property
    def n_chan_blocks(self) -> int:
        return math.ceil(self.matrix_codes.shape[1] / self.chans_per_tile)

    @property
    def tile_count(self) -> int:
        return self.n_row_blocks * self.n_chan_blocks


@dataclass
class NetworkMapping:
    """Programmed-network view: per-layer mappings plus the device context."""

    net: NetworkSpec
    cfg: QuantConfig
    geometry: TileGeometry
    tft: TftParams
    rram: RramParams
    layers: dict                # mapped layer index -> LayerMapping
    level_scheme: str = "uniform-conductance"
    v_read: float = 0.5

    @property
    def tile_count(self) -> int:
        return sum(m.tile_count for m in self.layers.values())

    def tile(self, layer_index: int, row_block: int, chan_block: int,
             d2d: np.ndarray | None = None) -> Tile:
        """Materialize one programmed tile (d2d defaults to no variation)."""
        m = self.layers[layer_index]
        g = self.geometry
        n_slices = self.cfg.n_slices
        gap_table = level_gap_table(self.rram, v_read=self.v_read,
                                    scheme=self.level_scheme)
        levels = np.zeros((g.n_rows, g.n_cols, g.n_layers), dtype=np.int32)
        r0 = row_block * m.rows_per_tile
        c0 = chan_block * m.chans_per_tile
        for r in range(m.rows_per_tile):
            row, layer = r % g.n_rows, r // g.n_rows
            for c in range(m.chans_per_tile):
                chan = c0 + c
                if chan >= m.matrix_codes.shape[1]:
                    continue
                for s in range(n_slices):
                    for pol in range(2):
                        col = c * (2 * n_slices) + 2 * s + pol
                        levels[row, col, layer] = m.levels[r0 + r, chan, s, pol]
        gaps = gap_table[levels]
        if d2d is None:
            d2d = np.ones_like(gaps)
        return Tile(g, self.tft, self.rram, gaps=gaps, levels=levels, d2d=d2d)


def _unrolled_codes(layer, codes: np.ndarray) -> np.ndarray:
    """Weight codes as a K x C matrix in im2col row order."""
    if isinstance(layer, ConvSpec):
        return codes.reshape(codes.shape[0], -1).T
    if isinstance(layer, DenseSpec):
        return codes.T
    raise InvalidInputError(f"layer {layer!r} carries no weights")


def map_network(net: NetworkSpec, qweights: dict, geometry: TileGeometry,
                cfg: QuantConfig, tft: TftParams, rram: RramParams,
                tile_budget: int | None = None,
                level_scheme: str = "uniform-conductance",
                v_read: float = 0.5) -> NetworkMapping:
    """Assign every quantized layer to tiles.

    ``qweights`` maps layer index -> (codes, scales) in the layer's native
    weight shape. Raises CapacityError (with the required count) if a layer
    alone exceeds ``tile_budget``.
    """
    propagate_shapes(net)
    rows_per_tile = geometry.n_rows * geometry.n_layers
    chans_per_tile = geometry.n_cols // (2 * cfg.n_slices)
    if chans_per_tile < 1:
        raise InvalidInputError(
            "tile has too few columns for one differential channel group")
    mappings = {}
    for li in net.mapped_layers:
        codes, scales = qweights[li]
        mat = _unrolled_codes(net.layers[li], np.asarray(codes))
        k, c = mat.shape
        k_pad = rows_per_tile * math.ceil(k / rows_per_tile)
        padded = np.zeros((k_pad, c), dtype=np.int8)
        padded[:k] = mat
        m = LayerMapping(
            layer_index=li,
            matrix_codes=padded,
            scales=np.asarray(scales, dtype=np.float64),
            levels=slice_levels(padded, cfg, rram.n_levels),
            k=k,
            rows_per_tile=rows_per_tile,
            chans_per_tile=chans_per_tile,
        )
        if tile_budget is not None and m.tile_count > tile_budget:
            raise CapacityError(
                f"layer {li} needs {m.tile_count} tiles, budget {tile_budget}",
                m.tile_count)
        mappings[li] = m
    return NetworkMapping(net, cfg, geometry, tft, rram, mappings,
                          level_scheme=level_scheme, v_read=v_read)


def unmap_layer(mapping: NetworkMapping, layer_index: int) -> np.ndarray:
    """Reconstruct the quantized weight codes from programmed levels.

    Lossless at sigma = 0: inverts the slice/level decomposition of every
    materialized tile.
    """
    m = mapping.layers[layer_index]
    cfg = mapping.cfg
    stride = level_stride(cfg, mapping.rram.n_levels)
    g = mapping.geometry
    n_slices = cfg.n_slices
    out = np.zeros_like(m.matrix_codes, dtype=np.int32)
    for rb in range(m.n_row_blocks):
        for cb in range(m.n_chan_blocks):
            tile = mapping.tile(layer_index, rb, cb)
            for r in range(m.rows_per_tile):
                row, layer = r % g.n_rows, r // g.n_rows
                for c in range(m.chans_per_tile):
                    chan = cb * m.chans_per_tile + c
                    if chan >= out.shape[1]:
                        continue
                    val = 0
                    for s in range(n_slices):
                        lp = int(tile.levels[row, c * (2 * n_slices) + 2 * s, layer])
                        ln = int(tile.levels[row, c * (2 * n_slices) + 2 * s + 1, layer])
                        val += ((lp - ln) // stride) << (s * cfg.slice_bits)
                    out[rb * m.rows_per_tile + r, chan] = val
    return out.astype(np.int8)
