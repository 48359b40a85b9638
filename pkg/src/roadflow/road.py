"""Road-prior inputs and the road feature branch.

The raw road raster lives on a grid twice as fine as the target flow map.
Before entering the network it is optionally reweighted cell-by-cell with the
historical coarse flow average (upsampled block-constant to the raster grid),
which suppresses mapped roads that carry little traffic. The branch itself is
conv -> direction-oriented 1D conv -> two 1D residual blocks -> 2x2 max pool,
yielding one feature map per channel on the flow grid.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .layers import (Conv2D, ResidualBlock1D, _make_road_conv, maxpool2d,
                     nearest_resize)


def build_weight_map(train_coarse: np.ndarray, i_f: int, j_f: int) -> np.ndarray:
    """Per-cell temporal mean of total coarse flow, upsampled to the raster grid.

    ``train_coarse`` is (T, I_c, J_c, 2); channels are summed before the mean.
    Returns (2*i_f, 2*j_f, 1). The upsample is nearest-neighbour, so the map
    is block-constant over each coarse cell's footprint.
    """
    arr = np.asarray(train_coarse, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError(f"need a nonempty (T, I_c, J_c, C) history, got {arr.shape}")
    mean_total = arr.sum(axis=3).mean(axis=0)
    up = nearest_resize(mean_total, 2 * i_f, 2 * j_f)
    return up[:, :, None]


def weighted_road_map(base: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Elementwise product of the raster intensities and the weight map."""
    base = np.asarray(base, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if base.shape != weights.shape:
        raise ValueError(f"shape mismatch {base.shape} vs {weights.shape}")
    return base * weights


def prepare_road_input(raster: np.ndarray, train_coarse: np.ndarray,
                       i_f: int, j_f: int, weighting: str) -> np.ndarray:
    """Produce the (2*i_f, 2*j_f, 1) branch input for a given weighting mode.

    The result is scaled to peak at 1 and quantized to float32 precision so
    that the copy stored in a checkpoint reproduces training bit-for-bit.
    """
    raster = np.asarray(raster, dtype=np.float64)
    if raster.shape != (2 * i_f, 2 * j_f, 1):
        raise ValueError(f"raster shape {raster.shape} != {(2 * i_f, 2 * j_f, 1)}")
    if weighting == "weighted":
        road = weighted_road_map(raster, build_weight_map(train_coarse, i_f, j_f))
    elif weighting == "common":
        road = raster.copy()
    else:
        raise ValueError(f"unknown road weighting {weighting!r}")
    peak = road.max()
    if peak > 0:
        road = road / peak
    return road.astype(np.float32).astype(np.float64)


class RoadBranch:
    """Feature extractor over the road raster; output is (1, I_f, J_f, C)."""

    def __init__(self, channels: int, radius: int, rng: np.random.Generator,
                 conv_kind: str = "md1d"):
        self.entry = Conv2D(3, 1, channels, rng)
        self.direction_conv = _make_road_conv(conv_kind, channels, channels,
                                              radius, rng)
        self.block1 = ResidualBlock1D(channels, radius, rng, conv_kind)
        self.block2 = ResidualBlock1D(channels, radius, rng, conv_kind)

    def __call__(self, road: Tensor, train: bool) -> Tensor:
        h = self.entry(road)
        h = self.direction_conv(h)
        h = self.block1(h, train)
        h = self.block2(h, train)
        return maxpool2d(h, 2)

    def param_items(self, prefix: str = ""):
        items = []
        for name, child in (("entry.", self.entry),
                            ("direction_conv.", self.direction_conv),
                            ("block1.", self.block1), ("block2.", self.block2)):
            items.extend(child.param_items(prefix + name))
        return items

    def batchnorms(self, prefix: str = ""):
        return (self.block1.batchnorms(prefix + "block1.")
                + self.block2.batchnorms(prefix + "block2."))
