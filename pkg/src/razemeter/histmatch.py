"""Histogram specification: remap a tile's channels onto a reference distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import GeoTile

CHANNELS = {"r": 0, "g": 1, "b": 2}


@dataclass(frozen=True)
class ChannelHistogram:
    bins: np.ndarray  # 256 counts
    total: int

    def cdf(self) -> np.ndarray:
        """Non-decreasing CDF in [0, 1]; final value 1 when total > 0."""
        c = np.cumsum(self.bins, dtype=np.float64)
        return c / self.total if self.total > 0 else c


def channel_histogram(image: np.ndarray, channel: str) -> ChannelHistogram:
    """Exact 256-bin count of one channel of an RGB uint8 image."""
    arr = np.asarray(image)
    if arr.size == 0:
        raise ValueError("image must be nonempty")
    values = arr[..., CHANNELS[channel]].ravel()
    bins = np.bincount(values, minlength=256)[:256]
    return ChannelHistogram(bins=bins, total=int(values.size))


def match_channel(source: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Map one uint8 channel so its distribution tracks the reference channel.

    Each source value v maps to the smallest u whose reference CDF reaches the
    source CDF at v; the lookup is monotonically non-decreasing.
    """
    src_cdf = np.cumsum(np.bincount(source.ravel(), minlength=256)[:256]) / source.size
    ref_cdf = np.cumsum(np.bincount(reference.ravel(), minlength=256)[:256]) / reference.size
    lookup = np.searchsorted(ref_cdf, src_cdf, side="left").clip(0, 255).astype(np.uint8)
    return lookup[source]


def histogram_match(source: GeoTile, reference: GeoTile) -> GeoTile:
    """Per-channel histogram specification of ``source`` onto ``reference``."""
    src = np.asarray(source.pixels)
    ref = np.asarray(reference.pixels)
    out = np.empty_like(src)
    for c in range(3):
        out[..., c] = match_channel(src[..., c], ref[..., c])
    return source.with_pixels(out)
