"""Cloud and cloud-shadow removal by tile swapping.

Pipeline per band: percentile thresholds fitted on training rasters ->
cloud / shadow masks -> 16x16 tiles -> normal/abnormal classification ->
per-position average of normal training tiles -> abnormal tiles replaced
by that average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TILE = 16
PERCENTILE_GRID = tuple(range(5, 100, 5))


class ThresholdError(ValueError):
    pass


@dataclass(frozen=True)
class CcsThresholds:
    cloud_threshold: float
    shadow_threshold: float
    source_percentiles: tuple[int, int] | None = None  # (p_cloud, p_shadow)

    def __post_init__(self):
        if not self.shadow_threshold < self.cloud_threshold:
            raise ThresholdError(
                f"shadow threshold {self.shadow_threshold} must be below cloud threshold {self.cloud_threshold}")


@dataclass(frozen=True, eq=False)
class NoiseMask:
    cloud: np.ndarray
    shadow: np.ndarray

    @property
    def noise(self) -> np.ndarray:
        return self.cloud | self.shadow


@dataclass(frozen=True, eq=False)
class TileGrid:
    abnormal: np.ndarray  # (rows, cols) bool
    flagged_counts: np.ndarray  # (rows, cols) int
    tile_size: int = TILE

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.abnormal.shape

    @property
    def n_abnormal(self) -> int:
        return int(self.abnormal.sum())


@dataclass(frozen=True, eq=False)
class AverageTileBank:
    tiles: np.ndarray  # (rows, cols, tile, tile) float64, NaN where count == 0
    counts: np.ndarray  # (rows, cols) int
    tile_size: int = TILE

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.counts.shape

    def has(self, r: int, c: int) -> bool:
        return self.counts[r, c] >= 1


@dataclass
class SwapReport:
    swapped: list[tuple[int, int]] = field(default_factory=list)
    missing: list[tuple[int, int]] = field(default_factory=list)


def crop_to_tiles(band: np.ndarray, tile: int = TILE) -> np.ndarray:
    """Centre crop to the largest multiple of ``tile`` in each dimension."""
    h, w = band.shape
    hh, ww = (h // tile) * tile, (w // tile) * tile
    if hh == 0 or ww == 0:
        raise ValueError(f"raster {band.shape} smaller than one {tile}x{tile} tile")
    top, left = (h - hh) // 2, (w - ww) // 2
    return band[top:top + hh, left:left + ww]


def to_tiles(band: np.ndarray, tile: int = TILE) -> np.ndarray:
    """(H, W) -> (rows, cols, tile, tile) view."""
    h, w = band.shape
    if h % tile or w % tile:
        raise ValueError(f"raster {band.shape} not divisible by {tile}; crop_to_tiles first")
    return band.reshape(h // tile, tile, w // tile, tile).swapaxes(1, 2)


def from_tiles(tiles: np.ndarray) -> np.ndarray:
    r, c, t, _ = tiles.shape
    return tiles.swapaxes(1, 2).reshape(r * t, c * t)


def fit_thresholds(rasters: Sequence[np.ndarray], p_cloud: int = 95, p_shadow: int = 5) -> CcsThresholds:
    """Percentiles of the pooled training pixels (linear interpolation)."""
    if not len(rasters):
        raise ValueError("no training rasters")
    for p in (p_cloud, p_shadow):
        if p not in PERCENTILE_GRID:
            raise ThresholdError(f"percentile {p} not in 5..95 step 5")
    if p_shadow >= p_cloud:
        raise ThresholdError(f"shadow percentile {p_shadow} must be below cloud percentile {p_cloud}")
    pooled = np.concatenate([np.asarray(r, dtype=np.float64).ravel() for r in rasters])
    cloud, shadow = np.percentile(pooled, [p_cloud, p_shadow])
    return CcsThresholds(float(cloud), float(shadow), (p_cloud, p_shadow))


def detect_ccs(band: np.ndarray, thresholds: CcsThresholds) -> NoiseMask:
    band = np.asarray(band)
    return NoiseMask(band >= thresholds.cloud_threshold, band <= thresholds.shadow_threshold)


def classify_tiles(band: np.ndarray, mask: NoiseMask, tile: int = TILE) -> TileGrid:
    """A tile is abnormal when strictly more than half its pixels are flagged."""
    if mask.cloud.shape != np.shape(band):
        raise ValueError("mask and band shapes differ")
    counts = to_tiles(mask.noise, tile).sum(axis=(2, 3))
    return TileGrid(counts * 2 > tile * tile, counts, tile)


def build_average_bank(rasters: Sequence[np.ndarray], thresholds: CcsThresholds, tile: int = TILE) -> AverageTileBank:
    """Per-position mean of the tiles classified normal, accumulated in input order."""
    if not len(rasters):
        raise ValueError("no training rasters")
    shape = np.shape(rasters[0])
    rows, cols = shape[0] // tile, shape[1] // tile
    total = np.zeros((rows, cols, tile, tile))
    counts = np.zeros((rows, cols), dtype=np.int64)
    for raster in rasters:
        raster = np.asarray(raster, dtype=np.float64)
        if raster.shape != shape:
            raise ValueError(f"raster shape {raster.shape} differs from {shape}")
        grid = classify_tiles(raster, detect_ccs(raster, thresholds), tile)
        normal = ~grid.abnormal
        total[normal] += to_tiles(raster, tile)[normal]
        counts += normal
    with np.errstate(invalid="ignore"):
        tiles = total / counts[:, :, None, None]
    tiles[counts == 0] = np.nan
    return AverageTileBank(tiles, counts, tile)


def swap_tiles(band: np.ndarray, grid: TileGrid, bank: AverageTileBank) -> tuple[np.ndarray, SwapReport]:
    """Replace abnormal tiles with the bank's average tile at the same position.

    Abnormal tiles without a bank entry stay as they are and are listed in
    ``report.missing``. Output is float64.
    """
    if grid.grid_shape != bank.grid_shape:
        raise ValueError(f"grid {grid.grid_shape} incompatible with bank {bank.grid_shape}")
    out = np.array(band, dtype=np.float64)
    tiles = to_tiles(out, grid.tile_size)
    report = SwapReport()
    for r, c in zip(*np.nonzero(grid.abnormal)):
        if bank.has(r, c):
            tiles[r, c] = bank.tiles[r, c]
            report.swapped.append((int(r), int(c)))
        else:
            report.missing.append((int(r), int(c)))
    return out, report


class CloudShadowRemover:
    """Fit thresholds and the average bank on training rasters of one band, then clean any raster.

    >>> remover = CloudShadowRemover().fit(train_rasters)
    >>> cleaned, report = remover.transform(raster)
    """

    def __init__(self, p_cloud: int = 95, p_shadow: int = 5, tile: int = TILE):
        self.p_cloud = p_cloud
        self.p_shadow = p_shadow
        self.tile = tile
        self.thresholds: CcsThresholds | None = None
        self.bank: AverageTileBank | None = None

    def fit(self, rasters: Sequence[np.ndarray]) -> "CloudShadowRemover":
        cropped = [crop_to_tiles(np.asarray(r), self.tile) for r in rasters]
        self.thresholds = fit_thresholds(cropped, self.p_cloud, self.p_shadow)
        self.bank = build_average_bank(cropped, self.thresholds, self.tile)
        return self

    def masks(self, raster: np.ndarray) -> tuple[np.ndarray, NoiseMask, TileGrid]:
        if self.thresholds is None:
            raise RuntimeError("fit() first")
        band = crop_to_tiles(np.asarray(raster), self.tile)
        mask = detect_ccs(band, self.thresholds)
        return band, mask, classify_tiles(band, mask, self.tile)

    def transform(self, raster: np.ndarray) -> tuple[np.ndarray, SwapReport]:
        band, _, grid = self.masks(raster)
        return swap_tiles(band, grid, self.bank)


def percentile_sweep(rasters: Sequence[np.ndarray], grid: Sequence[int] = PERCENTILE_GRID, tile: int = TILE):
    """Abnormal-tile statistics for every valid (p_cloud, p_shadow) pair on the grid.

    Yields ``(p_cloud, p_shadow, cloud_threshold, shadow_threshold, mean_abnormal_fraction)``.
    """
    cropped = [crop_to_tiles(np.asarray(r, dtype=np.float64), tile) for r in rasters]
    pooled = np.concatenate([r.ravel() for r in cropped])
    levels = dict(zip(grid, np.percentile(pooled, list(grid))))
    for p_cloud in grid:
        for p_shadow in grid:
            if p_shadow >= p_cloud or not levels[p_shadow] < levels[p_cloud]:
                continue
            th = CcsThresholds(float(levels[p_cloud]), float(levels[p_shadow]), (p_cloud, p_shadow))
            frac = np.mean([classify_tiles(r, detect_ccs(r, th), tile).abnormal.mean() for r in cropped])
            yield p_cloud, p_shadow, th.cloud_threshold, th.shadow_threshold, float(frac)
