"""Inter-band Pearson correlation and SWIR / RGB band selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.sparse.csgraph import connected_components

from .ingestion import BAND_NAMES, SatelliteScene, week_index

logger = logging.getLogger(__name__)

SWIR_BANDS = ("B11", "B12")
RGB_BANDS = ("B04", "B03", "B02")


class UndefinedCorrelationError(ValueError):
    pass


class BandSelectionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    values: np.ndarray
    p_values: np.ndarray
    n_scenes: int
    band_names: tuple[str, ...] = BAND_NAMES
    # scenes dropped per pair because one band was constant
    n_excluded: np.ndarray | None = None

    def entry(self, a: str, b: str) -> float:
        return float(self.values[self.band_names.index(a), self.band_names.index(b)])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["band", *self.band_names])
            for name, row in zip(self.band_names, self.values):
                w.writerow([name, *(f"{v:.6f}" for v in row)])
        return path

    def heatmap_rows(self):
        """Long-format (row band, column band, rho, p) records for plotting."""
        for i, a in enumerate(self.band_names):
            for j, b in enumerate(self.band_names):
                yield a, b, float(self.values[i, j]), float(self.p_values[i, j])


@dataclass(frozen=True)
class BandSelection:
    texture_band: str
    embedding_bands: tuple[str, str, str]
    band_names: tuple[str, ...] = BAND_NAMES

    def __post_init__(self):
        for b in (self.texture_band, *self.embedding_bands):
            if b not in self.band_names:
                raise BandSelectionError(f"unknown band {b}")
        if self.texture_band in self.embedding_bands:
            raise BandSelectionError("texture band must not be one of the embedding bands")

    @property
    def texture_index(self) -> int:
        """1-based position in the stored band order."""
        return self.band_names.index(self.texture_band) + 1

    @property
    def embedding_indices(self) -> tuple[int, int, int]:
        return tuple(self.band_names.index(b) + 1 for b in self.embedding_bands)


@dataclass(frozen=True)
class SelectionPolicy:
    """``mode="fixed"`` always returns B12 and (B04, B03, B02).

    ``mode="auto"`` clusters bands by single linkage on ``|rho| >= threshold``
    and picks, from the cluster holding the SWIR bands, the SWIR band with the
    lowest mean ``|rho|`` against all bands outside that cluster.
    """

    mode: str = "fixed"
    threshold: float = 0.8
    swir_bands: tuple[str, ...] = SWIR_BANDS
    embedding_bands: tuple[str, str, str] = RGB_BANDS


def _pair_stats(x: np.ndarray, n: int):
    """Pearson r and two-sided p for every row pair of ``x`` (bands x pixels)."""
    x = x - x.mean(axis=1, keepdims=True)
    ss = np.einsum("ij,ij->i", x, x)
    constant = ss <= 0
    denom = np.sqrt(np.outer(ss, ss))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = (x @ x.T) / denom
    r = np.clip(r, -1.0, 1.0)
    undefined = constant[:, None] | constant[None, :]
    r[undefined] = np.nan
    df = n - 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t = r * np.sqrt(df / np.maximum(1.0 - r * r, 0.0))
    p = 2.0 * stats.t.sf(np.abs(t), df)
    p[np.abs(r) >= 1.0] = 0.0
    p[undefined] = np.nan
    return r, p


def correlation_matrix(scenes: Sequence[SatelliteScene], band_names: Sequence[str] | None = None) -> CorrelationMatrix:
    """Average of per-scene Pearson matrices over uniform-resolution scenes.

    Scenes are reduced in epi-week order. A pair is skipped for a scene when
    either band is constant there; p-values keep the per-pair maximum.
    """
    if len(scenes) < 2:
        raise ValueError("need at least two scenes")
    names = tuple(band_names or scenes[0].band_names)
    k = len(names)
    total = np.zeros((k, k))
    counts = np.zeros((k, k), dtype=int)
    pmax = np.zeros((k, k))
    for scene in sorted(scenes, key=lambda s: (s.region.key, week_index(s.epiweek))):
        if not scene.is_uniform:
            raise ValueError(f"{scene.region.name} {scene.epiweek}: resample before correlating")
        x = np.stack([scene.band(b).ravel() for b in names]).astype(np.float64)
        r, p = _pair_stats(x, x.shape[1])
        ok = ~np.isnan(r)
        total[ok] += r[ok]
        counts[ok] += 1
        pmax[ok] = np.maximum(pmax[ok], p[ok])
    if (counts == 0).any():
        i, j = np.argwhere(counts == 0)[0]
        raise UndefinedCorrelationError(f"correlation {names[i]}/{names[j]} undefined in every scene")
    values = total / counts
    values = (values + values.T) / 2
    np.fill_diagonal(values, 1.0)
    np.fill_diagonal(pmax, 0.0)
    excluded = len(scenes) - counts
    if excluded.any():
        logger.warning("%d band-pair/scene combinations skipped (constant band)", int(np.triu(excluded, 1).sum()))
    return CorrelationMatrix(values, pmax, len(scenes), names, excluded)


def clusters(corr: CorrelationMatrix, threshold: float = 0.8) -> list[tuple[str, ...]]:
    adjacency = np.abs(corr.values) >= threshold
    _, labels = connected_components(adjacency, directed=False)
    groups: dict[int, list[str]] = {}
    for name, lab in zip(corr.band_names, labels):
        groups.setdefault(int(lab), []).append(name)
    return [tuple(g) for g in groups.values()]


def select_bands(corr: CorrelationMatrix, policy: SelectionPolicy | None = None) -> BandSelection:
    policy = policy or SelectionPolicy()
    if np.isnan(corr.values).any():
        raise UndefinedCorrelationError("correlation matrix has undefined entries")
    if policy.mode == "fixed":
        return BandSelection("B12", RGB_BANDS, corr.band_names)
    if policy.mode != "auto":
        raise ValueError(f"unknown selection mode {policy.mode!r}")

    groups = [g for g in clusters(corr, policy.threshold) if len(g) >= 2]
    swir = [g for g in groups if any(b in g for b in policy.swir_bands)]
    if not swir:
        raise BandSelectionError(
            f"no correlated SWIR cluster at |rho| >= {policy.threshold}; select the texture band manually")
    cluster = swir[0]
    inside = [corr.band_names.index(b) for b in cluster]
    outside = [i for i in range(len(corr.band_names)) if i not in inside]
    absr = np.abs(corr.values)
    best, best_score = None, np.inf
    for b in cluster:
        if b not in policy.swir_bands or b in policy.embedding_bands:
            continue
        i = corr.band_names.index(b)
        score = absr[i, outside].mean() if outside else 0.0
        if score < best_score:
            best, best_score = b, score
    return BandSelection(best, tuple(policy.embedding_bands), corr.band_names)
