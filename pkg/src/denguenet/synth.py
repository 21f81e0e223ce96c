"""Deterministic synthetic fixture: 12-band scenes with planted clouds/shadows and coupled case counts.

Bands are built from three latent fields (visible B01-B05, red-edge/NIR
B06-B09, SWIR B11-B12) so the band correlation shows three clusters. The
SWIR brightness follows a latent seasonal signal ``s_t``; next week's case
count is linear in ``s_t``:

    cases[t + 1] = case_base + case_gain * s_t + noise

Clouds (bright) and shadows (dark) are 16x16-aligned squares written into
every band. Some weeks get a second, cloudier acquisition so that the
least-cloud-cover selection has something to choose.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .csr import TILE
from .ingestion import (BAND_NAMES, NATIVE_MPP, CaseRecord, MunicipalityRegion, SatelliteScene,
                        format_epiweek, write_cases, write_scene_tiff)

CLUSTERS = {
    "B01": 0, "B02": 0, "B03": 0, "B04": 0, "B05": 0,
    "B06": 1, "B07": 1, "B08": 1, "B8A": 1, "B09": 1,
    "B11": 2, "B12": 2,
}
BAND_LEVEL = {
    "B01": 1200, "B02": 1000, "B03": 1100, "B04": 1000, "B05": 1400, "B06": 2200,
    "B07": 2500, "B08": 2600, "B8A": 2700, "B09": 900, "B11": 2000, "B12": 1500,
}
CLOUD_LEVEL = 9000
SHADOW_LEVEL = 40


@dataclass
class SynthConfig:
    regions: list[MunicipalityRegion]
    start: object  # epiweeks.Week
    n_weeks: int = 60
    size: int = 96
    seed: int = 7
    period: float = 26.0
    swir_gain: float = 0.25
    case_base: float = 60.0
    case_gain: float = 40.0
    case_noise: float = 2.0
    max_clouds: int = 2
    max_shadows: int = 1
    second_acquisition_prob: float = 0.3
    missing_weeks: list = field(default_factory=list)  # week offsets with no acquisition


def latent_signal(n: int, period: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n)
    phase = rng.uniform(0, 2 * np.pi)
    s = 0.75 * np.sin(2 * np.pi * t / period + phase) + 0.25 * np.sin(2 * np.pi * t / (period / 3) + 2 * phase)
    return s / np.abs(s).max()


def _field(rng, size, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return f / f.std()


def _plant(rng, n_tiles, k, exclude):
    """Pick ``k`` distinct tile positions not in ``exclude``."""
    free = [p for p in range(n_tiles * n_tiles) if p not in exclude]
    picks = rng.choice(free, size=min(k, len(free)), replace=False)
    return [divmod(int(p), n_tiles) for p in picks]


def render_scene(region: MunicipalityRegion, week, s: float, terrain: list[np.ndarray], rng: np.random.Generator,
                 cfg: SynthConfig, clouds: list, shadows: list) -> SatelliteScene:
    size = cfg.size
    bands, res = [], []
    for name in BAND_NAMES:
        latent = terrain[CLUSTERS[name]]
        level = BAND_LEVEL[name]
        scale = 1 + cfg.swir_gain * s if CLUSTERS[name] == 2 else 1 + 0.05 * s
        img = level * scale * (1 + 0.15 * latent) + rng.normal(0, 0.02 * level, (size, size))
        for r, c in clouds:
            img[r * TILE:(r + 1) * TILE, c * TILE:(c + 1) * TILE] = CLOUD_LEVEL + rng.normal(0, 200, (TILE, TILE))
        for r, c in shadows:
            img[r * TILE:(r + 1) * TILE, c * TILE:(c + 1) * TILE] = SHADOW_LEVEL + rng.normal(0, 5, (TILE, TILE))
        f = NATIVE_MPP[name] // 10
        img = img[::f, ::f]
        bands.append(np.clip(np.rint(img), 0, 65535).astype(np.uint16))
        res.append(NATIVE_MPP[name])
    cover = 100.0 * len(clouds) * TILE * TILE / (size * size)
    return SatelliteScene(region, week, tuple(bands), tuple(res), BAND_NAMES, None, round(cover, 3))


def generate(cfg: SynthConfig, scene_dir, cases_path) -> dict:
    """Write acquisitions to ``scene_dir/<region>/<date>.tiff`` and the case CSV.

    Returns per-region latent signals and planted tile positions for tests.
    """
    if cfg.size % 96:
        raise ValueError("size must be a multiple of 96 (16 px tiles, 60 m bands)")
    scene_dir = Path(scene_dir)
    rng = np.random.default_rng(cfg.seed)
    n_tiles = cfg.size // TILE
    records, truth = [], {}
    for region in cfg.regions:
        terrain = [_field(rng, cfg.size, sigma) for sigma in (6.0, 4.0, 3.0)]
        signal = latent_signal(cfg.n_weeks + 1, cfg.period, rng)
        planted = {}
        for t in range(cfg.n_weeks):
            week = cfg.start + t
            if t not in cfg.missing_weeks:
                clouds = _plant(rng, n_tiles, int(rng.integers(0, cfg.max_clouds + 1)), set())
                taken = {r * n_tiles + c for r, c in clouds}
                shadows = _plant(rng, n_tiles, int(rng.integers(0, cfg.max_shadows + 1)), taken)
                planted[format_epiweek(week)] = (clouds, shadows)
                days = [int(rng.integers(0, 7))]
                if rng.random() < cfg.second_acquisition_prob:
                    days.append(int((days[0] + 1 + rng.integers(0, 6)) % 7))
                for k, day in enumerate(days):
                    extra = [] if k == 0 else _plant(rng, n_tiles, 3, taken | {r * n_tiles + c for r, c in shadows})
                    scene = render_scene(region, week, signal[t], terrain, rng, cfg, clouds + extra, shadows)
                    date = week.startdate() + dt.timedelta(days=day)
                    scene = SatelliteScene(region, week, scene.bands, scene.resolutions, scene.band_names,
                                           date, scene.cloud_cover)
                    write_scene_tiff(scene_dir / region.key / f"{date.isoformat()}.tiff", scene)
            prev = signal[t - 1] if t > 0 else signal[0]
            cases = cfg.case_base + cfg.case_gain * prev + rng.normal(0, cfg.case_noise)
            records.append(CaseRecord(region.name, week, max(0, int(round(cases)))))
        truth[region.name] = {"signal": signal[:cfg.n_weeks], "planted": planted}
    write_cases(cases_path, records)
    return truth
