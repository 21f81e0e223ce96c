import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denguenet.csr import (TILE, CcsThresholds, CloudShadowRemover, NoiseMask, ThresholdError, build_average_bank,
                           classify_tiles, crop_to_tiles, detect_ccs, fit_thresholds, from_tiles, percentile_sweep,
                           swap_tiles, to_tiles)


def test_thresholds_on_0_to_99():
    th = fit_thresholds([np.arange(100.0).reshape(10, 10)])
    assert th.cloud_threshold == pytest.approx(94.05, abs=1e-12)
    assert th.shadow_threshold == pytest.approx(4.95, abs=1e-12)
    assert th.source_percentiles == (95, 5)


def test_thresholds_pool_all_training_pixels():
    th = fit_thresholds([np.arange(50.0).reshape(5, 10), np.arange(50.0, 100.0).reshape(5, 10)], 90, 10)
    assert th.cloud_threshold == pytest.approx(89.1)
    assert th.shadow_threshold == pytest.approx(9.9)


@pytest.mark.parametrize("p_cloud,p_shadow", [(95, 95), (5, 95), (97, 5), (95, 0)])
def test_invalid_percentiles(p_cloud, p_shadow):
    with pytest.raises(ThresholdError):
        fit_thresholds([np.arange(100.0)], p_cloud, p_shadow)


def test_constant_raster_has_no_valid_thresholds():
    with pytest.raises(ThresholdError):
        fit_thresholds([np.full((16, 16), 7.0)])


def test_masks_are_inclusive_at_threshold():
    th = CcsThresholds(10.0, 2.0)
    m = detect_ccs(np.array([[1.0, 2.0, 3.0, 9.0, 10.0, 11.0]]), th)
    assert m.cloud.tolist() == [[False, False, False, False, True, True]]
    assert m.shadow.tolist() == [[True, True, False, False, False, False]]


@pytest.mark.parametrize("flagged,abnormal", [(129, True), (128, False), (0, False), (256, True)])
def test_strict_majority_rule(flagged, abnormal):
    noise = np.zeros(TILE * TILE, dtype=bool)
    noise[:flagged] = True
    noise = noise.reshape(TILE, TILE)
    grid = classify_tiles(np.zeros((TILE, TILE)), NoiseMask(noise, np.zeros_like(noise)))
    assert bool(grid.abnormal[0, 0]) is abnormal
    assert grid.flagged_counts[0, 0] == flagged


def test_cloud_and_shadow_pixels_both_count():
    cloud = np.zeros((TILE, TILE), dtype=bool)
    shadow = np.zeros((TILE, TILE), dtype=bool)
    cloud[:4] = True  # 64
    shadow[4:9] = True  # 80
    grid = classify_tiles(np.zeros((TILE, TILE)), NoiseMask(cloud, shadow))
    assert grid.flagged_counts[0, 0] == 144 and grid.abnormal[0, 0]


def test_tiling_of_a_736_raster():
    band = np.arange(736 * 736.0).reshape(736, 736)
    tiles = to_tiles(band)
    assert tiles.shape == (46, 46, 16, 16)
    assert np.array_equal(tiles[3, 5], band[48:64, 80:96])
    assert np.array_equal(from_tiles(tiles), band)


def test_centre_crop():
    band = np.arange(40 * 37).reshape(40, 37)
    out = crop_to_tiles(band)
    assert out.shape == (32, 32)
    assert out[0, 0] == band[4, 2]
    with pytest.raises(ValueError):
        to_tiles(band)


def _oracle_bank(rasters, th):
    """Explicit loop: per position, mean of training tiles with at most half their pixels flagged."""
    rows, cols = rasters[0].shape[0] // TILE, rasters[0].shape[1] // TILE
    out = np.full((rows, cols, TILE, TILE), np.nan)
    for r in range(rows):
        for c in range(cols):
            keep = []
            for raster in rasters:
                t = raster[r * TILE:(r + 1) * TILE, c * TILE:(c + 1) * TILE]
                flagged = sum(1 for v in t.ravel() if v >= th.cloud_threshold or v <= th.shadow_threshold)
                if flagged <= 128:
                    keep.append(t)
            if keep:
                out[r, c] = sum(keep) / len(keep)
    return out


def test_bank_matches_explicit_loop(rng):
    rasters = [rng.uniform(100, 200, (48, 32)) for _ in range(4)]
    rasters[0][:16, :16] = 1000
    rasters[1][:16, :16] = 0
    rasters[2][16:32, 16:] = 1000
    th = CcsThresholds(900.0, 50.0)
    bank = build_average_bank(rasters, th)
    assert bank.counts[0, 0] == 2 and bank.counts[1, 1] == 3 and bank.counts[2, 0] == 4
    assert np.allclose(bank.tiles, _oracle_bank(rasters, th), atol=1e-12, equal_nan=True)


def test_bank_position_without_normal_tile(rng):
    rasters = [rng.uniform(100, 200, (32, 32)) for _ in range(2)]
    for r in rasters:
        r[:16, :16] = 5000
    bank = build_average_bank(rasters, CcsThresholds(900.0, 50.0))
    assert not bank.has(0, 0) and np.isnan(bank.tiles[0, 0]).all()
    test = rng.uniform(100, 200, (32, 32))
    test[:16, :16] = 5000
    grid = classify_tiles(test, detect_ccs(test, CcsThresholds(900.0, 50.0)))
    out, report = swap_tiles(test, grid, bank)
    assert report.missing == [(0, 0)] and report.swapped == []
    assert np.array_equal(out, test)


def test_swap_changes_exactly_abnormal_blocks(rng):
    train = [rng.uniform(100, 200, (64, 64)) for _ in range(5)]
    th = CcsThresholds(900.0, 50.0)
    bank = build_average_bank(train, th)
    test = rng.uniform(100, 200, (64, 64))
    test[16:32, 32:48] = 2000
    test[48:64, 0:16] = 0
    grid = classify_tiles(test, detect_ccs(test, th))
    out, report = swap_tiles(test, grid, bank)
    assert sorted(report.swapped) == [(1, 2), (3, 0)]
    changed = to_tiles(out != test).any(axis=(2, 3))
    assert np.array_equal(changed, grid.abnormal)
    assert np.allclose(out[16:32, 32:48], np.mean([t[16:32, 32:48] for t in train], axis=0), atol=1e-12)
    assert out.dtype == np.float64


def test_remover_end_to_end(rng):
    train = [rng.uniform(100, 200, (70, 70)) for _ in range(6)]
    remover = CloudShadowRemover().fit(train)
    raster = rng.uniform(100, 200, (70, 70))
    raster[3:19, 3:19] = 9000  # becomes tile (0, 0) after the 3-pixel centre crop
    out, report = remover.transform(raster)
    assert out.shape == (64, 64)
    assert (0, 0) in report.swapped
    assert np.allclose(out[:16, :16], remover.bank.tiles[0, 0])


def test_percentile_sweep_enumerates_valid_pairs(rng):
    rows = list(percentile_sweep([rng.uniform(0, 1, (32, 32))]))
    assert len(rows) == 19 * 18 // 2
    assert all(s < c for c, s, *_ in rows)
    fracs = {(c, s): f for c, s, _, _, f in rows}
    assert fracs[(95, 5)] <= fracs[(50, 45)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 4), st.integers(1, 4))
def test_swap_invariants(seed, rows, cols):
    rng = np.random.default_rng(seed)
    shape = (rows * TILE, cols * TILE)
    train = [rng.uniform(0, 100, shape) for _ in range(3)]
    th = fit_thresholds(train, 80, 20)
    bank = build_average_bank(train, th)
    test = rng.uniform(0, 100, shape)
    blocks = to_tiles(test)
    for r in range(rows):
        for c in range(cols):
            if rng.random() < 0.4:
                blocks[r, c] = rng.choice([0.0, 1000.0])
    grid = classify_tiles(test, detect_ccs(test, th))
    out, report = swap_tiles(test, grid, bank)
    assert out.shape == test.shape
    assert np.array_equal(to_tiles(out)[~grid.abnormal], to_tiles(test)[~grid.abnormal])
    for r, c in report.swapped:
        assert np.array_equal(to_tiles(out)[r, c], bank.tiles[r, c])
    assert len(report.swapped) + len(report.missing) == grid.n_abnormal
