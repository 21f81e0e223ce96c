import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denguenet.features import (TEXTURE_FEATURES, EncoderError, GlcmSpec, PatchPoolEncoder, RadiomicsVector,
                                ViTEncoder, cooccurrence, embed_rgb, extract_texture, first_order_features,
                                glcm_features, load_encoder, quantize, read_embeddings, read_texture_csv,
                                write_embeddings, write_texture_csv)

TINY_VIT = dict(image_size=32, patch_size=8, num_layers=2, num_heads=2, hidden_dim=16, mlp_dim=32)


def test_first_order_on_two_values():
    (mean, var, skew, kurt, ent), flags = first_order_features(np.array([[0, 0], [1, 1]]))
    assert (mean, var, skew, kurt, ent) == (0.5, 0.25, 0.0, 1.0, 1.0)
    assert flags == frozenset()


def test_first_order_matches_scipy(rng):
    from scipy import stats

    x = rng.gamma(2.0, 3.0, (20, 20))
    (mean, var, skew, kurt, _), _ = first_order_features(x)
    assert mean == pytest.approx(x.mean(), rel=1e-12)
    assert var == pytest.approx(x.var(), rel=1e-12)
    assert skew == pytest.approx(stats.skew(x.ravel()), rel=1e-10)
    assert kurt == pytest.approx(stats.kurtosis(x.ravel(), fisher=False), rel=1e-10)


def test_constant_band_is_flagged_not_nan():
    vec = extract_texture(np.full((8, 8), 3.0))
    arr = vec.as_array()
    assert np.isfinite(arr).all()
    assert vec.mean == 3.0 and vec.variance == 0.0 and vec.entropy == 0.0
    assert vec.joint_entropy == 0.0 and vec.contrast == 0.0 and vec.joint_average == 1.0
    assert vec.degenerate == frozenset({"skewness", "kurtosis", "correlation"})


def test_quantize_endpoints():
    q = quantize(np.array([0.0, 0.5, 1.0, 0.999]), 4)
    assert q.tolist() == [1, 3, 4, 4]
    assert quantize(np.full((2, 2), 5.0), 8).tolist() == [[1, 1], [1, 1]]


def test_glcm_hand_example():
    # levels [[1,1],[2,2]]: horizontal pairs stay on the diagonal, all others cross it
    (avg, ent, con, cor), flags = glcm_features(np.array([[0.0, 0.0], [1.0, 1.0]]), GlcmSpec(n_gray_levels=2))
    assert avg == pytest.approx(1.5)
    assert ent == pytest.approx(1.0)
    assert con == pytest.approx(0.75)
    assert cor == pytest.approx(-0.5)
    assert flags == frozenset()


def _glcm_oracle(band, n_levels, offsets):
    """Pair enumeration with plain Python loops."""
    x = [[float(v) for v in row] for row in band]
    lo = min(min(r) for r in x)
    hi = max(max(r) for r in x)
    lev = [[min(int(math.floor((v - lo) / (hi - lo) * n_levels)), n_levels - 1) + 1 for v in row] for row in x]
    h, w = len(lev), len(lev[0])
    per_offset = []
    for dr, dc in offsets:
        counts = {}
        for r in range(h):
            for c in range(w):
                r2, c2 = r + dr, c + dc
                if 0 <= r2 < h and 0 <= c2 < w:
                    for pair in ((lev[r][c], lev[r2][c2]), (lev[r2][c2], lev[r][c])):
                        counts[pair] = counts.get(pair, 0) + 1
        total = sum(counts.values())
        p = {k: v / total for k, v in counts.items()}
        mu_i = sum(i * v for (i, _), v in p.items())
        mu_j = sum(j * v for (_, j), v in p.items())
        var_i = sum((i - mu_i) ** 2 * v for (i, _), v in p.items())
        var_j = sum((j - mu_j) ** 2 * v for (_, j), v in p.items())
        ent = -sum(v * math.log2(v) for v in p.values())
        con = sum((i - j) ** 2 * v for (i, j), v in p.items())
        cov = sum((i - mu_i) * (j - mu_j) * v for (i, j), v in p.items())
        cor = cov / math.sqrt(var_i * var_j) if var_i > 0 and var_j > 0 else 0.0
        per_offset.append((mu_i, ent, con, cor))
    return [sum(col) / len(col) for col in zip(*per_offset)]


@pytest.mark.parametrize("seed", range(5))
def test_glcm_matches_pair_enumeration(seed):
    band = np.random.default_rng(seed).uniform(0, 1000, (8, 8))
    spec = GlcmSpec()
    got, _ = glcm_features(band, spec)
    assert np.allclose(got, _glcm_oracle(band, spec.n_gray_levels, spec.offsets), rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12), st.integers(2, 12), st.integers(2, 32))
def test_glcm_invariants(seed, h, w, n_levels):
    band = np.random.default_rng(seed).integers(0, 50, (h, w)).astype(float)
    levels = quantize(band, n_levels)
    assert levels.min() >= 1 and levels.max() <= n_levels
    for off in GlcmSpec().offsets:
        p = cooccurrence(levels, off, n_levels)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.allclose(p, p.T) and (p >= 0).all()
    (avg, ent, con, cor), _ = glcm_features(band, GlcmSpec(n_gray_levels=n_levels))
    assert 1 <= avg <= n_levels and ent >= 0 and con >= 0 and -1 <= cor <= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.25, 0.5, 2.0, 8.0]), st.integers(-500, 500))
def test_glcm_is_affine_invariant(seed, scale, shift):
    # exact scales only: arbitrary ones can move a value that sits on a bin edge
    band = np.random.default_rng(seed).integers(0, 40, (10, 10)).astype(float)
    a, _ = glcm_features(band)
    b, _ = glcm_features(band * scale + shift)
    assert a == b


def test_texture_vector_order():
    vec = extract_texture(np.arange(64.0).reshape(8, 8))
    assert [getattr(vec, n) for n in TEXTURE_FEATURES] == vec.as_array().tolist()


def test_texture_csv_roundtrip(tmp_path, rng):
    rows = [("2017-W10", "on", extract_texture(rng.normal(size=(8, 8)))),
            ("2017-W11", "off", extract_texture(np.zeros((8, 8))))]
    path = write_texture_csv(tmp_path / "t.csv", rows)
    back = read_texture_csv(path)
    assert back[("2017-W10", "on")] == rows[0][2]
    assert back[("2017-W11", "off")].degenerate == rows[1][2].degenerate


# -- embeddings ---------------------------------------------------------------

def test_patch_pool_embedding_is_deterministic(rng):
    rgb = rng.integers(0, 5000, (3, 64, 64)).astype(np.uint16)
    enc = PatchPoolEncoder()
    a, b = embed_rgb(rgb, enc), embed_rgb(rgb.copy(), enc)
    assert a.shape == (96,) and a.dtype == np.float32
    assert np.array_equal(a, b)


def test_embedding_rejects_wrong_layout(rng):
    with pytest.raises(ValueError):
        embed_rgb(rng.normal(size=(64, 64, 3)), PatchPoolEncoder())


def test_vit_loads_weights_and_is_frozen(tiny_vit_weights, rng):
    enc = ViTEncoder.from_weights(tiny_vit_weights, "vit", **TINY_VIT)
    assert enc.dim == 16 and enc.input_size == 32
    assert not any(p.requires_grad for p in enc.model.parameters())
    assert enc.identity.startswith("vit:")
    rgb = rng.integers(0, 5000, (3, 48, 48)).astype(np.uint16)
    a, b = embed_rgb(rgb, enc), embed_rgb(rgb, enc)
    assert a.shape == (16,) and np.array_equal(a, b)


def test_vit_separates_dark_from_bright(tiny_vit_weights):
    enc = load_encoder("vit", str(tiny_vit_weights), "vit", **TINY_VIT)
    ramp = np.linspace(0, 1, 48 * 48).reshape(48, 48)
    black = np.stack([ramp * 100, ramp * 100, ramp * 100])
    white = np.stack([ramp * 0 + 9000, ramp * 50 + 9000, ramp * 0 + 9100])
    a, b = embed_rgb(black, enc), embed_rgb(white, enc)
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert cos < 0.999


def test_vit_missing_weights_is_error(tmp_path):
    with pytest.raises(EncoderError):
        ViTEncoder.from_weights(tmp_path / "absent.pth")
    with pytest.raises(EncoderError):
        load_encoder("vit", None)
    with pytest.raises(EncoderError):
        load_encoder("clip")


def test_vit_rejects_mismatched_weights(tiny_vit_weights):
    with pytest.raises(EncoderError):
        ViTEncoder.from_weights(tiny_vit_weights, "vit", **{**TINY_VIT, "hidden_dim": 8, "mlp_dim": 16})


def test_embedding_cache_roundtrip(tmp_path, rng):
    vecs = rng.normal(size=(3, 96)).astype(np.float32)
    weeks = ["2017-W10", "2017-W11", "2017-W12"]
    write_embeddings(tmp_path, "ibague", "on", weeks, vecs, "patch-pool-4")
    got_weeks, got, meta = read_embeddings(tmp_path, "ibague", "on")
    assert got_weeks == weeks and np.array_equal(got, vecs)
    assert meta["dim"] == 96 and meta["encoder"] == "patch-pool-4"
    assert (tmp_path / "ibague-embeddings-csr-on.npy").exists()


def test_radiomics_vector_is_hashable_value():
    v = RadiomicsVector(*range(9))
    assert v == RadiomicsVector(*range(9)) and v.degenerate == frozenset()


def test_checkerboard_horizontal_two_levels():
    board = np.indices((8, 8)).sum(axis=0) % 2
    spec = GlcmSpec(n_gray_levels=2, offsets=((0, 1),))
    p = cooccurrence(quantize(board, 2), (0, 1), 2)
    assert p.tolist() == [[0.0, 0.5], [0.5, 0.0]]
    (_, _, con, cor), _ = glcm_features(board, spec)
    assert con == 1.0 and cor == -1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_first_order_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    band = rng.integers(0, 500, (9, 7)).astype(float)
    shuffled = rng.permutation(band.ravel()).reshape(7, 9)
    assert first_order_features(band) == first_order_features(shuffled)
