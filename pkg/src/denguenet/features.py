"""Per-week spatial features.

Texture branch: five first-order statistics and four grey-level
co-occurrence statistics of the cleaned SWIR band.
Embedding branch: a frozen image encoder applied to the cleaned RGB composite.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

FIRST_ORDER = ("mean", "variance", "skewness", "kurtosis", "entropy")
GLCM_FEATURES = ("joint_average", "joint_entropy", "contrast", "correlation")
TEXTURE_FEATURES = FIRST_ORDER + GLCM_FEATURES
HISTOGRAM_BINS = 32

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class EncoderError(RuntimeError):
    pass


@dataclass(frozen=True)
class GlcmSpec:
    n_gray_levels: int = 32
    offsets: tuple[tuple[int, int], ...] = ((0, 1), (1, 0), (1, 1), (1, -1))
    symmetric: bool = True


@dataclass(frozen=True)
class RadiomicsVector:
    mean: float
    variance: float
    skewness: float
    kurtosis: float
    entropy: float
    joint_average: float
    joint_entropy: float
    contrast: float
    correlation: float
    degenerate: frozenset[str] = field(default_factory=frozenset)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in TEXTURE_FEATURES], dtype=np.float64)


# ---------------------------------------------------------------------------
# First order
# ---------------------------------------------------------------------------

def first_order_features(band: np.ndarray, bins: int = HISTOGRAM_BINS) -> tuple[tuple[float, ...], frozenset[str]]:
    """(mean, variance, skewness, kurtosis, entropy) and the names of degenerate outputs.

    Population moments; kurtosis is not excess-corrected. Entropy is in bits
    over an equal-width histogram spanning the band's range.
    """
    # sorted so sums do not depend on pixel order
    x = np.sort(np.asarray(band, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("empty band")
    mean = x.mean()
    d = x - mean
    m2 = np.mean(d * d)
    flags = set()
    if m2 > 0:
        m3 = np.mean(d ** 3)
        m4 = np.mean(d ** 4)
        skew = m3 / m2 ** 1.5
        kurt = m4 / m2 ** 2
    else:
        skew = kurt = 0.0
        flags.update({"skewness", "kurtosis"})
    hist, _ = np.histogram(x, bins=bins, range=(x.min(), x.max()))
    p = hist[hist > 0] / x.size
    entropy = float(-(p * np.log2(p)).sum()) + 0.0
    return (float(mean), float(m2), float(skew), float(kurt), entropy), frozenset(flags)


# ---------------------------------------------------------------------------
# Grey-level co-occurrence
# ---------------------------------------------------------------------------

def quantize(band: np.ndarray, n_levels: int) -> np.ndarray:
    """Equal-width binning over the band's min-max range to levels 1..n_levels."""
    x = np.asarray(band, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.ones(x.shape, dtype=np.int64)
    q = np.floor((x - lo) / (hi - lo) * n_levels).astype(np.int64)
    return np.clip(q, 0, n_levels - 1) + 1


def cooccurrence(levels: np.ndarray, offset: tuple[int, int], n_levels: int, symmetric: bool = True) -> np.ndarray:
    """Normalised co-occurrence matrix; entry [i-1, j-1] is P(i, j). Zero matrix when no pairs fit."""
    dr, dc = offset
    h, w = levels.shape
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    if r1 <= r0 or c1 <= c0:
        return np.zeros((n_levels, n_levels))
    a = levels[r0:r1, c0:c1] - 1
    b = levels[r0 + dr:r1 + dr, c0 + dc:c1 + dc] - 1
    counts = np.bincount((a * n_levels + b).ravel(), minlength=n_levels * n_levels)
    p = counts.reshape(n_levels, n_levels).astype(np.float64)
    if symmetric:
        p = p + p.T
    return p / p.sum()


def _glcm_stats(p: np.ndarray) -> tuple[float, float, float, float, bool]:
    n = p.shape[0]
    i, j = np.meshgrid(np.arange(1, n + 1), np.arange(1, n + 1), indexing="ij")
    mu_i, mu_j = (i * p).sum(), (j * p).sum()
    var_i, var_j = ((i - mu_i) ** 2 * p).sum(), ((j - mu_j) ** 2 * p).sum()
    nz = p[p > 0]
    joint_entropy = float(-(nz * np.log2(nz)).sum()) + 0.0
    contrast = float(((i - j) ** 2 * p).sum())
    if var_i > 0 and var_j > 0:
        corr = float(((i - mu_i) * (j - mu_j) * p).sum() / np.sqrt(var_i * var_j))
        corr = min(1.0, max(-1.0, corr))
        degenerate = False
    else:
        corr, degenerate = 0.0, True
    return float(mu_i), joint_entropy, contrast, corr, degenerate


def glcm_features(band: np.ndarray, spec: GlcmSpec = GlcmSpec()) -> tuple[tuple[float, ...], frozenset[str]]:
    """(joint_average, joint_entropy, contrast, correlation) averaged over the offsets.

    Offsets that do not fit inside the band are skipped. Correlation of a
    single-level matrix is reported as 0 and flagged.
    """
    levels = quantize(band, spec.n_gray_levels)
    rows, flags = [], set()
    for off in spec.offsets:
        p = cooccurrence(levels, off, spec.n_gray_levels, spec.symmetric)
        if p.sum() == 0:
            continue
        *vals, degenerate = _glcm_stats(p)
        if degenerate:
            flags.add("correlation")
        rows.append(vals)
    if not rows:
        raise ValueError(f"band {np.shape(band)} too small for any offset in {spec.offsets}")
    return tuple(float(v) for v in np.mean(rows, axis=0)), frozenset(flags)


def extract_texture(band: np.ndarray, spec: GlcmSpec = GlcmSpec()) -> RadiomicsVector:
    fo, f1 = first_order_features(band)
    gl, f2 = glcm_features(band, spec)
    return RadiomicsVector(*fo, *gl, degenerate=f1 | f2)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

def _torch():
    import torch
    return torch


class PatchPoolEncoder:
    """Parameter-free stand-in encoder: per-channel mean and std on a ``grid x grid`` patch layout.

    Deterministic and dependency-light, it lets the full pipeline run offline
    where pretrained transformer weights are unavailable. It is not a
    substitute for the pretrained encoder in real experiments.
    """

    mean = IMAGENET_MEAN
    std = IMAGENET_STD
    input_size = 224

    def __init__(self, grid: int = 4):
        if self.input_size % grid:
            raise ValueError("grid must divide 224")
        self.grid = grid
        self.dim = 2 * 3 * grid * grid
        self.identity = f"patch-pool-{grid}"

    def __call__(self, x):
        torch = _torch()
        n = x.shape[0]
        g, s = self.grid, self.input_size // self.grid
        patches = x.reshape(n, 3, g, s, g, s)
        mean = patches.mean(dim=(3, 5))
        std = patches.std(dim=(3, 5), unbiased=False)
        return torch.cat([mean.reshape(n, -1), std.reshape(n, -1)], dim=1)


class ViTEncoder:
    """Frozen torchvision vision transformer with the classification head removed.

    Output is the class-token representation (``hidden_dim`` values).
    """

    mean = IMAGENET_MEAN
    std = IMAGENET_STD

    def __init__(self, model, identity: str):
        torch = _torch()
        model.heads = torch.nn.Identity()
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        self.dim = int(model.hidden_dim)
        self.input_size = int(model.image_size)
        self.identity = identity

    @classmethod
    def from_weights(cls, weights_path, arch: str = "vit_b_16", **arch_kwargs) -> "ViTEncoder":
        """Load ImageNet weights saved as a torchvision state dict; never falls back to random init.

        ``arch`` names a torchvision builder (``vit_b_16``, ``vit_l_16``...) or
        is ``"vit"`` for a plain ``VisionTransformer(**arch_kwargs)``.
        """
        path = Path(weights_path) if weights_path else None
        if path is None or not path.is_file():
            raise EncoderError(f"encoder weights not found: {weights_path}")
        torch = _torch()
        from torchvision import models

        if arch == "vit":
            model = models.VisionTransformer(**arch_kwargs)
        else:
            model = getattr(models, arch)(weights=None, **arch_kwargs)
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("heads.")}
        try:
            missing, unexpected = model.load_state_dict(state, strict=False)
        except RuntimeError as exc:
            raise EncoderError(f"weights do not match {arch}: {str(exc).splitlines()[0]}") from exc
        missing = [k for k in missing if not k.startswith("heads.")]
        if missing or unexpected:
            raise EncoderError(f"weights do not match {arch}: missing={missing[:3]} unexpected={unexpected[:3]}")
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:12]
        return cls(model, f"{arch}:{digest}")

    def __call__(self, x):
        return self.model(x)


def scale_per_scene(rgb: np.ndarray) -> np.ndarray:
    """Min-max scale all channels jointly to [0, 1]."""
    x = np.asarray(rgb, dtype=np.float32)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def embed_rgb(rgb: np.ndarray, encoder) -> np.ndarray:
    """Embedding of a (3, H, W) R,G,B raster.

    Scaled per scene to [0, 1], bilinearly resized to the encoder's input
    size, normalised with the encoder's channel mean/std.
    """
    torch = _torch()
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) raster, got {rgb.shape}")
    x = torch.from_numpy(scale_per_scene(rgb))[None]
    size = encoder.input_size
    with torch.no_grad():
        if x.shape[-2:] != (size, size):
            x = torch.nn.functional.interpolate(x, size=(size, size), mode="bilinear",
                                                align_corners=False, antialias=True)
        mean = torch.tensor(encoder.mean, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(encoder.std, dtype=x.dtype).view(1, 3, 1, 1)
        out = encoder((x - mean) / std)
    out = out[0].detach().cpu().numpy().astype(np.float32)
    if out.shape != (encoder.dim,) or not np.isfinite(out).all():
        raise EncoderError(f"encoder produced invalid output of shape {out.shape}")
    return out


def load_encoder(kind: str, weights: str | None = None, arch: str = "vit_b_16", grid: int = 4, **arch_kwargs):
    if kind == "vit":
        return ViTEncoder.from_weights(weights, arch, **arch_kwargs)
    if kind == "patch-pool":
        return PatchPoolEncoder(grid)
    raise EncoderError(f"unknown encoder kind {kind!r}")


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def write_texture_csv(path, rows: Sequence[tuple[str, str, RadiomicsVector]]) -> Path:
    """Rows of (epiweek label, csr flag "on"/"off", vector)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epiweek", "csr", *TEXTURE_FEATURES, "degenerate"])
        for week, csr, vec in rows:
            w.writerow([week, csr, *(_fmt(v) for v in vec.as_array()), ";".join(sorted(vec.degenerate))])
    return path


def read_texture_csv(path) -> dict[tuple[str, str], RadiomicsVector]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            flags = frozenset(f for f in row["degenerate"].split(";") if f)
            vec = RadiomicsVector(*(float(row[n]) for n in TEXTURE_FEATURES), degenerate=flags)
            out[(row["epiweek"], row["csr"])] = vec
    return out


def write_embeddings(directory, region_key: str, csr: str, weeks: Sequence[str], vectors: np.ndarray,
                     encoder_identity: str) -> Path:
    """``<dir>/<region>-embeddings-csr-<on|off>.npy`` plus a JSON manifest next to it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vectors = np.asarray(vectors, dtype=np.float32)
    stem = f"{region_key}-embeddings-csr-{csr}"
    np.save(directory / f"{stem}.npy", vectors)
    manifest = {"dim": int(vectors.shape[1]), "encoder": encoder_identity, "weeks": list(weeks)}
    (directory / f"{stem}.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return directory / f"{stem}.npy"


def read_embeddings(directory, region_key: str, csr: str) -> tuple[list[str], np.ndarray, dict]:
    directory = Path(directory)
    stem = f"{region_key}-embeddings-csr-{csr}"
    manifest = json.loads((directory / f"{stem}.json").read_text())
    vectors = np.load(directory / f"{stem}.npy")
    if vectors.shape != (len(manifest["weeks"]), manifest["dim"]):
        raise ValueError(f"{stem}: array shape {vectors.shape} disagrees with manifest")
    return manifest["weeks"], vectors, manifest
