"""
Texture features of a SWIR band
===============================

Nine numbers per week: five first-order statistics of the pixel values and
four grey-level co-occurrence statistics averaged over four directions.
"""
import numpy as np

from denguenet.features import (TEXTURE_FEATURES, GlcmSpec, PatchPoolEncoder, cooccurrence, embed_rgb,
                                extract_texture, quantize)

rng = np.random.default_rng(1)

smooth = np.add.outer(np.arange(64.0), np.arange(64.0))
noisy = smooth + rng.normal(0, 40, smooth.shape)
board = (np.indices((64, 64)).sum(axis=0) % 2) * 1000.0

print(f"{'feature':>14} {'smooth':>10} {'noisy':>10} {'board':>10}")
vecs = [extract_texture(b) for b in (smooth, noisy, board)]
for name in TEXTURE_FEATURES:
    print(f"{name:>14}", *(f"{getattr(v, name):10.3f}" for v in vecs))

# A two-level checkerboard seen horizontally only ever pairs unlike levels.
p = cooccurrence(quantize(board, 2), (0, 1), 2)
print("horizontal co-occurrence of the board:\n", p)

# Constant bands have no defined correlation; it is reported as 0 and flagged.
print("constant band flags:", sorted(extract_texture(np.full((16, 16), 7.0)).degenerate))

# Embedding branch: the RGB composite goes through a frozen encoder. The
# patch-pool stand-in needs no weights and gives 96 numbers for a 4x4 grid.
rgb = np.stack([noisy, smooth, noisy.T])
print("embedding length:", embed_rgb(rgb, PatchPoolEncoder(grid=4)).shape[0])
print("GLCM defaults:", GlcmSpec())
