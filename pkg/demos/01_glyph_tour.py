"""
A tour of the synthetic glyph world
===================================

Radicals are small random stroke bitmaps. Characters place one to four of
them in a 3x3 slot grid. Each character can be drawn canonically, as a
variant (thicker or thinner strokes, jitter, contrast) or in the harder
complex style (variant plus shear and dropped pixels).
"""

# %%
import numpy as np

from glyphzero import glyphs as G

ds = G.make_dataset(n_radicals=12, n_chars=40, seed=3)
print(len(ds.chars), "characters over", ds.n_radicals, "radicals")

# %%
# Radical composition of the first few characters
for spec in ds.chars[:5]:
    print(spec.char_id, spec.layout, spec.radicals, "radicals present:", np.flatnonzero(ds.counts([spec.char_id])[0]))


# %%
def ascii_art(img, threshold=0.5):
    return "\n".join("".join("#" if v > threshold else "." for v in row) for row in img)


cid = ds.char_ids[0]
for style in ("canonical", "variant", "complex"):
    print(f"--- {style}")
    print(ascii_art(ds.glyphs(style, [cid])[0]))

# %%
# A split that keeps every test radical visible during training
split = G.split_dataset(ds.chars, train_n=20, val_n=5, test_n=15, seed=0)
seen = {r for c in ds.chars if c.char_id in split.train_ids for r in c.radicals}
unseen = {r for c in ds.chars if c.char_id in split.test_ids for r in c.radicals}
print("test radicals covered by training:", unseen <= seen)

# %%
# Rotation and blur are query-time augmentations
img = ds.glyphs("variant", [cid])
aug = G.augment(G.GlyphImage(img[0], "variant", int(cid)), blur_sigma=0.5, rotation_range=(-45, 45), seed=1)
print(ascii_art(aug.pixels))
print("ink before / after:", np.round(img[0].sum(), 1), np.round(aug.pixels.sum(), 1))
