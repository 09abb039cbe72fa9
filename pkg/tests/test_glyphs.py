import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphzero import glyphs as G
from glyphzero.glyphs import CharacterSpec, GlyphImage


@pytest.fixture(scope="module")
def atlas40():
    return G.build_radical_atlas(40, 8, seed=0)


@pytest.fixture(scope="module")
def chars600(atlas40):
    return G.enumerate_characters(atlas40, 600, seed=3)


# -- atlas


def test_atlas_is_deterministic():
    a = G.build_radical_atlas(2, 8, seed=7)
    b = G.build_radical_atlas(2, 8, seed=7)
    assert a.bitmaps.tobytes() == b.bitmaps.tobytes()


def test_atlas_pairwise_hamming_and_coverage():
    atlas = G.build_radical_atlas(40, 12, seed=1)
    assert atlas.bitmaps.shape == (40, 12, 12)
    bits = [b.astype(int).ravel().tolist() for b in atlas.bitmaps]
    worst = min(sum(x != y for x, y in zip(p, q)) for p, q in itertools.combinations(bits, 2))
    assert worst >= 15
    for b in bits:
        assert 0.15 <= sum(b) / 144 <= 0.60


@pytest.mark.parametrize("n,cell", [(1, 8), (40, 7)])
def test_atlas_preconditions(n, cell):
    with pytest.raises(ValueError):
        G.build_radical_atlas(n, cell, seed=0)


# -- characters


def test_enumerate_exhaustive_small_capacity():
    atlas = G.build_radical_atlas(2, 8, seed=0)
    chars = G.enumerate_characters(atlas, 4, seed=0, layouts=("left-right",))
    assert sorted(c.radicals for c in chars) == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_enumerate_rejects_over_capacity():
    atlas = G.build_radical_atlas(2, 8, seed=0)
    with pytest.raises(ValueError, match="capacity is 4"):
        G.enumerate_characters(atlas, 5, seed=0, layouts=("left-right",))


def test_enumerate_unique_balanced_deterministic(atlas40, chars600):
    again = G.enumerate_characters(atlas40, 600, seed=3)
    assert chars600 == again
    assert len({(c.layout, c.radicals) for c in chars600}) == 600
    freq = np.bincount([r for c in chars600 for r in c.radicals], minlength=40)
    assert freq.min() > 0 and freq.max() / freq.min() <= 3
    assert all(0 <= r < 40 for c in chars600 for r in c.radicals)


# -- labels


def test_labels_examples():
    np.testing.assert_array_equal(G.make_labels(CharacterSpec(0, "left-right", (3, 3)), 5).radical_counts, [0, 0, 0, 2, 0])
    np.testing.assert_array_equal(G.make_labels(CharacterSpec(1, "single", (0,)), 4).radical_counts, [1, 0, 0, 0])


def test_labels_sum_to_arity_and_reconstruct_multiset(chars600):
    for c in chars600:
        counts = G.make_labels(c, 40).radical_counts
        assert counts.sum() == G.ARITY[c.layout]
        rebuilt = sorted(k for k, n in enumerate(counts) for _ in range(n))
        assert rebuilt == sorted(c.radicals)


def test_spec_rejects_wrong_arity():
    with pytest.raises(ValueError, match="takes 2 radicals"):
        CharacterSpec(0, "left-right", (1,))


# -- rendering


def test_single_radical_canonical_is_centred():
    atlas = G.build_radical_atlas(4, 12, seed=2)
    img = G.render_glyph(CharacterSpec(0, "single", (1,)), atlas, "canonical", size=32).pixels
    expected = np.zeros((32, 32), np.float32)
    expected[10:22, 10:22] = atlas.bitmaps[1]
    np.testing.assert_array_equal(img, expected)


@pytest.mark.parametrize("style", G.STYLES)
def test_render_is_deterministic(atlas40, style):
    spec = CharacterSpec(5, "top-middle-bottom", (1, 2, 3))
    a = G.render_glyph(spec, atlas40, style, seed=11).pixels
    b = G.render_glyph(spec, atlas40, style, seed=11).pixels
    assert a.tobytes() == b.tobytes()
    assert a.shape == (32, 32) and a.min() >= 0 and a.max() <= 1


def test_left_right_ink_centroids_fall_in_their_halves(atlas40):
    spec = CharacterSpec(0, "left-right", (4, 9))
    img = G.render_glyph(spec, atlas40, "canonical").pixels
    cols = np.arange(32)
    for half, lo, hi in ((img[:, :16], 0, 16), (img[:, 16:], 16, 32)):
        mass = half.sum()
        assert mass > 0
        centroid = (half.sum(axis=0) * cols[lo:hi]).sum() / mass
        assert lo <= centroid < hi
    # each half carries exactly its own radical's ink
    assert img[:, :16].sum() == atlas40.bitmaps[4].sum()
    assert img[:, 16:].sum() == atlas40.bitmaps[9].sum()


def test_variant_differs_but_keeps_contrast_bounds(atlas40):
    spec = CharacterSpec(3, "left-right", (0, 1))
    canon = G.render_glyph(spec, atlas40, "canonical").pixels
    var = G.render_glyph(spec, atlas40, "variant").pixels
    assert not np.array_equal(canon, var)
    ink = var[var > 0]
    assert np.allclose(ink, ink[0]) and 0.8 <= ink[0] <= 1.0


def test_render_rejects_bad_radical_and_small_canvas(atlas40):
    with pytest.raises(ValueError, match="out of range"):
        G.render_glyph(CharacterSpec(0, "single", (40,)), atlas40)
    with pytest.raises(ValueError, match="too small"):
        G.render_glyph(CharacterSpec(0, "left-right", (0, 1)), atlas40, size=12)
    with pytest.raises(ValueError, match="unknown style"):
        G.render_glyph(CharacterSpec(0, "single", (0,)), atlas40, "italic")


# -- augmentation


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_identity_augmentation_is_bit_exact(seed):
    pixels = np.random.default_rng(seed).random((32, 32)).astype(np.float32)
    out = G.augment(GlyphImage(pixels, "variant", 0), 0.0, (0.0, 0.0), seed=seed)
    assert out.pixels.tobytes() == pixels.tobytes()


@pytest.mark.parametrize("angle", [15.0, 30.0, 45.0])
def test_rotation_leaves_centred_disk_unchanged(angle):
    yy, xx = np.mgrid[:32, :32]
    r = np.hypot(yy - 15.5, xx - 15.5)
    # smooth radial profile: bilinear resampling error of a hard edge exceeds the tolerance
    disk = np.exp(-(r**2) / 50.0).astype(np.float32)
    out = G.augment(GlyphImage(disk, "variant", 0), 0.0, (-angle, angle), seed=1)
    assert abs(out.rotation_deg) <= angle
    assert np.abs(out.pixels - disk).max() <= 1e-2


def test_blur_of_point_matches_discrete_gaussian():
    img = np.zeros((15, 15), np.float32)
    img[7, 7] = 1.0
    out = G.augment(GlyphImage(img, "variant", 0), 0.5, (0.0, 0.0)).pixels
    sigma, radius = 0.5, 2  # scipy truncates at 4 sigma
    taps = np.exp(-(np.arange(-radius, radius + 1) ** 2) / (2 * sigma**2))
    taps /= taps.sum()
    expected = np.zeros((15, 15))
    expected[5:10, 5:10] = np.outer(taps, taps)
    np.testing.assert_allclose(out, expected, atol=1e-6)
    assert abs(out.sum() - 1.0) <= 1e-3


def test_augment_preconditions():
    img = GlyphImage(np.zeros((32, 32), np.float32), "variant", 0)
    with pytest.raises(ValueError, match="blur_sigma"):
        G.augment(img, -1.0)
    with pytest.raises(ValueError, match="symmetric"):
        G.augment(img, 0.0, (-10.0, 20.0))


# -- splits


def _uncovered_test_radicals(chars, split):
    by_id = {c.char_id: c for c in chars}
    seen = {r for i in split.train_ids for r in by_id[i].radicals}
    return [i for i in split.test_ids if any(r not in seen for r in by_id[i].radicals)]


def test_radical_covered_split(chars600):
    split = G.split_dataset(chars600, 200, 50, 350, "radical-covered", seed=0)
    assert (len(split.train_ids), len(split.val_ids), len(split.test_ids)) == (200, 50, 350)
    assert not set(split.train_ids) & set(split.test_ids)
    assert not set(split.val_ids) & (set(split.train_ids) | set(split.test_ids))
    assert _uncovered_test_radicals(chars600, split) == []
    assert split == G.split_dataset(chars600, 200, 50, 350, "radical-covered", seed=0)


def test_radical_open_split(chars600):
    split = G.split_dataset(chars600, 200, 50, 350, "radical-open", seed=0)
    assert len(_uncovered_test_radicals(chars600, split)) >= 35


def test_split_rejects_oversized_request(chars600):
    with pytest.raises(ValueError, match="exceeds"):
        G.split_dataset(chars600, 300, 100, 201)


def test_covered_split_infeasible_names_radicals():
    chars = [CharacterSpec(0, "single", (0,)), CharacterSpec(1, "single", (1,)), CharacterSpec(2, "single", (2,))]
    with pytest.raises(ValueError, match=r"radicals \[\d\]"):
        G.split_dataset(chars, 2, 0, 1, "radical-covered", seed=0)


def test_test_set_is_fixed_across_train_sizes(chars600):
    tests = {n: G.split_dataset(chars600, n, 50, 150, seed=4).test_ids for n in (100, 200, 400)}
    assert tests[100] == tests[200] == tests[400]


# -- on-disk datasets


@pytest.fixture(scope="module")
def tiny():
    return G.make_dataset(n_radicals=4, n_chars=3, cell_px=8, seed=2)


def test_dataset_round_trip(tiny, tmp_path):
    G.write_dataset(tiny, tmp_path / "ds")
    chars, images, labels = G.load_external_dataset(tmp_path / "ds")
    assert chars == tiny.chars
    np.testing.assert_array_equal(labels, tiny.labels)
    for style in G.STYLES:
        np.testing.assert_allclose(images[style], tiny.images[style], atol=1 / 255)


def test_manifest_regeneration_is_byte_identical(tiny, tmp_path):
    G.write_dataset(tiny, tmp_path / "a")
    again = G.make_dataset(n_radicals=4, n_chars=3, cell_px=8, seed=2)
    G.write_dataset(again, tmp_path / "b")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_write_refuses_non_empty_dir_without_force(tiny, tmp_path):
    G.write_dataset(tiny, tmp_path / "ds")
    with pytest.raises(FileExistsError):
        G.write_dataset(tiny, tmp_path / "ds")
    G.write_dataset(tiny, tmp_path / "ds", force=True)


def test_missing_manifest_is_reported(tmp_path):
    with pytest.raises(G.DatasetError, match="manifest"):
        G.load_external_dataset(tmp_path)


def test_wrong_image_size_names_file(tiny, tmp_path):
    root = G.write_dataset(tiny, tmp_path / "ds")
    from PIL import Image

    bad = root / "images" / "variant" / f"{tiny.chars[1].char_id}.pgm"
    Image.fromarray(np.zeros((16, 16), np.uint8), mode="L").save(bad)
    with pytest.raises(G.DatasetError, match=f"{tiny.chars[1].char_id}.pgm"):
        G.load_external_dataset(root)


def test_label_length_mismatch_names_both_numbers(tiny, tmp_path):
    root = G.write_dataset(tiny, tmp_path / "ds")
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["characters"][0]["radical_counts"].append(0)
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(G.DatasetError, match="5 radical counts.*4 radicals"):
        G.load_external_dataset(root)


def test_unknown_radical_is_rejected(tiny, tmp_path):
    root = G.write_dataset(tiny, tmp_path / "ds")
    manifest = json.loads((root / "manifest.json").read_text())
    manifest["characters"][0]["radicals"][0] = 99
    (root / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(G.DatasetError, match="unknown radical"):
        G.load_external_dataset(root)
