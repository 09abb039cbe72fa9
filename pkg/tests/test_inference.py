import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glyphzero import glyphs as G
from glyphzero import inference as I
from glyphzero.network import ModelConfig, build_model


def bank_of(rows, ids=None):
    rows = np.asarray(rows, dtype=np.float32)
    ids = np.arange(len(rows)) if ids is None else np.asarray(ids)
    return I.EmbeddingBank(ids, rows, (rows.shape[1],))


def brute_force(bank_rows, bank_ids, query):
    best, best_id = None, None
    for row, cid in zip(bank_rows, bank_ids):
        d = 0.0
        for a, b in zip(row, query):
            d += abs(float(a) - float(b))
        if best is None or d < best or (d == best and cid < best_id):
            best, best_id = d, cid
    return best_id


def test_three_entry_hand_example():
    bank = bank_of([[0, 0], [1, 1], [5, 5]])
    # D = 2.1, 0.3, 7.9
    assert I.classify_embeddings(bank, np.array([[0.9, 1.2]]))[0] == 1


def test_exact_match_and_single_entry():
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((6, 8))
    bank = bank_of(rows, ids=[3, 9, 12, 40, 41, 77])
    assert I.classify_embeddings(bank, rows[[4]])[0] == 41
    lone = bank_of(rows[:1], ids=[5])
    assert list(I.classify_embeddings(lone, rng.standard_normal((3, 8)))) == [5, 5, 5]


def test_ties_go_to_lowest_char_id():
    row = np.ones(4)
    bank = bank_of([row, row, row], ids=[30, 7, 12])
    assert I.classify_embeddings(bank, row[None])[0] == 7


def test_empty_bank_rejected():
    with pytest.raises(ValueError, match="empty"):
        bank_of(np.zeros((0, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_search_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 12)), int(rng.integers(1, 6))
    # small integer grid makes exact ties common
    rows = rng.integers(-2, 3, size=(n, d)).astype(np.float32)
    ids = rng.permutation(100)[:n]
    bank = bank_of(rows, ids)
    queries = rng.integers(-2, 3, size=(5, d)).astype(np.float32)
    got = I.classify_embeddings(bank, queries)
    assert list(got) == [brute_force(rows, ids, q) for q in queries]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_argmin_invariant_to_distance_scaling(seed, factor):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((9, 5))
    queries = rng.standard_normal((4, 5))
    base = I.classify_embeddings(bank_of(rows), queries)
    # scaling every coordinate scales every L1 distance by the same factor
    scaled = I.classify_embeddings(bank_of(rows * factor), queries * factor)
    assert list(base) == list(scaled)
    # a shared translation leaves every distance unchanged
    shift = rng.standard_normal(5)
    assert list(base) == list(I.classify_embeddings(bank_of(rows + shift), queries + shift))


@pytest.fixture(scope="module")
def small():
    ds = G.make_dataset(n_radicals=6, n_chars=20, seed=1)
    model = build_model(ModelConfig(n_known=10, n_radical_channels=7), seed=0)
    return ds, model


def test_bank_covers_every_candidate_and_is_deterministic(small):
    ds, model = small
    bank = I.build_bank(model, ds.char_ids, ds)
    assert len(bank) == 20 and bank.embeddings.shape == (20, 1024)
    assert all(c in bank for c in ds.char_ids)
    again = I.build_bank(model, ds.char_ids, ds)
    assert I.bank_bytes(bank) == I.bank_bytes(again)
    # rendering from the atlas yields the same bank as the stored canonical images
    from_atlas = I.build_bank(model, ds.chars, ds.atlas)
    np.testing.assert_array_equal(from_atlas.embeddings, bank.embeddings)
    assert bank.nbytes == 20 * 1024 * 4


def test_build_bank_rejects_empty_candidates(small):
    _, model = small
    with pytest.raises(ValueError, match="empty"):
        I.build_bank(model, [], small[0])


def test_evaluate_bookkeeping_and_errors(small):
    ds, model = small
    bank = I.build_bank(model, ds.char_ids, ds)
    ids = ds.char_ids[:8]
    report = I.evaluate(model, bank, ids, ds.glyphs("variant", ids))
    assert report.accuracy == sum(report.correct.values()) / 8
    assert report.total == 8 and len(report.rows()) == 8
    assert all(report.predictions[c] in bank for c in ids)
    with pytest.raises(ValueError, match="empty"):
        I.evaluate(model, bank, [], np.zeros((0, 32, 32), np.float32))
    partial = I.build_bank(model, ds.char_ids[:5], ds)
    with pytest.raises(ValueError, match="missing from the bank"):
        I.evaluate(model, partial, ids, ds.glyphs("variant", ids))


def test_classify_single_image_agrees_with_evaluate(small):
    ds, model = small
    bank = I.build_bank(model, ds.char_ids, ds)
    ids = ds.char_ids[:4]
    images = ds.glyphs("variant", ids)
    report = I.evaluate(model, bank, ids, images)
    assert [I.classify(model, bank, img) for img in images] == [report.predictions[c] for c in ids]


def test_bank_file_round_trip(small, tmp_path):
    ds, model = small
    bank = I.build_bank(model, ds.char_ids, ds, provenance={"checkpoint": "abc"})
    path = I.save_bank(bank, tmp_path / "b.gzbank")
    loaded = I.load_bank(path)
    assert I.bank_bytes(loaded) == path.read_bytes()
    assert loaded.provenance == {"checkpoint": "abc"}
