"""End-to-end acceptance criteria, each at its stated tolerance and time budget.

Heavy runs are shared through session fixtures: the criterion-3 experiment
also serves the ablation baseline, the seen-character check and the
round-trip checks. Every test records a PASS/FAIL line (see conftest.py).
"""

import math
import time

import numpy as np
import pytest

from glyphzero import diffcore as dc
from glyphzero import glyphs as G
from glyphzero import inference as I
from glyphzero import losses as L
from glyphzero import protocols as P
from glyphzero import trainer as T
from glyphzero.config import RunConfig
from glyphzero.diffcore import RunningStats, Tensor

pytestmark = pytest.mark.acceptance

MINUTE = 60.0


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - start


def run_task(overrides=None):
    """The criterion-3 task: 40 radicals, 600 characters, split 200/50/350."""
    cfg = RunConfig.from_dict(overrides or {})
    ds = cfg.make_dataset()
    return P.run_experiment(ds, ds.split, cfg.model_config(), cfg.train_config()), ds, cfg


@pytest.fixture(scope="session")
def task():
    (result, ds, cfg), seconds = timed(run_task)
    return result, ds, cfg, seconds


# -- 1: gradients


def _op_cases():
    bn_stats = RunningStats(3, dtype=np.float64)

    def bn(training):
        def fn(x, g, b):
            bn_stats.mean[:], bn_stats.var[:] = 0.2, 1.3
            return dc.batch_norm(x, g, b, bn_stats, training)

        return fn

    centers = L.Centers(np.random.default_rng(99).standard_normal((3, 2, 2, 2)))
    elementwise = {
        "add": (dc.add, [(3, 4), (3, 4)], False),
        "sub": (dc.sub, [(3, 4), (3, 4)], False),
        "mul": (dc.mul, [(3, 4), (3, 4)], False),
        "scale": (lambda a: dc.scale(a, 0.7), [(3, 4)], False),
        "square": (dc.square, [(3, 4)], False),
        "abs": (dc.abs, [(3, 4)], True),
        "exp": (dc.exp, [(3, 4)], False),
        "log": (dc.log, [(3, 4)], True),
        "prelu": (dc.prelu, [(2, 3, 3, 3), (3,)], False),
    }
    structured = {
        "sum": (lambda a: dc.sum(a, axis=1), [(3, 4)]),
        "mean": (lambda a: dc.mean(a, axis=(0, 2)), [(2, 3, 4)]),
        "reshape": (lambda a: dc.reshape(a, (4, 3)), [(3, 4)]),
        "flatten": (dc.flatten, [(2, 2, 3)]),
        "concat": (lambda a, b: dc.concat([a, b], axis=1), [(2, 3), (2, 2)]),
        "slice": (lambda a: a[1:3], [(4, 2)]),
        "matmul": (dc.matmul, [(3, 4), (4, 2)]),
        "linear": (dc.linear, [(3, 4), (2, 4), (2,)]),
        "softmax": (lambda a: dc.softmax(a, axis=1), [(2, 4, 3)]),
        "conv2d": (lambda a, w, b: dc.conv2d(a, w, b, padding=1), [(2, 2, 4, 4), (3, 2, 3, 3), (3,)]),
        "conv2d_stride2": (lambda a, w: dc.conv2d(a, w, stride=2, padding=1), [(2, 2, 5, 5), (2, 2, 3, 3)]),
        "avg_pool2d": (lambda a: dc.avg_pool2d(a, 2), [(2, 2, 4, 4)]),
        "batch_norm_train": (bn(True), [(4, 3, 2, 2), (3,), (3,)]),
        "batch_norm_eval": (bn(False), [(4, 3, 2, 2), (3,), (3,)]),
        "loss_hpe": (L.loss_hpe, [(2, 2, 2, 2), (2, 2, 2, 2)]),
        "loss_kcls_d": (lambda z: L.loss_kcls(z, [0, 2]), [(2, 3)]),
        "loss_kcls_t": (lambda z: L.loss_kcls(z, [1, 1]), [(2, 3)]),
        "loss_center": (lambda a: L.loss_center(a, [0, 2], centers), [(2, 2, 2, 2)]),
        "loss_race": (lambda r: L.loss_race(r, [[1, 0, 2], [0, 0, 1]]), [(2, 4, 2, 2)]),
    }
    return elementwise, structured


def test_criterion_1_gradient_integrity(acceptance_record):
    start = time.perf_counter()
    elementwise, structured = _op_cases()
    worst_elem, worst_struct, failures = 0.0, 0.0, []
    with dc.precision(np.float64):
        for seed in range(10):
            rng = np.random.default_rng(seed)

            def leaves(shapes, positive=False):
                arrs = [rng.standard_normal(s) for s in shapes]
                if positive:
                    arrs = [np.abs(a) + 0.5 for a in arrs]
                return [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrs]

            for name, (fn, shapes, positive) in elementwise.items():
                err = dc.gradcheck(fn, leaves(shapes, positive), seed=seed)
                worst_elem = max(worst_elem, err)
                if err > 1e-6:
                    failures.append((name, seed, err))
            for name, (fn, shapes) in structured.items():
                err = dc.gradcheck(fn, leaves(shapes), seed=seed)
                worst_struct = max(worst_struct, err)
                if err > 1e-4:
                    failures.append((name, seed, err))
    seconds = time.perf_counter() - start
    ok = not failures and seconds < MINUTE
    acceptance_record(
        1, ok, f"max rel err elementwise {worst_elem:.2e} (<=1e-6), other {worst_struct:.2e} (<=1e-4), {seconds:.1f}s"
    )
    assert not failures, failures
    assert seconds < MINUTE


# -- 2: counting loss against loops


def _race_loops(logits, counts):
    B, N, H, W = logits.shape
    T_ = H * W
    total = 0.0
    for b in range(B):
        agg = [0.0] * N
        for i in range(H):
            for j in range(W):
                col = [float(logits[b, k, i, j]) for k in range(N)]
                m = max(col)
                ex = [math.exp(v - m) for v in col]
                s = sum(ex)
                for k in range(N):
                    agg[k] += ex[k] / s
        lab = [float(c) for c in counts[b]]
        lab.append(T_ - sum(lab))
        for k in range(N):
            total -= (lab[k] / T_) * math.log(max(agg[k] / T_, 1e-12))
    return total / B


def test_criterion_2_race_oracle(acceptance_record):
    rng = np.random.default_rng(7)
    worst = 0.0
    start = time.perf_counter()
    for case in range(100):
        H, W, N = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(2, 7))
        B = int(rng.integers(1, 4))
        logits = rng.standard_normal((B, N, H, W)) * 2
        counts = np.zeros((B, N - 1), np.int64)
        for b in range(B):
            for _ in range(int(rng.integers(0, min(3, H * W) + 1))):
                counts[b, rng.integers(0, N - 1)] += 1
        with dc.precision(np.float64):
            got = L.loss_race(Tensor(logits, dtype=np.float64), counts).item()
        worst = max(worst, abs(got - _race_loops(logits, counts)))
    seconds = time.perf_counter() - start
    acceptance_record(2, worst <= 1e-12, f"max |diff| {worst:.2e} over 100 cases (<=1e-12), {seconds:.2f}s")
    assert worst <= 1e-12


# -- 3: zero-shot recognition


def test_criterion_3_zero_shot(task, acceptance_record):
    result, _, _, seconds = task
    ok = result.accuracy >= 0.80 and seconds <= 20 * MINUTE
    acceptance_record(
        3, ok, f"AR {100 * result.accuracy:.2f}% on {result.report.total} unseen (>=80%), {seconds / MINUTE:.1f} min (<=20)"
    )
    assert result.report.total == 350
    assert result.accuracy >= 0.80
    assert seconds <= 20 * MINUTE


# -- 4: scaling with training size


def test_criterion_4_scaling(acceptance_record):
    cfg = RunConfig.from_dict({})
    ds = cfg.make_dataset()
    rows, seconds = timed(
        P.run_unseen_sweep, ds, [100, 200, 400], cfg.model_config(), cfg.train_config(),
        val_n=50, test_n=150, split_seed=cfg.data_seed(),
    )
    acc = [r["accuracy"] for r in rows]
    ok_shape = all(r["status"] == "ok" and r["test_size"] == 150 for r in rows)
    monotone = ok_shape and all(acc[i + 1] >= acc[i] - 0.02 for i in range(2))
    gain = ok_shape and acc[2] > acc[0]
    ok = monotone and gain and seconds <= 45 * MINUTE
    shown = ", ".join(f"{r['train_size']}: {100 * r['accuracy']:.2f}%" if r["status"] == "ok" else r["status"] for r in rows)
    acceptance_record(4, ok, f"AR by train size {shown}; {seconds / MINUTE:.1f} min (<=45)")
    assert ok_shape
    assert monotone and gain
    assert seconds <= 45 * MINUTE


# -- 5: complex style


def test_criterion_5_complex_style(task, acceptance_record):
    variant = task[0].accuracy
    (result, _, _), seconds = timed(run_task, {"train": {"style": "complex"}})
    ok = result.accuracy <= variant and result.accuracy >= 0.50 and seconds <= 20 * MINUTE
    acceptance_record(
        5, ok,
        f"AR complex {100 * result.accuracy:.2f}% vs variant {100 * variant:.2f}% (<=, and >=50%), {seconds / MINUTE:.1f} min",
    )
    assert result.accuracy <= variant
    assert result.accuracy >= 0.50
    assert seconds <= 20 * MINUTE


# -- 6: loss ablation ordering


def test_criterion_6_loss_ablation(task, acceptance_record):
    result, ds, cfg, _ = task
    cells = [("hpe",), ("kcls",), ("center",), ("race",), ("hpe", "race")]
    rows, seconds = timed(P.run_ablation, ds, ds.split, cfg.model_config(), cfg.train_config(), losses=cells)
    by = {r["losses"]: r["accuracy"] for r in rows}
    singles = {k: by[k] for k in ("hpe", "kcls", "center", "race")}
    full = result.accuracy
    best_single = max(singles.values())
    ok_full = full >= best_single
    ok_pair = by["hpe+race"] > best_single
    ok = ok_full and ok_pair and seconds <= 120 * MINUTE
    shown = ", ".join(f"{k} {100 * v:.2f}%" for k, v in singles.items())
    acceptance_record(
        6, ok, f"all {100 * full:.2f}%, hpe+race {100 * by['hpe+race']:.2f}%, singles: {shown}; {seconds / MINUTE:.1f} min"
    )
    assert ok_full
    assert ok_pair
    assert seconds <= 120 * MINUTE


# -- 7: extra thinking under rotation


def test_criterion_7_et_under_rotation(acceptance_record):
    cfg = RunConfig.from_dict({"train": {"blur_sigma": 0.5, "rotation": 45.0}})
    ds = cfg.make_dataset()
    rows, seconds = timed(
        P.run_ablation, ds, ds.split, cfg.model_config(), cfg.train_config(), extra_thinking=[True, False]
    )
    (diff,) = P.et_difference(rows)
    ok = diff["diff"] >= 0 and seconds <= 40 * MINUTE
    acceptance_record(
        7, ok,
        f"AR with ET {100 * diff['with_et']:.2f}%, without {100 * diff['without_et']:.2f}%, "
        f"diff {100 * diff['diff']:+.2f} pp (>=0), {seconds / MINUTE:.1f} min",
    )
    assert diff["diff"] >= 0
    assert seconds <= 40 * MINUTE


# -- 8: seen characters


def test_criterion_8_seen_characters(task, acceptance_record):
    result, ds, _, _ = task
    ids = list(ds.split.train_ids)
    report = I.evaluate(result.model, result.bank, ids, ds.glyphs("canonical", ids))
    acceptance_record(8, report.accuracy >= 0.99, f"AR {100 * report.accuracy:.2f}% on {len(ids)} seen canonical renders (>=99%)")
    assert report.accuracy >= 0.99


# -- 9: determinism


def test_criterion_9_determinism(task, acceptance_record):
    first = task[0]
    second, _, _ = run_task()
    same_ckpt = first.training.checkpoint == second.training.checkpoint
    a, b = first.report, second.report
    # wall-clock timing is the only field allowed to differ
    same_report = (a.accuracy, a.correct, a.predictions, a.confusions, a.protocol) == (
        b.accuracy, b.correct, b.predictions, b.confusions, b.protocol
    )
    acceptance_record(
        9, same_ckpt and same_report,
        f"checkpoints byte-equal: {same_ckpt} ({len(first.training.checkpoint)} bytes), EvalReports identical: {same_report}",
    )
    assert same_ckpt
    assert same_report


# -- 10: round trips


def test_criterion_10_round_trips(task, acceptance_record, tmp_path):
    result, ds, cfg, _ = task
    model = result.model
    centers = result.training.centers
    meta = T.read_checkpoint_bytes(result.training.checkpoint).metadata
    keep = {k: v for k, v in meta.items() if k not in ("model", "center_alpha")}
    p1 = T.save_checkpoint(model, centers, keep, tmp_path / "one.gzck")
    state = T.load_checkpoint(p1)
    p2 = T.save_checkpoint(state.build(), state.centers, keep, tmp_path / "two.gzck")
    ckpt_ok = p1.read_bytes() == p2.read_bytes() == result.training.checkpoint

    manifest_ok = G.manifest_bytes(cfg.make_dataset()) == G.manifest_bytes(ds)

    restored = state.build()
    ids = list(ds.split.test_ids)
    queries = T.validation_images(ds, ids, cfg.train_config())
    before = I.classify_embeddings(result.bank, I.embed(model, queries, "training"))
    bank_after = I.build_bank(restored, ds.char_ids, ds)
    after = I.classify_embeddings(bank_after, I.embed(restored, queries, "training"))
    classify_ok = np.array_equal(before, after)
    acceptance_record(
        10, ckpt_ok and manifest_ok and classify_ok,
        f"checkpoint save/load/save equal: {ckpt_ok}, manifest regeneration equal: {manifest_ok}, "
        f"classify equal on {len(ids)} queries: {classify_ok}",
    )
    assert ckpt_ok
    assert manifest_ok
    assert classify_ok
