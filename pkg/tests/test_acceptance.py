"""Acceptance gate: one test per shipping criterion, one PASS/FAIL line each.

Headline benchmark numbers from full-scale encoders are out of reach on a
desktop, so the gate rests on exact identities, oracle equivalence, and
directional results on planted synthetic structure.
"""

import json
import time

import numpy as np
import pytest

from capforge import (
    AdapterModel,
    SynthSpec,
    TrainConfig,
    accuracy_report,
    auto_threshold,
    build_initial_pl,
    detect_mismatch,
    enhance_mismatched,
    forward_logits,
    generate,
    grow_pl,
    harmonic_mean,
    local_ece,
    loss_and_grads,
    make_descriptions,
    make_trzsl_split,
    margin_loss,
    run_training,
)
from capforge.alignment import FileDescriptionProvider
from capforge.adapters import WEIGHT_NAMES
from capforge.cli import main
from capforge.cluster import l2_normalize
from capforge.margin import tendency_stats

MISMATCH_SEEDS = (7, 11, 13)
BALANCE_SEEDS = (5, 6, 8)
CONFUSED_UNION = [0, 1, 2, 3]


@pytest.fixture()
def announce(capsys):
    def _announce(criterion: str, ok: bool):
        with capsys.disabled():
            print(f"[{'PASS' if ok else 'FAIL'}] {criterion}")
    return _announce


# --------------------------------------------------------------------------
# shared instances


@pytest.fixture(scope="module")
def mismatch_instances(tmp_path_factory):
    """Three seeded planted-mismatch datasets plus detection + both
    pseudolabel arms (description-aligned vs confidence-only)."""
    root = tmp_path_factory.mktemp("mismatch")
    out = []
    for seed in MISMATCH_SEEDS:
        spec = SynthSpec(n_classes=10, per_class=20, test_per_class=8, dim=32,
                         intra_class_std=0.08, n_mismatch=2, seed=seed)
        ds, gt = generate(spec)
        report = detect_mismatch(ds, t=3, seed=0)
        path = root / f"desc-{seed}.json"
        path.write_text(json.dumps(make_descriptions(ds, gt, spec)))
        enhanced = enhance_mismatched(ds, report,
                                      FileDescriptionProvider(str(path)),
                                      5, seed=0)
        pl_aligned = build_initial_pl(ds, report, enhanced, 16)
        pl_confidence = build_initial_pl(ds, detect_mismatch(ds, t=1, seed=0),
                                         {}, 16)
        out.append((seed, ds, gt, report, pl_aligned, pl_confidence))
    return out


@pytest.fixture(scope="module")
def balance_runs():
    """Trained models with and without the margin on three seeded datasets
    carrying two planted confusion pairs (C=10, 600 samples, D=32)."""
    out = {}
    for seed in BALANCE_SEEDS:
        spec = SynthSpec(n_classes=10, per_class=30, test_per_class=30,
                         dim=32, intra_class_std=0.12,
                         confusion_pairs=[(0, 1, 0.75), (2, 3, 0.75)],
                         confusion_cos=0.96, seed=seed)
        ds, _ = generate(spec)
        report = detect_mismatch(ds, t=1, seed=seed)
        pl = build_initial_pl(ds, report, {}, 16)
        arms = {}
        for scale in (12.0, 0.0):
            config = TrainConfig(epochs=50, margin_scale=scale, seed=seed)
            start = time.perf_counter()
            model, log = run_training(ds, report, pl, config)
            elapsed = time.perf_counter() - start
            arms[scale] = {
                "report": accuracy_report(model, ds),
                "ece": local_ece(model, ds, CONFUSED_UNION),
                "elapsed": elapsed,
                "log": log,
            }
        out[seed] = {"ds": ds, "pl": pl, "arms": arms}
    return out


# --------------------------------------------------------------------------
# criteria


def test_disabled_margin_equals_cross_entropy(announce):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        C = int(rng.integers(2, 21))
        z = rng.standard_normal(C) * rng.uniform(0.1, 10)
        y = int(rng.integers(C))
        loss, _ = margin_loss(y, z, np.zeros((C, C)))
        ce = float(np.log(np.sum(np.exp(z - z.max()))) + z.max() - z[y])
        worst = max(worst, abs(loss - ce))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-9 and elapsed < 1.0
    announce("disabled margin equals cross-entropy "
             "(1000 draws, 1e-9, <1s)", ok)
    assert ok, (worst, elapsed)


def test_gradients_match_finite_differences(announce):
    rng = np.random.default_rng(3)
    D, C, N = 4, 3, 12
    model = AdapterModel.init(D)
    for name in WEIGHT_NAMES:
        getattr(model, name)[:] = 0.1 * rng.standard_normal((D, D))
    X = l2_normalize(rng.standard_normal((N, D)))
    T = l2_normalize(rng.standard_normal((C, D)))
    ys = rng.integers(0, C, N)
    M = np.abs(0.5 * rng.standard_normal((C, C)))
    np.fill_diagonal(M, 0.0)

    start = time.perf_counter()
    _, grads = loss_and_grads(model, X, ys, T, M, "main")
    worst = 0.0
    h = 1e-6
    for name, analytic in grads.items():
        W = getattr(model, name)
        numeric = np.zeros_like(W)
        for i in range(D):
            for j in range(D):
                orig = W[i, j]
                W[i, j] = orig + h
                up = loss_and_grads(model, X, ys, T, M, "main")[0]
                W[i, j] = orig - h
                down = loss_and_grads(model, X, ys, T, M, "main")[0]
                W[i, j] = orig
                numeric[i, j] = (up - down) / (2 * h)
        denom = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
        worst = max(worst, float(np.abs(numeric - analytic).max() / denom))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and elapsed < 10.0
    announce("analytic gradients match finite differences "
             "(rel <=1e-3, <10s)", ok)
    assert ok, (worst, elapsed)


def test_untrained_model_reproduces_zero_shot(announce, clean_ds, planted):
    rng = np.random.default_rng(9)
    raw = l2_normalize(rng.standard_normal((40, 24))).astype(np.float32)
    texts = l2_normalize(rng.standard_normal((7, 24))).astype(np.float32)
    cases = [(clean_ds.image_features, clean_ds.text_features),
             (planted[0].image_features, planted[0].text_features),
             (raw, texts)]
    ok = True
    for X32, T32 in cases:
        X = X32.astype(np.float64)
        T = T32.astype(np.float64)
        model = AdapterModel.init(X.shape[1])
        got = forward_logits(model, X, T32, "inference")
        want = 100.0 * l2_normalize(X) @ l2_normalize(T).T
        ok &= bool(np.abs(got - want).max() <= 1e-6)
        ok &= bool(np.array_equal(np.argmax(got, 1), np.argmax(want, 1)))
    announce("untrained model reproduces zero-shot scores (logits 1e-6)", ok)
    assert ok


def test_removal_loop_arithmetic(announce, planted):
    cases = [(10, planted[0])]
    for C, dim, per_class in ((45, 64, 6), (102, 128, 4)):
        spec = SynthSpec(n_classes=C, per_class=per_class, test_per_class=2,
                         dim=dim, intra_class_std=0.1, seed=0)
        cases.append((C, generate(spec)[0]))
    ok = True
    for C, ds in cases:
        t = auto_threshold(C)
        report = detect_mismatch(ds, t=t, seed=0)
        ok &= len(report.trace) == C - (t - 1)
        ok &= len(report.y_final) == t - 1
    announce("removal loop leaves ceil(C/10)-1 survivors after "
             "C-(ceil(C/10)-1) iterations (C in 10/45/102)", ok)
    assert ok


def test_planted_mismatch_recovery(announce, mismatch_instances):
    ok = True
    for seed, ds, gt, report, _, _ in mismatch_instances:
        planted = set(gt.mismatch_classes)
        ok &= planted <= set(report.y_mm)                 # recall 1.0
        ok &= len(set(report.y_mm) - planted) <= 1        # <=1 false positive
    announce("planted mismatched classes recovered: recall 1.0, "
             "<=1 false positive (seeds 7/11/13)", ok)
    assert ok


def test_alignment_beats_confidence_pseudolabels(announce, mismatch_instances):
    def pl_acc(pl, ds, classes):
        records = [r for r in pl.records if r.class_id in classes]
        return float(np.mean([ds.labels[r.sample_id] == r.class_id
                              for r in records]))

    ok = True
    for seed, ds, gt, _, pl_aligned, pl_confidence in mismatch_instances:
        planted = set(gt.mismatch_classes)
        gain = pl_acc(pl_aligned, ds, planted) - pl_acc(pl_confidence, ds,
                                                        planted)
        ok &= gain >= 0.30
    announce("description-aligned pseudolabels beat confidence-ranked "
             "by >=30pp on mismatched classes", ok)
    assert ok


def test_margin_balances_predictions(announce, balance_runs):
    ok = True
    for seed, run in balance_runs.items():
        with_m = run["arms"][12.0]["report"]
        without = run["arms"][0.0]["report"]
        ok &= with_m.pred_count_std < without.pred_count_std
        ok &= with_m.min_per_class_acc > without.min_per_class_acc
        ok &= run["arms"][12.0]["elapsed"] < 60.0
        ok &= run["arms"][0.0]["elapsed"] < 60.0
    announce("margin training lowers prediction-count std and raises "
             "min class accuracy (3 seeds, 50 epochs <60s)", ok)
    assert ok


def test_margin_improves_group_calibration(announce, balance_runs):
    ok = True
    for seed, run in balance_runs.items():
        ok &= run["arms"][12.0]["ece"] < run["arms"][0.0]["ece"]
    announce("margin training lowers calibration error on the planted "
             "confused classes (every seed)", ok)
    assert ok


def test_tendency_unit_identities(announce):
    pairs = [(0, 1.0)] * 4 + [(1, 1.0)] * 2
    sigma, delta, big_delta = tendency_stats(pairs, 0.85, 3)
    m_vec = 12.0 * big_delta * delta
    ok = (sigma.tolist() == [4, 2, 0]
          and delta.tolist() == [0.0, 0.5, 1.0]
          and big_delta == 1.0
          and m_vec.tolist() == [0.0, 6.0, 12.0])
    announce("counts (4,2,0) -> tendencies (0,0.5,1), imbalance 1, "
             "margins (0,6,12) exactly", ok)
    assert ok


def test_growth_schedule_and_disjoint_sets(announce, balance_runs):
    run = balance_runs[BALANCE_SEEDS[0]]
    log = run["arms"][12.0]["log"]
    ul0 = log[0]["ul_size"]
    ok = True
    for record in log[1:]:
        if record["epoch"] % 5 == 0:
            ok &= 0 < record["grown"] <= ul0 // 10
        else:
            ok &= record["grown"] == 0

    # replay growth alone to check the moved samples leave the pool
    ds, pl = run["ds"], run["pl"]
    config = TrainConfig(epochs=50, growth_every=5)
    model = AdapterModel.init(ds.dim)
    pool = ds.unlabeled_pool()
    pool = pool[~np.isin(pool, pl.sample_ids())]
    current = pl
    for epoch in range(5, 51, 5):
        current, pool, _ = grow_pl(model, ds, current, pool, epoch, config,
                                   ul0)
        ok &= not (set(int(i) for i in current.sample_ids())
                   & set(int(i) for i in pool))
    announce("pseudolabel growth fires every 5 epochs in pool/10-scale "
             "batches; grown samples leave the unlabeled pool", ok)
    assert ok


def test_end_to_end_determinism(announce, tmp_path):
    data = str(tmp_path / "data")
    assert main(["synth", "--out", data, "--classes", "10",
                 "--per-class", "20", "--test-per-class", "8", "--dim", "32",
                 "--intra-class-std", "0.08", "--n-mismatch", "2",
                 "--seed", "7"]) == 0
    args = ["train", "--data", data,
            "--descriptions", f"{data}/descriptions.json", "--t", "3",
            "--epochs", "5", "--k", "4", "--seed", "0"]
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(args + ["--out-dir", a]) == 0
    assert main(args + ["--out-dir", b]) == 0
    ok = (open(f"{a}/metrics.jsonl", "rb").read()
          == open(f"{b}/metrics.jsonl", "rb").read())
    announce("same seed twice -> byte-identical metric logs", ok)
    assert ok


def test_harmonic_mean_and_split_arithmetic(announce):
    hm_ok = abs(harmonic_mean(0.8, 0.4) - 8.0 / 15.0) < 1e-9
    spec = SynthSpec(n_classes=100, per_class=2, test_per_class=1, dim=128,
                     intra_class_std=0.05, seed=0)
    ds, _ = generate(spec)
    splits = make_trzsl_split(ds, 0.62, seed=0)
    split_ok = (len(splits.seen_classes) == 62
                and len(splits.unseen_classes) == 38)
    ok = hm_ok and split_ok
    announce("harmonic mean of (0.8,0.4) is 8/15 (1e-9); 0.62 split of "
             "100 classes yields 62 seen", ok)
    assert ok
