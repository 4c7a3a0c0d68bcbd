"""Acceptance gate: every release criterion, one printed verdict line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict
lines as they pass. Each criterion checks the package against an
independent route: plain-loop reimplementations, exhaustive search,
numeric integration, committed cross-package fixtures, or a seeded
end-to-end study.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from tlx.cluster import ExplainerModel, entropy, kmeans_fit, soft_assign
from tlx.explain import explain, fit_explainer
from tlx.net import WeightsBundle, forward, grad_wrt_tap, gradcam, load_bundle, reference_arch
from tlx.signal import SynthSpec, synth_corpus, synth_ecg
from tlx.analytics import (ablation_grid, auroc, cross_validate, pearson,
                           phase_frequencies, proportions)
from tlx.forest import raw_signal_features

from helpers import (auroc_by_pairs, brute_force_kmeans2, fd_grad_wrt_activation,
                     naive_explain, pvalue_by_quadrature, random_params)

FIXTURES = Path(__file__).parent / "fixtures"


def verdict(name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    print(line)
    assert ok, line


def tiny_record(class_id: int, seed: int, pad_to: int = 160):
    spec = SynthSpec(fs=100, n_beats=2, rr_ms=700.0, class_id=class_id,
                     seed=seed, noise_mv=0.02, wander_mv=0.03,
                     pad_to=pad_to, lead_in_ms=300.0, lead_out_ms=300.0)
    return synth_ecg(spec, record_id=f"t{seed:05d}")


# ---------------------------------------------------------------------------
# Criterion: end-to-end pipeline equals a plain-loop float64 rebuild
# ---------------------------------------------------------------------------

def test_explain_oracle_equivalence():
    t0 = time.perf_counter()
    worst_prob = 0.0
    for fixture_i, (seed_b, seed_r, class_id, tau) in enumerate(
            [(0, 100, 0, 1.0), (1, 200, 1, 0.7), (2, 300, 2, 1.6)]):
        arch, meta = reference_arch(input_length=160, input_channels=12, n_out=4,
                                    head="sigmoid", channels=(4, 4), kernel=5)
        bundle = WeightsBundle(arch=arch, params=random_params(arch, seed_b),
                               meta=meta)
        rec, _ = tiny_record(class_id, seed_r)
        model = fit_explainer(bundle, [rec], K=4, seed=fixture_i, tau=tau, n_init=2)
        got = explain(bundle, model, rec)
        probs, labels, _ = naive_explain(arch, bundle.params,
                                         rec.samples.astype(np.float64),
                                         meta["tap_names"], model.centroids, tau)
        assert np.array_equal(got.labels, labels), f"fixture {fixture_i}: labels differ"
        worst_prob = max(worst_prob, float(np.abs(got.assignment.probs - probs).max()))
    elapsed = time.perf_counter() - t0
    verdict("explain-oracle-equivalence",
            worst_prob <= 1e-5 and elapsed < 10.0,
            f"3 fixtures, labels exact, max prob dev {worst_prob:.2e} "
            f"(tol 1e-5), {elapsed:.1f}s (limit 10s)")


# ---------------------------------------------------------------------------
# Criterion: fitted k-means inertia is the exhaustive-partition optimum
# ---------------------------------------------------------------------------

def test_kmeans_optimality_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        rng = np.random.default_rng(1000 + i)
        n = int(rng.integers(3, 9))
        c = int(rng.integers(1, 4))
        data = rng.normal(size=(n, c))
        model = kmeans_fit(data, K=2, seed=i, n_init=10)
        best = brute_force_kmeans2(data)
        worst = max(worst, abs(model.inertia - best) / max(best, 1e-12))
    elapsed = time.perf_counter() - t0
    verdict("kmeans-optimality",
            worst <= 1e-9 and elapsed < 5.0,
            f"50 instances (n<=8, K=2), max rel inertia dev {worst:.2e}, "
            f"{elapsed:.2f}s (limit 5s)")


# ---------------------------------------------------------------------------
# Criterion: soft-assignment invariants over 1000 random cases
# ---------------------------------------------------------------------------

def test_soft_assignment_invariants():
    rng = np.random.default_rng(33)
    for case in range(1000):
        K = int(rng.integers(2, 9))
        C = int(rng.integers(1, 6))
        D = int(rng.integers(1, 7))
        scale = float(10.0 ** rng.integers(-1, 3))
        data = rng.normal(0.0, scale, size=(D, C))
        cents = rng.normal(0.0, scale, size=(K, C))
        tau = float(rng.uniform(0.2, 5.0))
        model = ExplainerModel(centroids=cents, tau=tau)
        a = soft_assign(model, data)

        assert np.abs(a.probs.sum(axis=1) - 1.0).max() <= 1e-6, f"case {case}: row sums"
        ent = entropy(a.probs)
        assert (ent >= -1e-12).all() and (ent <= math.log(K) + 1e-12).all(), \
            f"case {case}: entropy range"
        d2 = ((data[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        assert np.array_equal(a.labels, d2.argmin(axis=1)), \
            f"case {case}: argmax != nearest centroid"
        rescaled = soft_assign(ExplainerModel(centroids=cents, tau=tau * 7.5), data)
        assert np.array_equal(a.labels, rescaled.labels), \
            f"case {case}: tau rescaling moved labels"
    verdict("soft-assignment-invariants", True,
            "1000 cases: rows sum to 1 (1e-6), entropy in [0, ln K], "
            "argmax = nearest centroid, tau-rescale leaves labels")


# ---------------------------------------------------------------------------
# Criterion: saliency gradients match central finite differences
# ---------------------------------------------------------------------------

def test_gradcam_gradient_check():
    from tlx.net import _layer_forward  # tail closure feeds FD a replacement tap

    worst = 0.0
    for trial in range(10):
        head = "sigmoid" if trial % 2 else "linear"
        arch = [{"type": "conv1d", "name": "c", "in_ch": 3, "out_ch": 4,
                 "kernel": 5, "stride": 1, "pad": 2},
                {"type": "relu", "name": "r"},
                {"type": "flatten", "name": "f"},
                {"type": "dense", "name": "fc", "in": 64, "out": 3},
                {"type": head, "name": "head"}]
        meta = {"input_length": 16, "input_channels": 3, "tap_names": ["c"]}
        bundle = WeightsBundle(arch=arch, params=random_params(arch, 40 + trial),
                               meta=meta)
        x = np.random.default_rng(70 + trial).normal(size=(16, 3))
        target = trial % 3
        _, act, grad = grad_wrt_tap(bundle, x, target, "c")

        def tail(replacement, _bundle=bundle):
            out = replacement
            for spec in _bundle.arch[1:]:
                out = _layer_forward(spec, _bundle.params, out, None)
            return out

        fd = fd_grad_wrt_activation(tail, act, target, h=1e-4)
        rel = np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-8)
        worst = max(worst, float(rel))
        sal = gradcam(bundle, x, target, "c")
        assert (sal >= 0.0).all()
    verdict("gradcam-gradient-check", worst < 1e-4,
            f"10 random small bundles, max rel FD error {worst:.2e} (tol 1e-4)")


# ---------------------------------------------------------------------------
# Criterion: committed exporter fixtures reproduce through this package
# ---------------------------------------------------------------------------

def test_forward_parity_on_committed_fixtures():
    bundle = load_bundle(FIXTURES / "toy_classify4.tlxw")
    fixture_paths = sorted(FIXTURES.glob("fixture*.npz"))
    assert len(fixture_paths) == 5
    worst = 0.0
    for path in fixture_paths:
        fx = np.load(path)
        y, acts = forward(bundle, fx["input"])
        worst = max(worst, float(np.abs(y - fx["output"]).max()))
        for act in acts:
            ref = fx[f"tap_{act.layer_name}"]
            assert ref.shape == act.data.shape
            worst = max(worst, float(np.abs(act.data - ref).max()))
    verdict("forward-parity-fixtures", worst <= 1e-4,
            f"5 committed fixtures, max abs dev {worst:.2e} (tol 1e-4), "
            "no training stack needed")


# ---------------------------------------------------------------------------
# Criterion: statistics against quadrature / pair counting / run count
# ---------------------------------------------------------------------------

def exact_corr_pair(n, r, seed):
    # Orthogonalize noise against x so the sample correlation is exactly r.
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    x = x - x.mean()
    x /= np.linalg.norm(x)
    e = rng.normal(size=n)
    e = e - e.mean()
    e -= (e @ x) * x
    e /= np.linalg.norm(e)
    return x, r * x + math.sqrt(1.0 - r * r) * e


def test_statistics_oracles():
    worst_p = 0.0
    for n in (5, 8, 12, 30, 100):
        for r in (0.1, 0.3, 0.5, 0.7, 0.9):
            x, y = exact_corr_pair(n, r, seed=n * 7 + int(r * 10))
            r_hat, p_hat = pearson(x, y)
            assert abs(r_hat - r) < 1e-10
            worst_p = max(worst_p, abs(p_hat - pvalue_by_quadrature(r_hat, n)))

    worst_auc = 0.0
    rng = np.random.default_rng(8)
    for _ in range(30):
        n = int(rng.integers(4, 13))
        yb = rng.integers(0, 2, size=n)
        if yb.min() == yb.max():
            yb[0] = 1 - yb[0]
        scores = rng.integers(0, 5, size=n) / 4.0  # coarse grid forces ties
        worst_auc = max(worst_auc, abs(auroc(yb, scores) - auroc_by_pairs(yb, scores)))

    rng = np.random.default_rng(9)
    X = rng.normal(size=(30, 3))
    Y = (X[:, 0] > 0).astype(int)[:, None]
    cv = cross_validate(X, Y, folds=5, repeats=3, seed=0, n_trees=5)
    runs_ok = cv["n_runs"] == 15

    verdict("statistics-oracles",
            worst_p <= 1e-6 and worst_auc <= 1e-12 and runs_ok,
            f"pearson p vs quadrature max dev {worst_p:.2e} (tol 1e-6) on 25-point "
            f"grid; auroc vs pair counting max dev {worst_auc:.1e} over 30 cases; "
            f"cv runs {cv['n_runs']} (want 15)")


# ---------------------------------------------------------------------------
# Criteria: seeded end-to-end study on the committed trained bundle
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def study():
    t0 = time.perf_counter()
    bundle = load_bundle(FIXTURES / "toy_classify4.tlxw")
    fit_records, _ = synth_corpus(600, seed=21, task="classify4")
    eval_records, eval_kps = synth_corpus(200, seed=22, task="classify4")
    Y = np.stack([r.labels for r in eval_records]).astype(int)

    prop_auroc, tp_best, qrs_best = [], [], []
    for s in range(5):
        km = fit_explainer(bundle, fit_records, K=20, seed=s, n_init=2)
        exps = [explain(bundle, km, r) for r in eval_records]
        table = phase_frequencies(exps, eval_kps)["table"]
        qrs_best.append(float(table[:, 1].max()))
        tp_best.append(float(table[:, 3].max()))
        props = np.stack([proportions(e) for e in exps])
        prop_auroc.append(cross_validate(props, Y, seed=s, n_trees=50)["auroc"])

    sig_auroc = cross_validate(raw_signal_features(eval_records), Y,
                               seed=0, n_trees=50)["auroc"]
    return {
        "prop_auroc": float(np.mean(prop_auroc)),
        "sig_auroc": float(sig_auroc),
        "tp": float(np.mean(tp_best)),
        "qrs": float(np.mean(qrs_best)),
        "elapsed": time.perf_counter() - t0,
    }


def test_study_proportions_beat_raw_signal(study):
    ok = (study["prop_auroc"] >= 0.80
          and study["prop_auroc"] >= study["sig_auroc"]
          and study["elapsed"] < 300.0)
    verdict("study-proportions-vs-raw", ok,
            f"5-seed mean RF-on-proportions auroc {study['prop_auroc']:.4f} "
            f"(floor 0.80) vs RF-on-raw-signal {study['sig_auroc']:.4f}; "
            f"study took {study['elapsed']:.0f}s (limit 300s)")


def test_study_keypoint_specialization(study):
    ok = study["tp"] >= 0.7 and study["qrs"] >= 0.5
    verdict("study-keypoint-specialization", ok,
            f"5-seed mean best-cluster frequency: inter-beat interval "
            f"{study['tp']:.3f} (floor 0.7), QRS window {study['qrs']:.3f} (floor 0.5)")


# ---------------------------------------------------------------------------
# Criterion: ablation harness emits full grids deterministically
# ---------------------------------------------------------------------------

def test_ablation_grids_deterministic():
    arch, meta = reference_arch(input_length=160, input_channels=12, n_out=4,
                                head="sigmoid", channels=(8, 8), kernel=9)
    bundle = WeightsBundle(arch=arch, params=random_params(arch, 3), meta=meta)
    fit_corpus = [tiny_record(i % 4, 50_000 + i)[0] for i in range(1500)]
    eval_corpus = [tiny_record(i % 4, 90_000 + i)[0] for i in range(120)]
    Y = np.stack([r.labels for r in eval_corpus]).astype(int)

    runs = [ablation_grid(bundle, fit_corpus, eval_corpus, Y, K=20, seed=7,
                          n_init=1, n_trees=20) for _ in range(2)]
    grids = runs[0]
    assert grids["by_size"]["columns"] == ["50", "100", "200", "500",
                                           "1000", "1500", "all"]
    assert grids["by_k"]["columns"] == ["5", "10", "20", "50", "100"]
    for table, width in ((grids["by_size"], 7), (grids["by_k"], 5)):
        assert sorted(table["rows"]) == sorted(
            ["accuracy", "precision", "recall", "auroc", "f1"])
        for metric, vals in table["rows"].items():
            assert len(vals) == width
            assert all(v is not None and np.isfinite(v) for v in vals), metric
    verdict("ablation-grids", runs[0] == runs[1],
            "7 fit-sizes x 5 metrics and 5 cluster-counts x 5 metrics, "
            "two runs at seed 7 identical")
