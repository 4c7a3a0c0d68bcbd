"""Statistics over explanations: proportions, correlations, frequencies,
classification metrics, cross-validation, uncertainty summaries, ablations.

Conventions: cluster proportions live on the simplex; p-values are two-sided;
AUROC uses the rank (Mann-Whitney) statistic with tie correction; multilabel
metrics are macro averages over labels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .cluster import kmeans_fit
from .errors import ConfigError, NumericError, ShapeError
from .explain import Explanation, explain, fit_explainer
from .forest import multilabel_fit, multilabel_predict_proba, raw_signal_features
from .net import contrast_transform, forward

KEYPOINT_COLUMNS = ("p_on", "p_peak", "p_off", "qrs_on", "r_peak", "qrs_off",
                    "t_on", "t_peak", "t_off", "TP")
PHASES = ("P", "QRS", "T", "TP")
METRIC_ROWS = ("accuracy", "precision", "recall", "auroc", "f1")


# ---------------------------------------------------------------------------
# Proportions
# ---------------------------------------------------------------------------

def proportions(explanation: Explanation, mask_padding: bool = False,
                valid_range: tuple | None = None) -> np.ndarray:
    """Fraction of explanation cells per cluster; optionally only cells that
    overlap the record's valid range."""
    K = explanation.assignment.probs.shape[1]
    labels = explanation.labels
    if mask_padding:
        if valid_range is None:
            raise ConfigError("mask_padding requires valid_range")
        v0, v1 = valid_range
        keep = np.array([v0 < b and a < v1 for a, b in explanation.timeline])
        labels = labels[keep]
        if labels.size == 0:
            raise ConfigError("no explanation cells inside valid_range")
    out = np.bincount(labels, minlength=K).astype(np.float64)
    return out / out.sum()


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------

def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Correlation r plus two-sided p from the exact t re. distribution.

    p comes from the regularized incomplete beta function evaluated at
    df/(df + t^2) with t = r sqrt((n-2)/(1-r^2)).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    if n != y.size:
        raise ShapeError(f"length mismatch {n} vs {y.size}")
    if n < 3:
        raise ConfigError(f"need n >= 3 points, got {n}")
    xd = x - x.mean()
    yd = y - y.mean()
    sxx = (xd * xd).sum()
    syy = (yd * yd).sum()
    if sxx == 0 or syy == 0:
        raise NumericError("correlation undefined for zero-variance input")
    # single sqrt of the product keeps exactly collinear data at |r| = 1
    r = float(np.clip((xd * yd).sum() / np.sqrt(sxx * syy), -1.0, 1.0))
    df = n - 2
    if abs(r) == 1.0:
        return r, 0.0
    t2 = r * r * df / (1.0 - r * r)
    p = float(betainc(df / 2.0, 0.5, df / (df + t2)))
    return r, min(max(p, 0.0), 1.0)


@dataclass
class CorrelationReport:
    """(outcome x cluster) grid of r and p, with degenerate cells flagged."""

    r: np.ndarray
    p: np.ndarray
    n: int
    degenerate: np.ndarray
    outcome_names: list


def correlation_report(props: np.ndarray, outcomes: np.ndarray,
                       outcome_names: list | None = None) -> CorrelationReport:
    """Pearson of every outcome column against every cluster proportion.

    Binary labels go through the same formula (point-biserial equivalence).
    Zero-variance cells are flagged, r=0/p=1 recorded, and never fatal.
    """
    props = np.asarray(props, dtype=np.float64)
    outcomes = np.asarray(outcomes, dtype=np.float64)
    if outcomes.ndim == 1:
        outcomes = outcomes[:, None]
    if props.shape[0] != outcomes.shape[0]:
        raise ShapeError(
            f"{props.shape[0]} proportion rows vs {outcomes.shape[0]} outcomes")
    n_out, K = outcomes.shape[1], props.shape[1]
    r = np.zeros((n_out, K))
    p = np.ones((n_out, K))
    degenerate = np.zeros((n_out, K), dtype=bool)
    for i in range(n_out):
        for k in range(K):
            try:
                r[i, k], p[i, k] = pearson(outcomes[:, i], props[:, k])
            except NumericError:
                degenerate[i, k] = True
    names = outcome_names or [f"outcome{i}" for i in range(n_out)]
    return CorrelationReport(r=r, p=p, n=props.shape[0], degenerate=degenerate,
                             outcome_names=list(names))


# ---------------------------------------------------------------------------
# Keypoint and phase frequencies
# ---------------------------------------------------------------------------

def _overlaps(cell: tuple, lo: float, hi: float) -> bool:
    a, b = cell
    return lo < b and a <= hi


def keypoint_frequencies(explanations: list, keypoints: list, fs: float,
                         window_ms: float = 8.0, normalize: str = "cluster",
                         ) -> dict:
    """K x Q table: how often each cluster's cells meet each keypoint.

    A cell "meets" a keypoint when it overlaps the window_ms window centered
    on an occurrence (the whole interval for TP). With normalize="cluster"
    each row divides by the cluster's total cell count; "keypoint" divides
    each column by the number of cells meeting that keypoint anywhere.
    """
    if normalize not in ("cluster", "keypoint"):
        raise ConfigError(f"unknown normalization {normalize!r}")
    if len(explanations) != len(keypoints):
        raise ShapeError("one KeypointSet required per explanation")
    K = explanations[0].assignment.probs.shape[1]
    half = max(0.5, window_ms * fs / 1000.0 / 2.0)
    Q = len(KEYPOINT_COLUMNS)
    hits = np.zeros((K, Q))
    cluster_cells = np.zeros(K)
    keypoint_cells = np.zeros(Q)
    for exp, kp in zip(explanations, keypoints):
        spans: dict = {q: [] for q in KEYPOINT_COLUMNS}
        for r in kp.r_peaks:
            spans["r_peak"].append((r - half, r + half))
        for beat in kp.beats:
            for f in ("p_on", "p_peak", "p_off", "qrs_on", "qrs_off",
                      "t_on", "t_peak", "t_off"):
                v = getattr(beat, f)
                if v is not None:
                    spans[f].append((v - half, v + half))
        spans["TP"] = [(a, b - 1) for a, b in kp.tp_intervals]
        labels = exp.labels
        for j, cell in enumerate(exp.timeline):
            k = labels[j]
            cluster_cells[k] += 1
            for qi, q in enumerate(KEYPOINT_COLUMNS):
                if any(_overlaps(cell, lo, hi) for lo, hi in spans[q]):
                    hits[k, qi] += 1
                    keypoint_cells[qi] += 1
    table = np.zeros((K, Q))
    if normalize == "cluster":
        nz = cluster_cells > 0
        table[nz] = hits[nz] / cluster_cells[nz, None]
    else:
        nz = keypoint_cells > 0
        table[:, nz] = hits[:, nz] / keypoint_cells[None, nz]
    return {"columns": list(KEYPOINT_COLUMNS), "table": table,
            "cluster_cells": cluster_cells}


def _phase_spans(kp) -> dict:
    spans: dict = {q: [] for q in PHASES}
    for beat in kp.beats:
        if beat.p_on is not None and beat.p_off is not None:
            spans["P"].append((beat.p_on, beat.p_off))
        if beat.qrs_on is not None and beat.qrs_off is not None:
            spans["QRS"].append((beat.qrs_on, beat.qrs_off))
        if beat.t_on is not None and beat.t_off is not None:
            spans["T"].append((beat.t_on, beat.t_off))
    spans["TP"] = [(a, b - 1) for a, b in kp.tp_intervals]
    return spans


def phase_frequencies(explanations: list, keypoints: list) -> dict:
    """K x 4 table over whole-wave phases (P, QRS, T, TP), per-cluster rows."""
    if len(explanations) != len(keypoints):
        raise ShapeError("one KeypointSet required per explanation")
    K = explanations[0].assignment.probs.shape[1]
    hits = np.zeros((K, len(PHASES)))
    cluster_cells = np.zeros(K)
    for exp, kp in zip(explanations, keypoints):
        spans = _phase_spans(kp)
        labels = exp.labels
        for j, cell in enumerate(exp.timeline):
            k = labels[j]
            cluster_cells[k] += 1
            for qi, q in enumerate(PHASES):
                if any(_overlaps(cell, lo, hi) for lo, hi in spans[q]):
                    hits[k, qi] += 1
    table = np.zeros_like(hits)
    nz = cluster_cells > 0
    table[nz] = hits[nz] / cluster_cells[nz, None]
    return {"columns": list(PHASES), "table": table, "cluster_cells": cluster_cells}


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def auroc(y_true: np.ndarray, scores: np.ndarray) -> float | None:
    """Area under the ROC curve by the rank statistic; None if one class."""
    y = np.asarray(y_true).astype(int).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="stable")
    ranks = np.empty(y.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    r_pos = ranks[y == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics(y_true: np.ndarray, y_pred: np.ndarray,
            scores: np.ndarray | None = None) -> dict:
    """Binary accuracy/precision/recall/F1 plus AUROC when scores are given."""
    y = np.asarray(y_true).astype(int).ravel()
    yp = np.asarray(y_pred).astype(int).ravel()
    if y.size != yp.size:
        raise ShapeError(f"length mismatch {y.size} vs {yp.size}")
    tp = int(((y == 1) & (yp == 1)).sum())
    fp = int(((y == 0) & (yp == 1)).sum())
    fn = int(((y == 1) & (yp == 0)).sum())
    out = {
        "accuracy": float((y == yp).mean()),
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
    }
    pr = out["precision"] + out["recall"]
    out["f1"] = 2 * out["precision"] * out["recall"] / pr if pr else 0.0
    out["auroc"] = auroc(y, scores) if scores is not None else None
    return out


def multilabel_metrics(Y_true: np.ndarray, Y_pred: np.ndarray,
                       scores: np.ndarray | None = None) -> dict:
    """Per-label metrics plus macro averages over labels where defined."""
    Y_true = np.atleast_2d(np.asarray(Y_true))
    Y_pred = np.atleast_2d(np.asarray(Y_pred))
    per_label = []
    for j in range(Y_true.shape[1]):
        s = scores[:, j] if scores is not None else None
        per_label.append(metrics(Y_true[:, j], Y_pred[:, j], s))
    macro = {}
    for key in METRIC_ROWS:
        vals = [m[key] for m in per_label if m[key] is not None]
        macro[key] = float(np.mean(vals)) if vals else None
    return {"macro": macro, "per_label": per_label}


# ---------------------------------------------------------------------------
# Cross-validation
# ---------------------------------------------------------------------------

def _stratified_folds(strat: np.ndarray, folds: int, rng) -> np.ndarray:
    """Fold id per sample; classes spread round-robin after a seeded shuffle."""
    n = strat.shape[0]
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for cls in np.unique(strat):
        members = np.flatnonzero(strat == cls)
        members = members[rng.permutation(members.size)]
        for i, idx in enumerate(members):
            fold_of[idx] = (offset + i) % folds
        offset += members.size
    return fold_of


def cross_validate(X: np.ndarray, Y: np.ndarray, folds: int = 5,
                   repeats: int = 3, seed: int = 0, **rf_cfg) -> dict:
    """Repeated stratified k-fold of a per-label random forest.

    Rows are put in a canonical (sorted) order first, so shuffling of the
    input does not change the folds. Returns macro metric means over all
    folds x repeats runs.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y).astype(int)
    if Y.ndim == 1:
        Y = Y[:, None]
    n = X.shape[0]
    if n < folds:
        raise ConfigError(f"need at least folds={folds} samples, got {n}")
    canon = np.lexsort(X.T[::-1])
    X, Y = X[canon], Y[canon]
    strat = Y[:, 0]
    counts = np.bincount(strat)
    if counts.min() < folds:
        warnings.warn("a stratum is smaller than the fold count; "
                      "falling back to unstratified folds")
        strat = np.zeros(n, dtype=int)
    rng = np.random.default_rng(seed)
    sums = {key: 0.0 for key in METRIC_ROWS}
    have = {key: 0 for key in METRIC_ROWS}
    n_runs = 0
    for _ in range(repeats):
        fold_of = _stratified_folds(strat, folds, rng)
        for f in range(folds):
            test = fold_of == f
            train = ~test
            model = multilabel_fit(X[train], Y[train],
                                   seed=seed + n_runs, **rf_cfg)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                proba = multilabel_predict_proba(model, X[test])
            result = multilabel_metrics(Y[test], (proba >= 0.5).astype(int), proba)
            for key in METRIC_ROWS:
                if result["macro"][key] is not None:
                    sums[key] += result["macro"][key]
                    have[key] += 1
            n_runs += 1
    out = {key: (sums[key] / have[key] if have[key] else None)
           for key in METRIC_ROWS}
    out["n_runs"] = n_runs
    return out


# ---------------------------------------------------------------------------
# Uncertainty by phase
# ---------------------------------------------------------------------------

def uncertainty_by_phase(explanations: list, keypoints: list, groups: list,
                         task: str = "classification", bin_years: float = 5.0,
                         temperature: float = 10.0, temperature_exponent: int = 1,
                         ) -> dict:
    """Mean contrast-transformed entropy per wave phase, per outcome group.

    Classification groups by the given label; regression bins the given
    value into bin_years-wide bins. Phases with no cells are absent.
    """
    if task not in ("classification", "regression"):
        raise ConfigError(f"unknown task {task!r}")
    if not (len(explanations) == len(keypoints) == len(groups)):
        raise ShapeError("explanations, keypoints, and groups must align")
    acc: dict = {}
    cnt: dict = {}
    for exp, kp, g in zip(explanations, keypoints, groups):
        if task == "classification":
            key = int(g)
        else:
            lo = int(np.floor(float(g) / bin_years) * bin_years)
            key = f"{lo}-{lo + int(bin_years)}"
        v = contrast_transform(exp.entropy, temperature=temperature,
                               temperature_exponent=temperature_exponent)
        spans = _phase_spans(kp)
        for phase in PHASES:
            vals = [v[j] for j, cell in enumerate(exp.timeline)
                    if any(_overlaps(cell, lo, hi) for lo, hi in spans[phase])]
            if vals:
                acc[(phase, key)] = acc.get((phase, key), 0.0) + float(np.sum(vals))
                cnt[(phase, key)] = cnt.get((phase, key), 0) + len(vals)
    out: dict = {phase: {} for phase in PHASES}
    for (phase, key), total in acc.items():
        out[phase][key] = total / cnt[(phase, key)]
    return {phase: grp for phase, grp in out.items() if grp}


# ---------------------------------------------------------------------------
# Ablation grids
# ---------------------------------------------------------------------------

DEFAULT_SIZES = (50, 100, 200, 500, 1000, 1500, "all")
DEFAULT_KS = (5, 10, 20, 50, 100)


def _proportion_matrix(bundle, model, records, taps):
    return np.stack([proportions(explain(bundle, model, r, taps=taps))
                     for r in records])


def ablation_grid(bundle, fit_corpus: list, eval_corpus: list,
                  eval_labels: np.ndarray, taps: list | None = None,
                  sizes: tuple = DEFAULT_SIZES, Ks: tuple = DEFAULT_KS,
                  K: int = 20, seed: int = 0, folds: int = 5, repeats: int = 3,
                  n_init: int = 10, **rf_cfg) -> dict:
    """Sweep explainer-fit subset size and cluster count independently.

    Each cell fits an explainer (seeded subset of fit_corpus), computes
    proportions on eval_corpus, and cross-validates a forest against
    eval_labels. Returns {"by_size": table, "by_k": table} where a table is
    {"columns": [...], "rows": {metric: [...]}}.
    """
    eval_labels = np.asarray(eval_labels).astype(int)
    rng = np.random.default_rng(seed)

    def run_cell(subset_size, k_clusters):
        if subset_size == "all" or subset_size >= len(fit_corpus):
            subset = list(fit_corpus)
        else:
            idx = rng.choice(len(fit_corpus), size=int(subset_size), replace=False)
            subset = [fit_corpus[i] for i in idx]
        model = fit_explainer(bundle, subset, taps=taps, K=k_clusters, seed=seed,
                              n_init=n_init)
        props = _proportion_matrix(bundle, model, eval_corpus, taps)
        return cross_validate(props, eval_labels, folds=folds, repeats=repeats,
                              seed=seed, **rf_cfg)

    by_size = {"columns": [], "rows": {m: [] for m in METRIC_ROWS}}
    for size in sizes:
        if size != "all" and size > len(fit_corpus):
            continue
        cell = run_cell(size, K)
        by_size["columns"].append(str(size))
        for m in METRIC_ROWS:
            by_size["rows"][m].append(cell[m])

    by_k = {"columns": [], "rows": {m: [] for m in METRIC_ROWS}}
    for k_clusters in Ks:
        cell = run_cell("all", k_clusters)
        by_k["columns"].append(str(k_clusters))
        for m in METRIC_ROWS:
            by_k["rows"][m].append(cell[m])

    return {"by_size": by_size, "by_k": by_k}


# ---------------------------------------------------------------------------
# Age-group trends
# ---------------------------------------------------------------------------

def age_group_trends(props: np.ndarray, predicted_age: np.ndarray,
                     cluster_groups: dict) -> dict:
    """Per cluster group: summed-proportion points over predicted age, a
    least-squares line, and the Pearson r/p of the trend."""
    props = np.asarray(props, dtype=np.float64)
    age = np.asarray(predicted_age, dtype=np.float64).ravel()
    if props.shape[0] != age.size:
        raise ShapeError(f"{props.shape[0]} proportion rows vs {age.size} ages")
    out = {}
    for name, members in cluster_groups.items():
        members = list(members)
        if not members:
            raise ConfigError(f"cluster group {name!r} is empty")
        y = props[:, members].sum(axis=1)
        xd = age - age.mean()
        denom = (xd * xd).sum()
        if denom == 0:
            raise NumericError("predicted ages are all identical")
        slope = float((xd * (y - y.mean())).sum() / denom)
        intercept = float(y.mean() - slope * age.mean())
        if y.std() == 0:
            r, p = 0.0, 1.0
        else:
            r, p = pearson(age, y)
        out[name] = {"points": np.column_stack([age, y]), "slope": slope,
                     "intercept": intercept, "r": r, "p": p}
    return out


# ---------------------------------------------------------------------------
# Head-to-head prediction benchmark
# ---------------------------------------------------------------------------

BENCH_COLUMNS = ("resnet_labels", "rf_signal_labels", "rf_signal_pred",
                 "rf_cluster_labels", "rf_cluster_pred")


def prediction_benchmark(bundle, model, records: list, taps: list | None = None,
                         seed: int = 0, folds: int = 5, repeats: int = 3,
                         **rf_cfg) -> dict:
    """Compare the CNN against forests on raw signals vs cluster proportions.

    Columns: the CNN scored on true labels, then forests on raw flattened
    signals and on cluster proportions, each against both the true labels
    and the CNN's own predictions. Rows are macro metrics.
    """
    Y_true = np.stack([r.labels for r in records]).astype(int)
    outputs = np.stack([forward(bundle, r, taps=[])[0] for r in records])
    Y_pred = (outputs >= 0.5).astype(int)
    X_sig = raw_signal_features(records)
    props = _proportion_matrix(bundle, model, records, taps)

    resnet = multilabel_metrics(Y_true, Y_pred, outputs)["macro"]
    cols = {
        "resnet_labels": resnet,
        "rf_signal_labels": cross_validate(X_sig, Y_true, folds=folds,
                                           repeats=repeats, seed=seed, **rf_cfg),
        "rf_signal_pred": cross_validate(X_sig, Y_pred, folds=folds,
                                         repeats=repeats, seed=seed, **rf_cfg),
        "rf_cluster_labels": cross_validate(props, Y_true, folds=folds,
                                            repeats=repeats, seed=seed, **rf_cfg),
        "rf_cluster_pred": cross_validate(props, Y_pred, folds=folds,
                                          repeats=repeats, seed=seed, **rf_cfg),
    }
    rows = {m: [cols[c][m] for c in BENCH_COLUMNS] for m in METRIC_ROWS}
    return {"columns": list(BENCH_COLUMNS), "rows": rows}


# ---------------------------------------------------------------------------
# Table rendering
# ---------------------------------------------------------------------------

def table_to_csv(table: dict) -> str:
    lines = ["metric," + ",".join(table["columns"])]
    for m, vals in table["rows"].items():
        cells = ["" if v is None else f"{v:.4f}" for v in vals]
        lines.append(m + "," + ",".join(cells))
    return "\n".join(lines) + "\n"


def table_to_text(table: dict) -> str:
    cols = table["columns"]
    width = max(12, *(len(c) + 2 for c in cols))
    head = "metric".ljust(10) + "".join(c.rjust(width) for c in cols)
    lines = [head, "-" * len(head)]
    for m, vals in table["rows"].items():
        cells = "".join(("" if v is None else f"{v:.4f}").rjust(width) for v in vals)
        lines.append(m.ljust(10) + cells)
    return "\n".join(lines) + "\n"
