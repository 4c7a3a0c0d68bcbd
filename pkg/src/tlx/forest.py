"""Random forest: bagged CART trees with Gini splits, built from scratch.

Used downstream to compare label predictability from cluster proportions
against raw flattened signals. Trees store leaf class frequencies so the
forest can emit calibrated-ish probabilities for ranking metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    freq: np.ndarray | None = None  # leaf: class frequency vector, sums to 1

    @property
    def is_leaf(self) -> bool:
        return self.freq is not None


@dataclass
class Forest:
    trees: list
    n_features: int
    n_trees: int
    max_features: int
    seed: int
    oob_error: float | None = None


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p * p).sum())


def _best_split(X: np.ndarray, y: np.ndarray, feature_ids: np.ndarray,
                min_leaf: int) -> tuple[int, float, float] | None:
    """Highest-Gini-gain (feature, threshold) over candidate features.

    Thresholds are midpoints between consecutive distinct sorted values;
    counts come from prefix sums over the sorted labels, so each feature
    costs one argsort.
    """
    n = y.shape[0]
    total = np.bincount(y, minlength=2).astype(np.float64)
    parent = _gini(total)
    best = None
    best_gain = 1e-12  # only accept strictly useful splits
    for f in feature_ids:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        left_pos = np.cumsum(ys)[:-1].astype(np.float64)
        left_n = np.arange(1, n, dtype=np.float64)
        boundary = xs[1:] != xs[:-1]
        if min_leaf > 1:
            boundary &= (left_n >= min_leaf) & (n - left_n >= min_leaf)
        idx = np.flatnonzero(boundary)
        if idx.size == 0:
            continue
        lp = left_pos[idx]
        ln = left_n[idx]
        rp = total[1] - lp
        rn = n - ln
        gini_l = 1.0 - ((lp / ln) ** 2 + ((ln - lp) / ln) ** 2)
        gini_r = 1.0 - ((rp / rn) ** 2 + ((rn - rp) / rn) ** 2)
        gain = parent - (ln / n) * gini_l - (rn / n) * gini_r
        j = int(np.argmax(gain))
        if gain[j] > best_gain:
            best_gain = float(gain[j])
            pos = idx[j]
            thr = 0.5 * (xs[pos] + xs[pos + 1])
            best = (int(f), float(thr), best_gain)
    return best


def _leaf(y: np.ndarray) -> TreeNode:
    counts = np.bincount(y, minlength=2).astype(np.float64)
    return TreeNode(freq=counts / counts.sum())


def _grow(X, y, rng, max_features, max_depth, min_leaf, depth=0) -> TreeNode:
    if (y == y[0]).all() or y.shape[0] < 2 * min_leaf or \
            (max_depth is not None and depth >= max_depth):
        return _leaf(y)
    feature_ids = np.sort(rng.choice(X.shape[1], size=min(max_features, X.shape[1]),
                                     replace=False))
    split = _best_split(X, y, feature_ids, min_leaf)
    if split is None:
        return _leaf(y)
    f, thr, _ = split
    mask = X[:, f] <= thr
    if not mask.any() or mask.all():
        return _leaf(y)
    left = _grow(X[mask], y[mask], rng, max_features, max_depth, min_leaf, depth + 1)
    right = _grow(X[~mask], y[~mask], rng, max_features, max_depth, min_leaf, depth + 1)
    return TreeNode(feature=f, threshold=thr, left=left, right=right)


def _tree_predict(node: TreeNode, X: np.ndarray) -> np.ndarray:
    """Positive-class frequency of the leaf each row lands in."""
    out = np.empty(X.shape[0])
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf:
            out[idx] = nd.freq[1]
            continue
        mask = X[idx, nd.feature] <= nd.threshold
        stack.append((nd.left, idx[mask]))
        stack.append((nd.right, idx[~mask]))
    return out


def rf_fit(X: np.ndarray, y: np.ndarray, n_trees: int = 100,
           max_features: int | None = None, max_depth: int | None = None,
           min_leaf: int = 1, seed: int = 0, bootstrap: bool = True,
           track_oob: bool = False) -> Forest:
    """Fit bagged CART trees on binary labels; deterministic given seed."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64).ravel()
    if X.ndim != 2:
        raise ShapeError(f"X must be 2-d, got {X.shape}")
    if y.shape[0] != X.shape[0]:
        raise ShapeError(f"{X.shape[0]} rows but {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise ConfigError("need at least 2 samples")
    if not np.isin(y, (0, 1)).all():
        raise ConfigError("labels must be binary 0/1")
    if (y == y[0]).all():
        raise ConfigError("both classes must be present in y")
    n, F = X.shape
    if max_features is None:
        max_features = int(np.ceil(np.sqrt(F)))
    rng = np.random.default_rng(seed)
    trees = []
    oob_votes = np.zeros(n)
    oob_counts = np.zeros(n)
    for _ in range(n_trees):
        if bootstrap:
            idx = rng.integers(0, n, size=n)
        else:
            idx = np.arange(n)
        Xb, yb = X[idx], y[idx]
        if (yb == yb[0]).all():
            trees.append(_leaf(yb))
            continue
        tree = _grow(Xb, yb, rng, max_features, max_depth, min_leaf)
        trees.append(tree)
        if track_oob and bootstrap:
            out = np.setdiff1d(np.arange(n), idx, assume_unique=False)
            if out.size:
                oob_votes[out] += _tree_predict(tree, X[out])
                oob_counts[out] += 1
    oob_error = None
    if track_oob and bootstrap:
        seen = oob_counts > 0
        if seen.any():
            pred = (oob_votes[seen] / oob_counts[seen]) >= 0.5
            oob_error = float((pred != y[seen].astype(bool)).mean())
    return Forest(trees=trees, n_features=F, n_trees=n_trees,
                  max_features=max_features, seed=seed, oob_error=oob_error)


def rf_predict_proba(forest: Forest, X: np.ndarray) -> np.ndarray:
    """Mean positive-class leaf frequency over all trees, in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != forest.n_features:
        raise ShapeError(
            f"X must be (N, {forest.n_features}), got {X.shape}")
    acc = np.zeros(X.shape[0])
    for tree in forest.trees:
        acc += _tree_predict(tree, X)
    return acc / len(forest.trees)


def rf_predict(forest: Forest, X: np.ndarray) -> np.ndarray:
    return (rf_predict_proba(forest, X) >= 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# Multilabel wrapper
# ---------------------------------------------------------------------------

@dataclass
class MultilabelForest:
    forests: list  # Forest or float (constant probability for one-class labels)
    n_labels: int


def multilabel_fit(X: np.ndarray, Y: np.ndarray, **cfg) -> MultilabelForest:
    """One independent binary forest per label column.

    A column with a single class present cannot be learned; it is predicted
    as that constant frequency (with a warning) rather than failing the run.
    """
    Y = np.asarray(Y).astype(np.int64)
    if Y.ndim != 2:
        raise ShapeError(f"Y must be (N, n_labels), got {Y.shape}")
    forests = []
    for j in range(Y.shape[1]):
        col = Y[:, j]
        if (col == col[0]).all():
            import warnings
            warnings.warn(f"label {j} has a single class; predicting constant")
            forests.append(float(col[0]))
        else:
            seed = int(cfg.get("seed", 0)) + 1000 * j
            forests.append(rf_fit(X, col, **{**cfg, "seed": seed}))
    return MultilabelForest(forests=forests, n_labels=Y.shape[1])


def multilabel_predict_proba(model: MultilabelForest, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    cols = []
    for f in model.forests:
        if isinstance(f, float):
            cols.append(np.full(X.shape[0], f))
        else:
            cols.append(rf_predict_proba(f, X))
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------------------
# Raw-signal featurization
# ---------------------------------------------------------------------------

def raw_signal_features(records: list, max_features: int = 2000) -> np.ndarray:
    """Flatten each record's samples, decimating time to stay under the cap."""
    if not records:
        raise ConfigError("no records")
    L = records[0].length
    n_ch = records[0].samples.shape[1]
    step = 1
    while (L // step) * n_ch > max_features:
        step += 1
    out = np.stack([r.samples[::step, :].reshape(-1) for r in records])
    return out.astype(np.float64)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _node_to_obj(node: TreeNode):
    if node.is_leaf:
        return {"freq": [float(v) for v in node.freq]}
    return {"feature": node.feature, "threshold": node.threshold,
            "left": _node_to_obj(node.left), "right": _node_to_obj(node.right)}


def _node_from_obj(obj) -> TreeNode:
    if "freq" in obj:
        return TreeNode(freq=np.asarray(obj["freq"], dtype=np.float64))
    return TreeNode(feature=int(obj["feature"]), threshold=float(obj["threshold"]),
                    left=_node_from_obj(obj["left"]),
                    right=_node_from_obj(obj["right"]))


def save_forest(forest: Forest, path: str | Path) -> None:
    obj = {
        "n_features": forest.n_features,
        "n_trees": forest.n_trees,
        "max_features": forest.max_features,
        "seed": forest.seed,
        "oob_error": forest.oob_error,
        "trees": [_node_to_obj(t) for t in forest.trees],
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def load_forest(path: str | Path) -> Forest:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"no such forest file: {p}")
    obj = json.loads(p.read_text(encoding="utf-8"))
    return Forest(trees=[_node_from_obj(t) for t in obj["trees"]],
                  n_features=int(obj["n_features"]), n_trees=int(obj["n_trees"]),
                  max_features=int(obj["max_features"]), seed=int(obj["seed"]),
                  oob_error=obj.get("oob_error"))
