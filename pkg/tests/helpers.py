"""Independent oracle implementations used to cross-check the package.

Everything here is written as plainly as possible (loops, closed forms,
exhaustive search) so the main code is tested against a second route, not
against itself.
"""

import itertools
import math

import numpy as np


def brute_force_kmeans2(data):
    """Exhaustive optimum inertia over all 2-partitions of small data sets."""
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    best = np.inf
    for bits in itertools.product((0, 1), repeat=n):
        groups = [[i for i in range(n) if bits[i] == g] for g in (0, 1)]
        if not groups[0] or not groups[1]:
            continue
        inertia = 0.0
        for members in groups:
            centroid = data[members].mean(axis=0)
            inertia += float(((data[members] - centroid) ** 2).sum())
        best = min(best, inertia)
    return best


def naive_soft_assign(data, centroids, tau):
    """Row-by-row softmax of negative squared distances, plain loops."""
    data = np.asarray(data, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    D, K = data.shape[0], centroids.shape[0]
    probs = np.zeros((D, K))
    for t in range(D):
        logits = []
        for k in range(K):
            d2 = 0.0
            for c in range(data.shape[1]):
                d2 += (data[t, c] - centroids[k, c]) ** 2
            logits.append(-d2 / tau)
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        s = sum(ex)
        probs[t] = [v / s for v in ex]
    labels = np.array([int(np.argmax(probs[t])) for t in range(D)])
    ent = np.array([
        -sum(p * math.log(p) for p in probs[t] if p > 0) for t in range(D)
    ])
    return probs, labels, ent


def random_params(arch, seed, scale=0.3):
    """Gaussian tensors of the right shapes for every layer in ``arch``."""
    rng = np.random.default_rng(seed)
    params = {}

    def fill(layers):
        for spec in layers:
            kind, name = spec["type"], spec["name"]
            if kind == "conv1d":
                fan = spec["in_ch"] * spec["kernel"]
                params[f"{name}.weight"] = rng.normal(
                    0, scale / math.sqrt(fan),
                    size=(spec["out_ch"], spec["in_ch"], spec["kernel"]))
                params[f"{name}.bias"] = rng.normal(0, 0.05, size=spec["out_ch"])
            elif kind == "batchnorm":
                ch = spec["ch"]
                params[f"{name}.gamma"] = rng.uniform(0.7, 1.3, size=ch)
                params[f"{name}.beta"] = rng.normal(0, 0.05, size=ch)
                params[f"{name}.mean"] = rng.normal(0, 0.1, size=ch)
                params[f"{name}.var"] = rng.uniform(0.5, 1.5, size=ch)
            elif kind == "dense":
                params[f"{name}.weight"] = rng.normal(
                    0, scale / math.sqrt(spec["in"]), size=(spec["out"], spec["in"]))
                params[f"{name}.bias"] = rng.normal(0, 0.05, size=spec["out"])
            elif kind == "residual_block":
                fill(spec["inner"])
                if spec.get("skip") is not None:
                    fill([spec["skip"]])

    fill(arch)
    return {k: np.asarray(v, dtype=np.float32) for k, v in params.items()}


def small_arch(L=32, c_in=3, n_out=2, head="linear", seed_names="a"):
    """A conv + relu + maxpool + dense net small enough for finite differences."""
    p = seed_names
    arch = [
        {"type": "conv1d", "name": f"{p}conv", "in_ch": c_in, "out_ch": 4,
         "kernel": 5, "stride": 1, "pad": 2},
        {"type": "batchnorm", "name": f"{p}bn", "ch": 4, "eps": 1e-5},
        {"type": "relu", "name": f"{p}relu"},
        {"type": "maxpool", "name": f"{p}pool", "kernel": 2, "stride": 2},
        {"type": "flatten", "name": f"{p}flat"},
        {"type": "dense", "name": f"{p}fc", "in": (L // 2) * 4, "out": n_out},
        {"type": head, "name": f"{p}head"},
    ]
    meta = {"input_length": L, "input_channels": c_in,
            "tap_names": [f"{p}relu"], "head": head}
    return arch, meta


def fd_grad_wrt_activation(run_tail, act, target_index, h=1e-3):
    """Central-difference gradient of run_tail(act)[target_index]."""
    act = np.asarray(act, dtype=np.float64)
    grad = np.zeros_like(act)
    it = np.nditer(act, flags=["multi_index"])
    while not it.finished:
        ij = it.multi_index
        plus = act.copy()
        plus[ij] += h
        minus = act.copy()
        minus[ij] -= h
        grad[ij] = (run_tail(plus)[target_index] - run_tail(minus)[target_index]) / (2 * h)
        it.iternext()
    return grad


def naive_layer(spec, params, x):
    """Plain-loop forward of one layer; float64 lists-of-lists style."""
    kind, name = spec["type"], spec["name"]
    x = np.asarray(x, dtype=np.float64)
    if kind == "conv1d":
        W = np.asarray(params[f"{name}.weight"], np.float64)
        b = np.asarray(params[f"{name}.bias"], np.float64)
        k, stride, pad = spec["kernel"], spec["stride"], spec["pad"]
        L, cin = x.shape
        cout = W.shape[0]
        Lout = (L + 2 * pad - k) // stride + 1
        y = np.zeros((Lout, cout))
        for t in range(Lout):
            for o in range(cout):
                acc = b[o]
                for kk in range(k):
                    src = t * stride + kk - pad
                    if 0 <= src < L:
                        for i in range(cin):
                            acc += W[o, i, kk] * x[src, i]
                y[t, o] = acc
        return y
    if kind == "batchnorm":
        g = np.asarray(params[f"{name}.gamma"], np.float64)
        be = np.asarray(params[f"{name}.beta"], np.float64)
        mu = np.asarray(params[f"{name}.mean"], np.float64)
        var = np.asarray(params[f"{name}.var"], np.float64)
        y = np.zeros_like(x)
        for t in range(x.shape[0]):
            for c in range(x.shape[1]):
                y[t, c] = g[c] * (x[t, c] - mu[c]) / math.sqrt(var[c] + spec["eps"]) + be[c]
        return y
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "maxpool":
        k, stride = spec["kernel"], spec["stride"]
        Lout = (x.shape[0] - k) // stride + 1
        y = np.zeros((Lout, x.shape[1]))
        for t in range(Lout):
            for c in range(x.shape[1]):
                y[t, c] = max(x[t * stride + j, c] for j in range(k))
        return y
    if kind == "residual_block":
        y = x
        for inner in spec["inner"]:
            y = naive_layer(inner, params, y)
        skip = x if spec.get("skip") is None else naive_layer(spec["skip"], params, x)
        return y + skip
    if kind == "flatten":
        out = []
        for c in range(x.shape[1]):
            for t in range(x.shape[0]):
                out.append(x[t, c])
        return np.asarray(out)
    if kind == "dense":
        W = np.asarray(params[f"{name}.weight"], np.float64)
        b = np.asarray(params[f"{name}.bias"], np.float64)
        return np.array([b[o] + sum(W[o, i] * x[i] for i in range(len(x)))
                         for o in range(W.shape[0])])
    if kind == "sigmoid":
        return np.array([1.0 / (1.0 + math.exp(-v)) for v in np.atleast_1d(x)])
    if kind == "linear":
        return x
    raise ValueError(kind)


def naive_forward_taps(arch, params, x, taps):
    """Run the naive layers, returning (output, {tap: activation})."""
    acts = {}
    out = x
    for spec in arch:
        out = naive_layer(spec, params, out)
        if spec["name"] in taps:
            acts[spec["name"]] = np.asarray(out, dtype=np.float64)
    return out, acts


def naive_upsample(mat, D):
    mat = np.asarray(mat, dtype=np.float64)
    d, c = mat.shape
    if D == d:
        return mat.copy()
    if d == 1:
        return np.repeat(mat, D, axis=0)
    out = np.zeros((D, c))
    for j in range(D):
        pos = j * (d - 1) / (D - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, d - 1)
        f = pos - lo
        for ch in range(c):
            out[j, ch] = mat[lo, ch] * (1 - f) + mat[hi, ch] * f
    return out


def naive_collate(acts_in_order):
    """acts_in_order: list of (d_i, matrix). Returns the D x C feature rows."""
    D = acts_in_order[0][1].shape[0]
    blocks = []
    for d_i, mat in acts_in_order:
        up = naive_upsample(mat, D)
        for t in range(D):
            norm = math.sqrt(sum(v * v for v in up[t]))
            if norm > 0:
                up[t] = up[t] / norm
            up[t] = up[t] / (1.0 + d_i)
        blocks.append(up)
    return np.concatenate(blocks, axis=1)


def naive_explain(arch, params, x, taps, centroids, tau):
    """Full independent pipeline: loops end to end, centroids given."""
    _, acts = naive_forward_taps(arch, params, np.asarray(x, np.float64), taps)
    ordered = [(acts[t].shape[0], acts[t]) for t in taps]
    rows = naive_collate(ordered)
    return naive_soft_assign(rows, centroids, tau)


def cart_oracle_tree(X, y, min_leaf=1, max_depth=None):
    """Greedy Gini CART with plain loops and exact rational gains.

    Returns nested tuples ("leaf", p1) / ("node", f, thr, left, right).
    Gains use fractions.Fraction so analytic ties are exact; acceptance
    mirrors production: strictly positive gain, best wins, ties keep the
    lowest feature then lowest threshold.
    """
    from fractions import Fraction

    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)

    def gini_of(pos, n):
        if n == 0:
            return Fraction(0)
        p1 = Fraction(int(pos), int(n))
        return 1 - p1 * p1 - (1 - p1) * (1 - p1)

    def build(rows, depth):
        labs = [int(y[i]) for i in rows]
        n = len(rows)
        if all(v == labs[0] for v in labs) or n < 2 * min_leaf or \
                (max_depth is not None and depth >= max_depth):
            return ("leaf", sum(labs) / n)
        parent = gini_of(sum(labs), n)
        best = None
        best_gain = Fraction(0)
        for f in range(X.shape[1]):
            vals = sorted(set(float(X[i, f]) for i in rows))
            for a, b in zip(vals[:-1], vals[1:]):
                thr = 0.5 * (a + b)
                left = [i for i in rows if X[i, f] <= thr]
                right = [i for i in rows if X[i, f] > thr]
                if min_leaf > 1 and (len(left) < min_leaf or len(right) < min_leaf):
                    continue
                lpos = sum(int(y[i]) for i in left)
                rpos = sum(labs) - lpos
                gain = parent \
                    - Fraction(len(left), n) * gini_of(lpos, len(left)) \
                    - Fraction(len(right), n) * gini_of(rpos, len(right))
                if gain > best_gain:
                    best_gain = gain
                    best = (f, thr, left, right)
        if best is None:
            return ("leaf", sum(labs) / n)
        f, thr, left, right = best
        return ("node", f, thr, build(left, depth + 1), build(right, depth + 1))

    return build(list(range(X.shape[0])), 0)


def partition_signature(labels):
    """Canonical form of a clustering, invariant to label permutation."""
    mapping = {}
    out = []
    for lab in labels:
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out.append(mapping[lab])
    return tuple(out)


def pvalue_by_quadrature(r, n):
    """Two-sided p for a correlation via numeric integration of the t pdf.

    Independent of the incomplete-beta route: builds the density from
    lgamma and integrates the tail with scipy.integrate.quad.
    """
    import math

    from scipy.integrate import quad

    df = n - 2
    t = abs(r) * math.sqrt(df / (1.0 - r * r))
    lognorm = math.lgamma((df + 1) / 2.0) - math.lgamma(df / 2.0) \
        - 0.5 * math.log(df * math.pi)

    def pdf(x):
        return math.exp(lognorm - (df + 1) / 2.0 * math.log1p(x * x / df))

    tail, _ = quad(pdf, t, math.inf)
    return 2.0 * tail


def auroc_by_pairs(y, scores):
    """Exhaustive pair-counting AUROC (ties worth one half)."""
    pos = [s for s, t in zip(scores, y) if t == 1]
    neg = [s for s, t in zip(scores, y) if t == 0]
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def line_fit_by_normal_equations(x, y):
    """Least-squares slope/intercept from the 2x2 normal equations."""
    import numpy as _np

    A = _np.array([[len(x), sum(x)], [sum(x), sum(v * v for v in x)]],
                  dtype=_np.float64)
    b = _np.array([sum(y), sum(u * v for u, v in zip(x, y))], dtype=_np.float64)
    intercept, slope = _np.linalg.solve(A, b)
    return float(slope), float(intercept)
