"""K-means clustering with soft assignments and entropy.

The fitted model turns a D×C feature matrix into a row-stochastic D×K
probability matrix (softmax of negative squared centroid distances), a hard
label per row, and the per-row entropy used as an uncertainty score.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError, ShapeError


@dataclass
class ExplainerModel:
    """Fitted centroids plus the temperature used for soft assignment."""

    centroids: np.ndarray
    tau: float = 1.0
    inertia: float = 0.0
    fit_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ConfigError("centroids must be a K x C matrix with K >= 2")
        if not np.isfinite(self.centroids).all():
            raise NumericError("non-finite centroids")
        if not (self.tau > 0):
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.inertia < 0:
            raise NumericError(f"negative inertia {self.inertia}")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def C(self) -> int:
        return self.centroids.shape[1]


@dataclass
class Assignment:
    """Soft and hard cluster assignment of D feature rows."""

    probs: np.ndarray
    labels: np.ndarray
    entropy: np.ndarray

    def __post_init__(self):
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-6):
            raise NumericError("assignment rows must sum to 1")
        if (self.probs < 0).any():
            raise NumericError("negative assignment probabilities")
        if (self.entropy < -1e-12).any():
            raise NumericError("negative entropy")


def _sq_dists(data: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (N, K), via the expansion trick."""
    d2 = (
        np.einsum("nc,nc->n", data, data)[:, None]
        - 2.0 * data @ centroids.T
        + np.einsum("kc,kc->k", centroids, centroids)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kpp_seed(data: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ initial centroids."""
    n = data.shape[0]
    centroids = np.empty((K, data.shape[1]))
    centroids[0] = data[rng.integers(n)]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            centroids[k:] = data[rng.integers(n, size=K - k)]
            break
        probs = d2 / total
        centroids[k] = data[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((data - centroids[k]) ** 2, axis=1))
    return centroids


def _lloyd(data: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float
           ) -> tuple[np.ndarray, float, int]:
    K = centroids.shape[0]
    prev_inertia = np.inf
    n_iters = 0
    for _ in range(max_iter):
        n_iters += 1
        d2 = _sq_dists(data, centroids)
        labels = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(data.shape[0]), labels].sum())
        assert inertia <= prev_inertia + 1e-9 * max(1.0, prev_inertia), \
            "inertia increased during Lloyd iteration"
        prev_inertia = inertia
        new_centroids = centroids.copy()
        for k in range(K):
            members = labels == k
            if members.any():
                new_centroids[k] = data[members].mean(axis=0)
            else:
                # keep K fixed: restart the empty cluster at the worst-fit point
                far = int(np.argmax(d2[np.arange(data.shape[0]), labels]))
                new_centroids[k] = data[far]
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    d2 = _sq_dists(data, centroids)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(data.shape[0]), labels].sum())
    return centroids, inertia, n_iters


def kmeans_fit(data: np.ndarray, K: int, seed: int = 0, max_iter: int = 300,
               tol: float = 1e-6, tau: float = 1.0, n_init: int = 10) -> ExplainerModel:
    """Fit K centroids by k-means++ seeding and Lloyd iterations.

    Runs ``n_init`` independent seedings and keeps the lowest-inertia fit;
    empty clusters are re-seeded at the farthest point. Deterministic given
    ``seed``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ShapeError(f"data must be 2-d, got shape {data.shape}")
    if not np.isfinite(data).all():
        raise NumericError("non-finite values in clustering data")
    n = data.shape[0]
    if K < 2:
        raise ConfigError(f"K must be >= 2, got {K}")
    if n < K:
        raise ConfigError(f"need at least K={K} samples, got {n}")
    rng = np.random.default_rng(seed)
    best: tuple[np.ndarray, float, int] | None = None
    for _ in range(max(1, n_init)):
        init = _kpp_seed(data, K, rng)
        centroids, inertia, n_iters = _lloyd(data, init, max_iter, tol)
        if best is None or inertia < best[1]:
            best = (centroids, inertia, n_iters)
    centroids, inertia, n_iters = best
    return ExplainerModel(
        centroids=centroids, tau=tau, inertia=inertia,
        fit_meta={"n_samples": int(n), "n_iters": int(n_iters), "seed": int(seed)},
    )


def soft_assign(model: ExplainerModel, data: np.ndarray) -> Assignment:
    """Softmax of negative squared centroid distances, row per sample.

    probs[t,k] = exp(-d²(x_t, c_k)/tau) / Σ_j exp(-d²(x_t, c_j)/tau), computed
    with max-subtraction. Labels are the argmax (ties to the lowest index),
    entropy uses the natural log with 0·ln 0 = 0.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != model.C:
        raise ShapeError(
            f"data must be (D, {model.C}), got {data.shape}")
    logits = -_sq_dists(data, model.centroids) / model.tau
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    labels = np.argmax(probs, axis=1).astype(np.int64)
    return Assignment(probs=probs, labels=labels, entropy=entropy(probs))


def entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats of each row, with 0·ln 0 treated as 0."""
    probs = np.asarray(probs, dtype=np.float64)
    plogp = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    out = -plogp.sum(axis=-1)
    return np.maximum(out, 0.0)


# ---------------------------------------------------------------------------
# Model file format
# ---------------------------------------------------------------------------

_MODEL_MAGIC = b"TLXC"
_MODEL_VERSION = 1


def save_model(model: ExplainerModel, path: str | Path) -> None:
    """Write centroids and metadata; fit_meta goes to a JSON sidecar."""
    path = Path(path)
    blob = struct.pack("<4sIIIdd", _MODEL_MAGIC, _MODEL_VERSION, model.K, model.C,
                       model.tau, model.inertia)
    blob += model.centroids.astype("<f4").tobytes()
    path.write_bytes(blob)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(model.fit_meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> ExplainerModel:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such model file: {path}")
    buf = path.read_bytes()
    head_fmt = "<4sIIIdd"
    head_len = struct.calcsize(head_fmt)
    if len(buf) < head_len:
        raise DataFormatError(f"{path.name} offset 0: truncated header")
    magic, version, K, C, tau, inertia = struct.unpack_from(head_fmt, buf, 0)
    if magic != _MODEL_MAGIC:
        raise DataFormatError(f"{path.name} offset 0: bad magic {magic!r}")
    if version != _MODEL_VERSION:
        raise DataFormatError(f"{path.name} offset 4: unsupported version {version}")
    need = head_len + K * C * 4
    if len(buf) < need:
        raise DataFormatError(f"{path.name} offset {head_len}: truncated centroid block")
    centroids = np.frombuffer(buf, dtype="<f4", count=K * C, offset=head_len)
    fit_meta = {}
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.is_file():
        fit_meta = json.loads(sidecar.read_text(encoding="utf-8"))
    return ExplainerModel(centroids=centroids.reshape(K, C).copy(), tau=tau,
                          inertia=inertia, fit_meta=fit_meta)
