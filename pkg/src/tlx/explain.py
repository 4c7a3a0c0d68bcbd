"""Time-localized cluster explanations of a CNN's hidden activations.

Pipeline: tap hidden activations, linearly upsample every tap to the first
tap's length D, L2-normalize each timestep vector per tap, downweight each tap
by 1/(1+d_i), concatenate along channels, k-means the pooled rows, and soft
assign. Each explanation index j covers input samples [jL/D, (j+1)L/D).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cluster import Assignment, ExplainerModel, kmeans_fit, soft_assign
from .errors import ConfigError, ShapeError
from .net import Activation, WeightsBundle, forward

DEFAULT_K = 20


@dataclass
class FeatureMatrix:
    """Collated D×C feature rows plus the per-tap column layout."""

    data: np.ndarray
    tap_layout: list  # (layer_name, d_i, c_i, (col_start, col_end))

    @property
    def D(self) -> int:
        return self.data.shape[0]

    @property
    def C(self) -> int:
        return self.data.shape[1]


@dataclass
class Explanation:
    """Cluster assignment over explanation indices, tied back to input time."""

    assignment: Assignment
    timeline: list  # j -> (start, end) input sample range
    ecg_id: str

    @property
    def D(self) -> int:
        return len(self.timeline)

    @property
    def L(self) -> int:
        return self.timeline[-1][1]

    @property
    def labels(self) -> np.ndarray:
        return self.assignment.labels

    @property
    def entropy(self) -> np.ndarray:
        return self.assignment.entropy


def linear_upsample(act: Activation | np.ndarray, D: int) -> np.ndarray:
    """Per-channel linear interpolation from d to D timesteps, endpoints kept."""
    data = act.data if isinstance(act, Activation) else np.asarray(act, dtype=np.float64)
    d = data.shape[0]
    if D < d:
        raise ConfigError(f"cannot upsample length {d} down to {D}")
    if D == d:
        return data.astype(np.float64).copy()
    if d == 1:
        return np.repeat(data.astype(np.float64), D, axis=0)
    src = np.linspace(0.0, d - 1.0, D)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, d - 1)
    frac = (src - lo)[:, None]
    return data[lo] * (1.0 - frac) + data[hi] * frac


def collate(acts: list[Activation], D: int | None = None) -> FeatureMatrix:
    """Upsample, row-normalize, scale by 1/(1+d_i), and concatenate the taps."""
    if not acts:
        raise ConfigError("no activations to collate")
    if D is None:
        D = acts[0].d
    if D != acts[0].d:
        raise ConfigError(f"D={D} must equal the first tap's length {acts[0].d}")
    blocks = []
    layout = []
    col = 0
    for act in acts:
        up = linear_upsample(act, D)
        norms = np.linalg.norm(up, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)  # zero rows stay zero
        block = up / safe / (1.0 + act.d)
        blocks.append(block)
        layout.append((act.layer_name, act.d, act.c, (col, col + act.c)))
        col += act.c
    return FeatureMatrix(data=np.concatenate(blocks, axis=1), tap_layout=layout)


def _tap_features(bundle: WeightsBundle, ecg, taps: list[str] | None) -> FeatureMatrix:
    _, acts = forward(bundle, ecg, taps=taps)
    if not acts:
        raise ConfigError("bundle produced no tapped activations")
    return collate(acts)


def fit_explainer(bundle: WeightsBundle, corpus: list, taps: list[str] | None = None,
                  K: int = DEFAULT_K, seed: int = 0, tau: float = 1.0,
                  n_init: int = 10) -> ExplainerModel:
    """Pool collated feature rows over the corpus and fit k-means on them."""
    if not corpus:
        raise ConfigError("corpus must be nonempty")
    rows = [_tap_features(bundle, ecg, taps).data for ecg in corpus]
    data = np.concatenate(rows, axis=0)
    return kmeans_fit(data, K=K, seed=seed, tau=tau, n_init=n_init)


def explain(bundle: WeightsBundle, model: ExplainerModel, ecg,
            taps: list[str] | None = None) -> Explanation:
    """Assign every explanation index of one record to a cluster."""
    fm = _tap_features(bundle, ecg, taps)
    if fm.C != model.C:
        raise ShapeError(
            f"model expects C={model.C} feature columns, collation gives {fm.C}")
    assignment = soft_assign(model, fm.data)
    L = ecg.length if hasattr(ecg, "length") else np.asarray(ecg).shape[0]
    D = fm.D
    timeline = [(j * L // D, (j + 1) * L // D) for j in range(D)]
    ecg_id = getattr(ecg, "id", "")
    return Explanation(assignment=assignment, timeline=timeline, ecg_id=ecg_id)


def segment_at(explanation: Explanation, sample_index: int) -> tuple[int, float]:
    """Cluster id and uncertainty of the timeline cell holding one sample."""
    L = explanation.L
    if not 0 <= sample_index < L:
        raise ConfigError(f"sample_index {sample_index} outside [0, {L})")
    D = explanation.D
    j = min(sample_index * D // L, D - 1)
    # Uniform cells need no search, but guard against rounding at boundaries.
    while j > 0 and sample_index < explanation.timeline[j][0]:
        j -= 1
    while j < D - 1 and sample_index >= explanation.timeline[j][1]:
        j += 1
    return int(explanation.labels[j]), float(explanation.entropy[j])


def save_explanation(explanation: Explanation, path: str | Path,
                     include_probs: bool = True) -> None:
    obj = {
        "ecg_id": explanation.ecg_id,
        "D": explanation.D,
        "L": explanation.L,
        "K": int(explanation.assignment.probs.shape[1]),
        "labels": explanation.labels.tolist(),
        "entropy": [float(v) for v in explanation.entropy],
    }
    if include_probs:
        obj["probs"] = [float(v) for v in explanation.assignment.probs.ravel()]
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def load_explanation(path: str | Path) -> Explanation:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    D, L, K = obj["D"], obj["L"], obj["K"]
    labels = np.asarray(obj["labels"], dtype=np.int64)
    entropy = np.asarray(obj["entropy"], dtype=np.float64)
    if "probs" in obj:
        probs = np.asarray(obj["probs"], dtype=np.float64).reshape(D, K)
    else:
        probs = np.eye(K)[labels]  # degenerate stand-in keeping invariants
    assignment = Assignment(probs=probs, labels=labels, entropy=entropy)
    timeline = [(j * L // D, (j + 1) * L // D) for j in range(D)]
    return Explanation(assignment=assignment, timeline=timeline, ecg_id=obj["ecg_id"])
