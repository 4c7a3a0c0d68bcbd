"""Toy training loops that produce exportable checkpoints.

Two tasks are supported, each with a quality gate the checkpoint must
clear before it is considered exportable:

* classify4: four-way multi-label morphology classification, gated on
  validation macro AUROC >= 0.90.
* regress_age: scalar age regression, gated on validation MAE <= 5.0.

Training is CPU-only, single-threaded, and fully seeded so that two runs
with the same seed produce identical metric logs.
"""

from __future__ import annotations

import copy
from pathlib import Path

import numpy as np
import torch

from .formats import read_ecg
from .model import ResNet1d

TASKS = ("classify4", "regress_age")


class TrainingError(RuntimeError):
    """Training finished but the checkpoint failed its quality gate."""


def load_corpus(data_dir: str | Path) -> dict:
    """Read every .bin record under data_dir, sorted by filename.

    Returns inputs channel-major as (N, 12, L) float32 plus the label
    matrix (N, 4), targets (N,) with NaN where absent, and record ids.
    """
    data_dir = Path(data_dir)
    paths = sorted(data_dir.glob("*.bin"))
    if not paths:
        raise FileNotFoundError(f"no .bin records under {data_dir}")
    xs, labels, targets, ids = [], [], [], []
    length = None
    fs = None
    for p in paths:
        rec = read_ecg(p)
        if length is None:
            length, fs = rec["samples"].shape[0], rec["fs"]
        elif rec["samples"].shape[0] != length:
            raise ValueError(f"{p.name}: length {rec['samples'].shape[0]} != {length}")
        xs.append(rec["samples"].T)
        lab = rec["labels"]
        labels.append(np.zeros(4, np.float32) if lab is None else lab.astype(np.float32))
        targets.append(np.nan if rec["target"] is None else float(rec["target"]))
        ids.append(rec["id"])
    return {
        "X": np.stack(xs).astype(np.float32),
        "Y": np.stack(labels),
        "target": np.asarray(targets, dtype=np.float64),
        "ids": ids,
        "fs": fs,
        "length": length,
    }


def _auroc(y: np.ndarray, scores: np.ndarray) -> float | None:
    """Rank-statistic AUROC with average ranks on ties; None if one class."""
    y = np.asarray(y).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(y.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < y.size:
        j = i
        while j + 1 < y.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = ranks[y].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _macro_auroc(Y: np.ndarray, S: np.ndarray) -> float:
    vals = [_auroc(Y[:, j], S[:, j]) for j in range(Y.shape[1])]
    vals = [v for v in vals if v is not None]
    if not vals:
        raise TrainingError("no label column had both classes in validation")
    return float(np.mean(vals))


def train_toy(task: str, data_dir: str | Path, seed: int = 0,
              epochs: int = 30, batch_size: int = 32, lr: float = 1e-3,
              val_frac: float = 0.25,
              channels: tuple = (16, 32, 32, 64, 64), kernel: int = 17,
              min_auroc: float = 0.90, max_mae: float = 5.0,
              enforce_gate: bool = True) -> tuple[ResNet1d, dict]:
    """Train one toy model and return (model, report).

    The returned model holds the best-validation-epoch weights in eval
    mode. Raises TrainingError if the task's gate fails and
    ``enforce_gate`` is on.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    corpus = load_corpus(data_dir)
    X = corpus["X"]
    n = X.shape[0]
    if task == "classify4":
        Y = corpus["Y"]
        n_out, head = 4, "sigmoid"
    else:
        if np.isnan(corpus["target"]).any():
            raise ValueError("regress_age needs a target on every record")
        Y = corpus["target"].astype(np.float32)[:, None]
        n_out, head = 1, "linear"

    # One seeded RNG drives the split and every per-epoch shuffle.
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * val_frac)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise ValueError(f"corpus of {n} records leaves no training split")

    torch.manual_seed(seed)
    torch.set_num_threads(1)
    model = ResNet1d(input_length=corpus["length"], input_channels=12,
                     n_out=n_out, head=head, channels=channels, kernel=kernel)

    xt = torch.from_numpy(X)
    yt = torch.from_numpy(np.ascontiguousarray(Y, dtype=np.float32))
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    bce = torch.nn.BCEWithLogitsLoss()

    def loss_fn(logits, target):
        if task == "classify4":
            return bce(logits, target)
        # Errors start around tens of age units; the 1/30 scale keeps early
        # regression gradients in the same range the classifier sees.
        return torch.mean(((logits - target) / 30.0) ** 2)

    if task == "regress_age":
        with torch.no_grad():
            model.fc.bias.fill_(float(np.mean(Y[train_idx])))

    def validate() -> float:
        model.eval()
        with torch.no_grad():
            out = model(xt[val_idx]).numpy()
        if task == "classify4":
            return _macro_auroc(Y[val_idx], out)
        return float(np.mean(np.abs(out[:, 0] - Y[val_idx, 0])))

    better = (lambda a, b: a > b) if task == "classify4" else (lambda a, b: a < b)
    metric_name = "val_auroc" if task == "classify4" else "val_mae"
    log = []
    best_val = None
    best_state = None
    best_epoch = -1
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(train_idx)
        total = 0.0
        for start in range(0, order.size, batch_size):
            batch = order[start:start + batch_size]
            opt.zero_grad()
            loss = loss_fn(model.logits(xt[batch]), yt[batch])
            loss.backward()
            opt.step()
            total += float(loss.detach()) * batch.size
        train_loss = total / order.size
        val = validate()
        log.append({"epoch": epoch, "train_loss": round(train_loss, 6),
                    metric_name: round(val, 6)})
        if best_val is None or better(val, best_val):
            best_val = val
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    if task == "classify4":
        gate = {"metric": "val_auroc", "threshold": min_auroc,
                "value": round(best_val, 6), "passed": best_val >= min_auroc}
    else:
        gate = {"metric": "val_mae", "threshold": max_mae,
                "value": round(best_val, 6), "passed": best_val <= max_mae}
    report = {
        "task": task,
        "seed": seed,
        "epochs": epochs,
        "n_train": int(train_idx.size),
        "n_val": int(val_idx.size),
        "best_epoch": best_epoch,
        "metrics_log": log,
        "gate": gate,
    }
    if enforce_gate and not gate["passed"]:
        raise TrainingError(
            f"{task} gate failed: {gate['metric']}={gate['value']} "
            f"vs threshold {gate['threshold']}")
    return model, report


def save_checkpoint(model: ResNet1d, report: dict, path: str | Path) -> None:
    torch.save({"state_dict": model.state_dict(), "config": model.config(),
                "report": report}, path)


def load_checkpoint(path: str | Path) -> tuple[ResNet1d, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    model = ResNet1d(**{k: tuple(v) if k == "channels" else v
                        for k, v in ckpt["config"].items()})
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt["report"]
