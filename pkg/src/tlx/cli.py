"""Command-line surface: fit, explain, analyze, bench, ablate, synth, gradcam.

Every command is deterministic under a fixed config and seed: JSON and CSV
outputs are byte-identical across reruns, SVGs contain no timestamps. Exit
codes: 2 bad configuration, 3 bad data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import analytics, plots
from .cluster import load_model, save_model
from .errors import ConfigError, DataFormatError, NumericError, ShapeError
from .explain import explain, fit_explainer, save_explanation
from .net import contrast_transform, forward, gradcam, load_bundle
from .signal import delineate, detect_rpeaks, load_ecg, save_ecg, synth_corpus

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

BENCH_DISPLAY = {
    "resnet_labels": "ResNet/Labels",
    "rf_signal_labels": "RFsig/Labels",
    "rf_signal_pred": "RFsig/Pred",
    "rf_cluster_labels": "RFclus/Labels",
    "rf_cluster_pred": "RFclus/Pred",
}
METRIC_DISPLAY = {"accuracy": "Accuracy", "precision": "Precision",
                  "recall": "Recall", "auroc": "AUROC", "f1": "F1"}


@dataclass
class RunConfig:
    """Everything a command can read from a config file; flags override."""

    bundle: str | None = None
    model: str | None = None
    data: str | None = None
    out: str = "tlx-out"
    taps: list | None = None
    K: int = 20
    tau: float = 1.0
    seed: int = 0
    jobs: int = 1
    n_init: int = 10
    window_ms: tuple = (300.0, 500.0)
    palette: tuple = plots.PALETTE
    opacity_from_entropy: bool = True

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"K must be >= 2, got {self.K}")
        if not (self.tau > 0):
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if len(self.window_ms) != 2:
            raise ConfigError("window_ms must be a (before, after) pair")
        if len(self.palette) < 1:
            raise ConfigError("palette must not be empty")


def _load_config(path: str | None) -> dict:
    """Read the --config file, or TLX_CONFIG as a fallback; {} if neither."""
    source = path or os.environ.get("TLX_CONFIG")
    if not source:
        return {}
    p = Path(source)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return raw


def _merge_config(args: argparse.Namespace) -> RunConfig:
    """Config file values first, then any flag the user actually passed."""
    merged = _load_config(getattr(args, "config", None))
    for name in ("bundle", "model", "data", "out", "taps", "K", "tau", "seed",
                 "jobs", "n_init", "window_ms"):
        val = getattr(args, name, None)
        if val is not None:
            merged[name] = val
    if "taps" in merged and isinstance(merged["taps"], str):
        merged["taps"] = [t for t in merged["taps"].split(",") if t]
    if "window_ms" in merged and isinstance(merged["window_ms"], str):
        merged["window_ms"] = tuple(float(v) for v in merged["window_ms"].split(","))
    if "palette" in merged:
        merged["palette"] = tuple(merged["palette"])
    return RunConfig(**merged)


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"missing required {what} path")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} path does not exist: {p}")
    return p


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(data_dir: Path) -> list:
    files = sorted([*data_dir.glob("*.bin"), *data_dir.glob("*.csv")],
                   key=lambda p: p.name)
    if not files:
        raise ConfigError(f"no .bin or .csv records under {data_dir}")
    return [load_ecg(f) for f in files]


def _map_jobs(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_matrix_csv(path: Path, header: list, row_names: list,
                      matrix: np.ndarray) -> None:
    lines = ["," + ",".join(str(h) for h in header)]
    for name, row in zip(row_names, np.asarray(matrix)):
        lines.append(str(name) + "," + ",".join(f"{v:.6f}" for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _display_table(table: dict, column_names: dict | None = None) -> dict:
    cols = [column_names.get(c, c) if column_names else c
            for c in table["columns"]]
    rows = {METRIC_DISPLAY[m]: table["rows"][m] for m in analytics.METRIC_ROWS}
    return {"columns": cols, "rows": rows}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _merge_config(args)
    out = _out_dir(cfg)
    records, _ = synth_corpus(args.n, seed=cfg.seed, task=args.task,
                              fs=args.fs, length=args.length)
    names = []
    for i, rec in enumerate(records):
        name = f"{i:04d}.bin"
        save_ecg(rec, out / name)
        names.append(name)
    _write_json(out / "manifest.json", {
        "n": args.n, "task": args.task, "seed": cfg.seed, "fs": args.fs,
        "length": args.length, "files": names})
    print(f"wrote {len(names)} records to {out}")
    return 0


def cmd_fit(args) -> int:
    cfg = _merge_config(args)
    bundle = load_bundle(_require(cfg.bundle, "bundle"))
    corpus = _load_corpus(_require(cfg.data, "data"))
    out = _out_dir(cfg)
    model = fit_explainer(bundle, corpus, taps=cfg.taps, K=cfg.K,
                          seed=cfg.seed, tau=cfg.tau, n_init=cfg.n_init)
    model_path = out / "explainer.tlxc"
    save_model(model, model_path)
    _write_json(out / "fit_report.json", {
        "K": model.K, "C": model.C, "tau": model.tau, "seed": cfg.seed,
        "n_records": len(corpus), "inertia": model.inertia,
        "fit_meta": model.fit_meta})
    print(f"wrote {model_path}")
    return 0


def cmd_explain(args) -> int:
    cfg = _merge_config(args)
    bundle = load_bundle(_require(cfg.bundle, "bundle"))
    model = load_model(_require(cfg.model, "model"))
    if args.record:
        records = [load_ecg(_require(args.record, "record"))]
    else:
        records = _load_corpus(_require(cfg.data, "data"))
    out = _out_dir(cfg)
    # compute in parallel, write serially
    exps = _map_jobs(lambda r: explain(bundle, model, r, taps=cfg.taps),
                     records, cfg.jobs)
    for rec, exp in zip(records, exps):
        save_explanation(exp, out / f"{rec.id}.explanation.json")
        if args.svg:
            r_peaks = detect_rpeaks(rec)
            if not r_peaks:
                print(f"warning: no beats found in {rec.id}; skipping SVG",
                      file=sys.stderr)
                continue
            svg = plots.stacked_beat_svg(
                rec, exp, r_peaks, window_ms=cfg.window_ms, palette=cfg.palette,
                opacity_from_entropy=cfg.opacity_from_entropy)
            (out / f"{rec.id}.svg").write_text(svg, encoding="utf-8")
    print(f"explained {len(records)} record(s) into {out}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _merge_config(args)
    bundle = load_bundle(_require(cfg.bundle, "bundle"))
    model = load_model(_require(cfg.model, "model"))
    records = _load_corpus(_require(cfg.data, "data"))
    out = _out_dir(cfg)

    exps = _map_jobs(lambda r: explain(bundle, model, r, taps=cfg.taps),
                     records, cfg.jobs)
    props = np.stack([analytics.proportions(e) for e in exps])
    K = props.shape[1]
    _write_matrix_csv(out / "proportions.csv", [f"cluster{k}" for k in range(K)],
                      [r.id for r in records], props)

    # correlations against every label column, plus the target if present
    outcome_cols, outcome_names = [], []
    labels = np.stack([r.labels for r in records])
    for j in range(labels.shape[1]):
        outcome_cols.append(labels[:, j].astype(float))
        outcome_names.append(f"label{j}")
    targets = [r.target for r in records]
    if all(t is not None for t in targets):
        outcome_cols.append(np.asarray(targets, dtype=float))
        outcome_names.append("target")
    report = analytics.correlation_report(props, np.column_stack(outcome_cols),
                                          outcome_names=outcome_names)
    _write_matrix_csv(out / "correlations_r.csv", list(range(K)),
                      outcome_names, report.r)
    _write_matrix_csv(out / "correlations_p.csv", list(range(K)),
                      outcome_names, report.p)
    (out / "correlations.svg").write_text(
        plots.correlation_heatmap_svg(report), encoding="utf-8")

    # keypoint and phase frequencies over detectable records
    kept_exps, kept_kps = [], []
    for rec, exp in zip(records, exps):
        r_peaks = detect_rpeaks(rec)
        if not r_peaks:
            continue
        kept_exps.append(exp)
        kept_kps.append(delineate(rec, r_peaks))
    if not kept_exps:
        print("warning: no keypoints detectable in any record; "
              "frequency tables marked absent", file=sys.stderr)
        _write_json(out / "keypoint_freq.json", {"absent": True})
        _write_json(out / "phase_freq.json", {"absent": True})
    else:
        fs = records[0].fs
        kfreq = analytics.keypoint_frequencies(kept_exps, kept_kps, fs=fs)
        _write_matrix_csv(out / "keypoint_freq.csv", kfreq["columns"],
                          [f"cluster{k}" for k in range(K)], kfreq["table"])
        (out / "keypoint_freq.svg").write_text(
            plots.keypoint_bar_svg(kfreq, palette=cfg.palette), encoding="utf-8")
        pfreq = analytics.phase_frequencies(kept_exps, kept_kps)
        _write_matrix_csv(out / "phase_freq.csv", pfreq["columns"],
                          [f"cluster{k}" for k in range(K)], pfreq["table"])
        (out / "phase_freq.svg").write_text(
            plots.phase_heatmap_svg(pfreq), encoding="utf-8")

        # uncertainty by phase, grouped by the network's own predictions
        outputs = _map_jobs(lambda r: forward(bundle, r, taps=[])[0],
                            records, cfg.jobs)
        kept_groups = []
        for rec, y in zip(records, outputs):
            if not detect_rpeaks(rec):
                continue
            kept_groups.append(int(np.argmax(y)) if y.size > 1 else float(y[0]))
        task = "classification" if outputs[0].size > 1 else "regression"
        by_phase = analytics.uncertainty_by_phase(kept_exps, kept_kps,
                                                  kept_groups, task=task)
        _write_json(out / "uncertainty.json", {
            ph: {str(g): v for g, v in grp.items()}
            for ph, grp in by_phase.items()})
        if by_phase:
            (out / "uncertainty.svg").write_text(
                plots.uncertainty_heatmap_svg(by_phase), encoding="utf-8")

    # saliency comparison for the first record
    rec, exp = records[0], exps[0]
    y = forward(bundle, rec, taps=[])[0]
    tap = (cfg.taps or bundle.meta["tap_names"])[-1]
    sal = gradcam(bundle, rec, int(np.argmax(y)), tap)
    sal_cells = np.interp(np.linspace(0, sal.size - 1, exp.D),
                          np.arange(sal.size), sal)
    (out / "gradcam_compare.svg").write_text(
        plots.saliency_svg(rec, exp, sal_cells, palette=cfg.palette),
        encoding="utf-8")
    print(f"analysis artifacts written to {out}")
    return 0


def cmd_bench(args) -> int:
    cfg = _merge_config(args)
    bundle = load_bundle(_require(cfg.bundle, "bundle"))
    model = load_model(_require(cfg.model, "model"))
    records = _load_corpus(_require(cfg.data, "data"))
    out = _out_dir(cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        table = analytics.prediction_benchmark(
            bundle, model, records, taps=cfg.taps, seed=cfg.seed,
            folds=args.folds, repeats=args.repeats, n_trees=args.n_trees)
    disp = _display_table(table, BENCH_DISPLAY)
    (out / "bench.csv").write_text(analytics.table_to_csv(disp), encoding="utf-8")
    text = analytics.table_to_text(disp)
    (out / "bench.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _parse_sizes(raw: str) -> tuple:
    out = []
    for tok in raw.split(","):
        tok = tok.strip()
        out.append("all" if tok == "all" else int(tok))
    return tuple(out)


def cmd_ablate(args) -> int:
    cfg = _merge_config(args)
    bundle = load_bundle(_require(cfg.bundle, "bundle"))
    fit_corpus = _load_corpus(_require(cfg.data, "data"))
    eval_corpus = _load_corpus(_require(args.eval_data, "eval data"))
    labels = np.stack([r.labels for r in eval_corpus])
    out = _out_dir(cfg)
    sizes = _parse_sizes(args.sizes) if args.sizes else analytics.DEFAULT_SIZES
    Ks = tuple(int(k) for k in args.ks.split(",")) if args.ks \
        else analytics.DEFAULT_KS
    grid = analytics.ablation_grid(
        bundle, fit_corpus, eval_corpus, labels, taps=cfg.taps, sizes=sizes,
        Ks=Ks, K=cfg.K, seed=cfg.seed, folds=args.folds, repeats=args.repeats,
        n_init=cfg.n_init, n_trees=args.n_trees)
    for key, fname in (("by_size", "ablate_sizes"), ("by_k", "ablate_ks")):
        disp = _display_table(grid[key])
        (out / f"{fname}.csv").write_text(analytics.table_to_csv(disp),
                                          encoding="utf-8")
        (out / f"{fname}.txt").write_text(analytics.table_to_text(disp),
                                          encoding="utf-8")
    print(f"ablation tables written to {out}")
    return 0


def cmd_gradcam(args) -> int:
    cfg = _merge_config(args)
    bundle = load_bundle(_require(cfg.bundle, "bundle"))
    rec = load_ecg(_require(args.record, "record"))
    out = _out_dir(cfg)
    tap = args.tap or bundle.meta["tap_names"][-1]
    y = forward(bundle, rec, taps=[])[0]
    target = args.target if args.target is not None else int(np.argmax(y))
    sal = gradcam(bundle, rec, target, tap, merge=args.merge)
    contrast = contrast_transform(sal)
    _write_json(out / "gradcam.json", {
        "record": rec.id, "tap": tap, "target": target, "merge": args.merge,
        "saliency": [round(float(v), 9) for v in sal],
        "contrast": [round(float(v), 9) for v in contrast]})
    if cfg.model:
        model = load_model(_require(cfg.model, "model"))
        exp = explain(bundle, model, rec, taps=cfg.taps)
        sal_cells = np.interp(np.linspace(0, sal.size - 1, exp.D),
                              np.arange(sal.size), sal)
        (out / "gradcam.svg").write_text(
            plots.saliency_svg(rec, exp, sal_cells, palette=cfg.palette),
            encoding="utf-8")
    print(f"gradcam artifacts written to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (TLX_CONFIG as fallback)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tlx",
                                 description="time-localized cluster explanations")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ECG corpus")
    _add_common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--task", choices=("classify4", "age"), default="classify4")
    p.add_argument("--fs", type=float, default=100.0)
    p.add_argument("--length", type=int, default=1024)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fit", help="fit and save an explainer model")
    _add_common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--taps", default=None)
    p.add_argument("--k", dest="K", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--n-init", dest="n_init", type=int, default=None)
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("explain", help="explain records; JSON plus optional SVG")
    _add_common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--record", default=None, help="single record file")
    p.add_argument("--taps", default=None)
    p.add_argument("--svg", action="store_true")
    p.add_argument("--window-ms", dest="window_ms", default=None,
                   help="before,after in ms")
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("analyze", help="correlations, frequencies, uncertainty")
    _add_common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--taps", default=None)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("bench", help="forests vs the network, five metrics")
    _add_common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--taps", default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--n-trees", dest="n_trees", type=int, default=100)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="subset-size and K ablation grids")
    _add_common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--data", default=None, help="explainer-fit corpus dir")
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--taps", default=None)
    p.add_argument("--k", dest="K", type=int, default=None)
    p.add_argument("--sizes", default=None, help="e.g. 50,100,200,all")
    p.add_argument("--ks", default=None, help="e.g. 5,10,20")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--n-trees", dest="n_trees", type=int, default=100)
    p.add_argument("--n-init", dest="n_init", type=int, default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcam", help="saliency for one record")
    _add_common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--model", default=None, help="adds a cluster-band SVG")
    p.add_argument("--record", required=True)
    p.add_argument("--taps", default=None)
    p.add_argument("--tap", default=None)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--merge", choices=("max", "sum"), default="max")
    p.set_defaults(fn=cmd_gradcam)
    return ap


def main(argv: list | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
