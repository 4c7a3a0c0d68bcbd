"""Command line entry points: train, export, fixtures, verify."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .export import ExportError, attach_fixtures, dump_fixtures, export_bundle, verify_manifest
from .train import TASKS, TrainingError, save_checkpoint, train_toy


def cmd_train(args) -> int:
    model, report = train_toy(
        args.task, args.data, seed=args.seed, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr,
        channels=tuple(int(c) for c in args.channels.split(",")),
        kernel=args.kernel)
    save_checkpoint(model, report, args.out)
    for row in report["metrics_log"]:
        print(json.dumps(row, sort_keys=True))
    gate = report["gate"]
    print(f"gate {gate['metric']}={gate['value']} "
          f"threshold={gate['threshold']} passed={gate['passed']}")
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_export(args) -> int:
    manifest = export_bundle(args.checkpoint, args.bundle, args.manifest)
    print(f"wrote {args.bundle} ({len(manifest['tensor_checksums'])} tensors)")
    if args.manifest:
        print(f"wrote {args.manifest}")
    return 0


def cmd_fixtures(args) -> int:
    records = sorted(Path(args.data).glob("*.bin"))
    if not records:
        print(f"no .bin records under {args.data}", file=sys.stderr)
        return 1
    fixtures = dump_fixtures(args.checkpoint, records, args.out, n=args.n)
    if args.manifest:
        attach_fixtures(args.manifest, fixtures)
    for fx in fixtures:
        print(f"{fx['file']} <- {fx['record_id']}")
    return 0


def cmd_verify(args) -> int:
    result = verify_manifest(args.manifest)
    if result["ok"]:
        print("manifest ok")
        return 0
    for item in result["mismatches"]:
        print(f"MISMATCH {item}", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tlx-export",
                                     description="Train toy ECG models and export weight bundles")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a toy model and save a checkpoint")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--data", required=True, help="directory of .bin records")
    p.add_argument("--out", required=True, help="checkpoint path (.pt)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--channels", default="16,32,32,64,64")
    p.add_argument("--kernel", type=int, default=17)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="export a checkpoint as a weight bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True, help="output bundle path (.tlxw)")
    p.add_argument("--manifest", default=None, help="output manifest path (.json)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("fixtures", help="dump forward-pass parity fixtures")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory of .bin records")
    p.add_argument("--out", required=True, help="output directory for .npz fixtures")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--manifest", default=None, help="existing manifest to attach fixtures to")
    p.set_defaults(func=cmd_fixtures)

    p = sub.add_parser("verify", help="recompute the digests a manifest claims")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv: list | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, ExportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
