"""Checkpoint-to-bundle export, parity fixtures, and manifest checks.

The export manifest records where the bundle came from and what exactly
went into it: the source checkpoint digest, the torch-to-bundle tensor
name mapping, a sha256 per exported tensor, and the fixture files dumped
alongside. verify_manifest re-reads the bundle from disk and recomputes
every digest, so any corrupted or swapped byte shows up as a named
mismatch rather than a silent numerical drift.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import torch

from .formats import read_bundle_tensors, sha256_of_bytes, sha256_of_file, write_bundle
from .model import ResNet1d, arch_spec
from .train import load_checkpoint

MANIFEST_VERSION = 1

_BN_FIELD = {"weight": "gamma", "bias": "beta",
             "running_mean": "mean", "running_var": "var"}


class ExportError(RuntimeError):
    """A checkpoint cannot be mapped onto the bundle layer vocabulary."""


def map_param_names(state_dict: dict) -> tuple[dict, list]:
    """Map torch state-dict keys to bundle tensor names.

    Returns (mapping, dropped) where dropped lists keys that carry no
    weight data (batch-norm step counters). Unknown keys are an error:
    silently skipping a real parameter would export a broken network.
    """
    mapping = {}
    dropped = []
    block = re.compile(r"^blocks\.(\d+)\.(conv1|bn1|conv2|bn2|skip)\.(\w+)$")
    for key in state_dict:
        if key.endswith("num_batches_tracked"):
            dropped.append(key)
            continue
        if key in ("conv0.weight", "conv0.bias", "fc.weight", "fc.bias"):
            mapping[key] = key
            continue
        m = re.match(r"^bn0\.(\w+)$", key)
        if m and m.group(1) in _BN_FIELD:
            mapping[key] = f"bn0.{_BN_FIELD[m.group(1)]}"
            continue
        m = block.match(key)
        if m:
            idx, part, field = int(m.group(1)) + 1, m.group(2), m.group(3)
            if part.startswith("bn"):
                if field not in _BN_FIELD:
                    raise ExportError(f"no bundle mapping for parameter {key!r}")
                field = _BN_FIELD[field]
            elif field not in ("weight", "bias"):
                raise ExportError(f"no bundle mapping for parameter {key!r}")
            mapping[key] = f"block{idx}.{part}.{field}"
            continue
        raise ExportError(f"no bundle mapping for parameter {key!r}")
    return mapping, dropped


def export_bundle(checkpoint_path: str | Path, bundle_path: str | Path,
                  manifest_path: str | Path | None = None) -> dict:
    """Export a trained checkpoint as a weight bundle; returns the manifest.

    Batch norm is exported in inference form: gamma/beta plus the running
    mean and variance as separate tensors, never folded into the convs.
    """
    checkpoint_path = Path(checkpoint_path)
    bundle_path = Path(bundle_path)
    model, report = load_checkpoint(checkpoint_path)
    state = model.state_dict()
    mapping, dropped = map_param_names(state)
    params = {bundle_name: state[torch_name].detach().numpy()
              for torch_name, bundle_name in mapping.items()}
    arch, meta = arch_spec(model.input_length, model.input_channels,
                           model.n_out, model.head, model.channels, model.kernel)
    meta = dict(meta, task=report.get("task"), train_seed=report.get("seed"))
    tensor_checksums = write_bundle(bundle_path, arch, meta, params)
    manifest = {
        "format": "tlxw-export-manifest",
        "version": MANIFEST_VERSION,
        "source_checkpoint": {"file": checkpoint_path.name,
                              "sha256": sha256_of_file(checkpoint_path)},
        "task": report.get("task"),
        "seed": report.get("seed"),
        "gate": report.get("gate"),
        "bundle": {"file": bundle_path.name, "sha256": sha256_of_file(bundle_path)},
        "layer_map": mapping,
        "dropped_keys": sorted(dropped),
        "tensor_checksums": tensor_checksums,
        "fixtures": [],
    }
    if manifest_path is not None:
        Path(manifest_path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def dump_fixtures(checkpoint_path: str | Path, record_paths: list,
                  out_dir: str | Path, n: int = 5) -> list:
    """Run n records through the model and save input/taps/output as .npz.

    Tap activations are stored time-major (d, c), the layout the consumer
    produces, so parity checks compare arrays directly.
    """
    from .formats import read_ecg

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(checkpoint_path)
    fixtures = []
    for i, rec_path in enumerate(sorted(Path(p) for p in record_paths)[:n]):
        rec = read_ecg(rec_path)
        x = torch.from_numpy(rec["samples"].T[None].copy())
        with torch.no_grad():
            y, taps = model.forward_with_taps(x)
        payload = {
            "record_id": np.str_(rec["id"]),
            "input": rec["samples"].astype(np.float32),
            "output": y[0].numpy().astype(np.float32),
            "tap_names": np.array(model.tap_names),
        }
        for name, act in taps.items():
            payload[f"tap_{name}"] = act[0].numpy().T.astype(np.float32)
        path = out_dir / f"fixture{i:02d}.npz"
        np.savez(path, **payload)
        fixtures.append({"file": path.name, "record_id": rec["id"],
                         "sha256": sha256_of_file(path)})
    return fixtures


def attach_fixtures(manifest_path: str | Path, fixtures: list) -> dict:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    manifest["fixtures"] = fixtures
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def verify_manifest(manifest_path: str | Path) -> dict:
    """Recompute every digest the manifest claims; report mismatches.

    Bundle and fixture paths are resolved relative to the manifest file.
    Returns {"ok": bool, "mismatches": [description, ...]}.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    root = manifest_path.parent
    mismatches = []

    bundle_file = root / manifest["bundle"]["file"]
    if not bundle_file.is_file():
        mismatches.append(f"bundle missing: {bundle_file.name}")
    else:
        if sha256_of_file(bundle_file) != manifest["bundle"]["sha256"]:
            mismatches.append(f"bundle file digest: {bundle_file.name}")
        _, tensors = read_bundle_tensors(bundle_file)
        claimed = manifest["tensor_checksums"]
        for name in sorted(set(claimed) | set(tensors)):
            if name not in tensors:
                mismatches.append(f"tensor missing from bundle: {name}")
            elif name not in claimed:
                mismatches.append(f"tensor not in manifest: {name}")
            elif sha256_of_bytes(tensors[name].astype("<f4").tobytes()) != claimed[name]:
                mismatches.append(f"tensor digest: {name}")

    for fx in manifest.get("fixtures", []):
        path = root / fx["file"]
        if not path.is_file():
            mismatches.append(f"fixture missing: {fx['file']}")
        elif sha256_of_file(path) != fx["sha256"]:
            mismatches.append(f"fixture digest: {fx['file']}")

    return {"ok": not mismatches, "mismatches": mismatches}
