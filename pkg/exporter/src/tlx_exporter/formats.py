"""Byte-level readers and writers for the interchange file formats.

Two formats cross the package boundary:

* TLXE records: one 12-lead ECG per file. Fixed little-endian header,
  float32 samples in time-major order, then a trailer with the valid
  sample range, optional per-record labels, and an optional scalar
  target.
* TLXW bundles: a JSON architecture header followed by named float32
  tensors, each placed at a 64-byte-aligned absolute file offset.

These are deliberately written against the byte layout rather than by
importing the consumer package, so the two sides of the toolchain keep
each other honest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

ECG_MAGIC = b"TLXE"
ECG_VERSION = 1
ECG_CHANNELS = 12

BUNDLE_MAGIC = b"TLXW"
BUNDLE_VERSION = 1
BUNDLE_ALIGN = 64


class FormatError(ValueError):
    """A file does not match the expected byte layout."""


def sha256_of_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_of_file(path: str | Path) -> str:
    return sha256_of_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# TLXE records
# ---------------------------------------------------------------------------

def read_ecg(path: str | Path) -> dict:
    """Parse one TLXE record into a plain dict.

    Returns keys: id (file stem), samples (L, 12) float32, fs, valid_range
    (v0, v1), labels (uint8 array or None), target (float or None).
    """
    path = Path(path)
    buf = path.read_bytes()
    head_fmt = "<4sIIId"
    head_len = struct.calcsize(head_fmt)
    if len(buf) < head_len:
        raise FormatError(f"{path.name}: truncated header")
    magic, version, length, n_ch, fs = struct.unpack_from(head_fmt, buf, 0)
    if magic != ECG_MAGIC:
        raise FormatError(f"{path.name}: bad magic {magic!r}")
    if version != ECG_VERSION:
        raise FormatError(f"{path.name}: unsupported version {version}")
    if n_ch != ECG_CHANNELS:
        raise FormatError(f"{path.name}: channel count {n_ch} != {ECG_CHANNELS}")
    off = head_len
    n_samples = length * n_ch
    trailer_fmt = "<IIB"
    if len(buf) < off + n_samples * 4 + struct.calcsize(trailer_fmt):
        raise FormatError(f"{path.name}: truncated sample block")
    samples = np.frombuffer(buf, dtype="<f4", count=n_samples, offset=off)
    samples = samples.reshape(length, n_ch).copy()
    off += n_samples * 4
    v0, v1, n_labels = struct.unpack_from(trailer_fmt, buf, off)
    off += struct.calcsize(trailer_fmt)
    if len(buf) < off + n_labels + 1:
        raise FormatError(f"{path.name}: truncated label block")
    labels = None
    if n_labels:
        labels = np.frombuffer(buf, dtype=np.uint8, count=n_labels, offset=off).copy()
    off += n_labels
    (has_target,) = struct.unpack_from("<B", buf, off)
    off += 1
    target = None
    if has_target:
        if len(buf) < off + 8:
            raise FormatError(f"{path.name}: missing target value")
        (target,) = struct.unpack_from("<d", buf, off)
    return {
        "id": path.stem,
        "samples": samples,
        "fs": float(fs),
        "valid_range": (int(v0), int(v1)),
        "labels": labels,
        "target": target,
    }


def write_ecg(path: str | Path, samples: np.ndarray, fs: float,
              valid_range: tuple | None = None,
              labels: np.ndarray | None = None,
              target: float | None = None) -> None:
    """Write one TLXE record; the mirror image of read_ecg."""
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 2 or samples.shape[1] != ECG_CHANNELS:
        raise FormatError(f"samples must be (L, {ECG_CHANNELS}), got {samples.shape}")
    length = samples.shape[0]
    if valid_range is None:
        valid_range = (0, length)
    label_bytes = b""
    n_labels = 0
    if labels is not None:
        label_arr = np.asarray(labels, dtype=np.uint8)
        label_bytes = label_arr.tobytes()
        n_labels = label_arr.size
    blob = [
        struct.pack("<4sIIId", ECG_MAGIC, ECG_VERSION, length, ECG_CHANNELS, float(fs)),
        samples.astype("<f4").tobytes(),
        struct.pack("<IIB", int(valid_range[0]), int(valid_range[1]), n_labels),
        label_bytes,
        struct.pack("<B", 0 if target is None else 1),
    ]
    if target is not None:
        blob.append(struct.pack("<d", float(target)))
    Path(path).write_bytes(b"".join(blob))


# ---------------------------------------------------------------------------
# TLXW bundles
# ---------------------------------------------------------------------------

def write_bundle(path: str | Path, arch: list, meta: dict, params: dict) -> dict:
    """Write a weight bundle and return per-tensor sha256 checksums.

    Layout: '<4sII' (magic, version, header_len), then the JSON header
    {"arch", "meta", "tensors"} serialized with sorted keys, then each
    tensor as little-endian float32 at a 64-byte-aligned absolute offset
    with zero fill in the gaps. Tensor directory entries are sorted by
    name. Offsets feed back into the header length, so the header is
    re-encoded until its length stops moving.
    """
    path = Path(path)
    names = sorted(params)
    arrays = {n: np.ascontiguousarray(params[n], dtype=np.float32) for n in names}
    directory = [{"name": n, "shape": list(arrays[n].shape), "offset": 0} for n in names]
    header = {"arch": arch, "meta": meta, "tensors": directory}

    def encode():
        return json.dumps(header, sort_keys=True).encode("utf-8")

    base = struct.calcsize("<4sII")
    header_len = len(encode())
    for _ in range(4):
        off = base + header_len
        for entry in directory:
            off = (off + BUNDLE_ALIGN - 1) // BUNDLE_ALIGN * BUNDLE_ALIGN
            entry["offset"] = off
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            off += count * 4
        blob = encode()
        if len(blob) == header_len:
            break
        header_len = len(blob)
    else:
        raise FormatError("bundle header length failed to stabilize")

    out = bytearray(struct.pack("<4sII", BUNDLE_MAGIC, BUNDLE_VERSION, header_len))
    out += blob
    checksums = {}
    for entry in directory:
        raw = arrays[entry["name"]].astype("<f4").tobytes()
        out += b"\0" * (entry["offset"] - len(out))
        out += raw
        checksums[entry["name"]] = sha256_of_bytes(raw)
    path.write_bytes(bytes(out))
    return checksums


def read_bundle_tensors(path: str | Path) -> tuple[dict, dict]:
    """Parse a TLXW file back into (header dict, {name: float32 array}).

    Used to verify manifests against what actually landed on disk.
    """
    path = Path(path)
    buf = path.read_bytes()
    base = struct.calcsize("<4sII")
    if len(buf) < base:
        raise FormatError(f"{path.name}: truncated header")
    magic, version, header_len = struct.unpack_from("<4sII", buf, 0)
    if magic != BUNDLE_MAGIC:
        raise FormatError(f"{path.name}: bad magic {magic!r}")
    if version != BUNDLE_VERSION:
        raise FormatError(f"{path.name}: unsupported version {version}")
    if len(buf) < base + header_len:
        raise FormatError(f"{path.name}: truncated JSON header")
    header = json.loads(buf[base:base + header_len].decode("utf-8"))
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        end = entry["offset"] + count * 4
        if end > len(buf):
            raise FormatError(f"{path.name}: tensor {entry['name']!r} runs past end")
        flat = np.frombuffer(buf, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return header, tensors
