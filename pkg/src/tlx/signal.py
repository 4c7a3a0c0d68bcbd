"""ECG records: file IO, synthetic generation, R-peak detection, delineation.

Signals are stored time-major as (L, 12) float32 matrices in millivolts.
Lead II (column 1) is the working lead for detection and delineation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

N_CHANNELS = 12

# A Gaussian bump falls to 10% of its peak K10 sigmas from the center.
_K10 = float(np.sqrt(2.0 * np.log(10.0)))

BEAT_FIELDS = (
    "p_on", "p_peak", "p_off",
    "qrs_on", "qrs_off",
    "t_on", "t_peak", "t_off",
)


@dataclass
class EcgRecord:
    """One 12-lead ECG: (L, 12) samples in mV plus acquisition metadata.

    ``valid_range`` marks the [start, end) span of real signal; samples
    outside it are padding. ``labels`` is an optional vector of binary
    diagnostic flags, ``target`` an optional real regression target.
    """

    id: str
    samples: np.ndarray
    fs: float
    valid_range: tuple[int, int] | None = None
    labels: np.ndarray | None = None
    target: float | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2 or self.samples.shape[1] != N_CHANNELS:
            raise DataFormatError(
                f"expected samples of shape (L, {N_CHANNELS}), got {self.samples.shape}"
            )
        if self.samples.shape[0] == 0:
            raise DataFormatError("empty record: L must be positive")
        if not np.isfinite(self.samples).all():
            raise DataFormatError("non-finite sample values")
        if not (self.fs > 0):
            raise DataFormatError(f"sampling rate must be positive, got {self.fs}")
        if self.valid_range is None:
            self.valid_range = (0, self.length)
        s0, s1 = int(self.valid_range[0]), int(self.valid_range[1])
        if not (0 <= s0 < s1 <= self.length):
            raise DataFormatError(f"valid_range {self.valid_range} out of [0, {self.length}]")
        self.valid_range = (s0, s1)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.ndim != 1 or not np.isin(lab, (0, 1)).all():
                raise DataFormatError("labels must be a flat vector of 0/1 flags")
            self.labels = lab.astype(np.uint8)
        if self.target is not None:
            self.target = float(self.target)

    @property
    def length(self) -> int:
        return self.samples.shape[0]


@dataclass
class BeatKeypoints:
    """Fiducial indices for one beat; any field may be absent (None)."""

    p_on: int | None = None
    p_peak: int | None = None
    p_off: int | None = None
    qrs_on: int | None = None
    qrs_off: int | None = None
    t_on: int | None = None
    t_peak: int | None = None
    t_off: int | None = None

    def present(self) -> dict[str, int]:
        return {f: getattr(self, f) for f in BEAT_FIELDS if getattr(self, f) is not None}


@dataclass
class KeypointSet:
    """Per-record landmarks: R peaks, per-beat wave points, TP intervals."""

    r_peaks: list[int]
    beats: list[BeatKeypoints]
    tp_intervals: list[tuple[int, int]]

    def validate(self, length: int) -> None:
        if len(self.beats) != len(self.r_peaks):
            raise ValueError("one BeatKeypoints entry required per R peak")
        if sorted(self.r_peaks) != list(self.r_peaks):
            raise ValueError("r_peaks must be sorted ascending")
        for r in self.r_peaks:
            if not 0 <= r < length:
                raise ValueError(f"r_peak {r} outside [0, {length})")
        for beat in self.beats:
            idx = list(beat.present().values())
            if any(i != j for i, j in zip(idx, sorted(idx))) or len(set(idx)) != len(idx):
                raise ValueError(f"beat keypoints not strictly increasing: {beat}")
            for i in idx:
                if not 0 <= i < length:
                    raise ValueError(f"keypoint {i} outside [0, {length})")
        prev_end = -1
        for a, b in self.tp_intervals:
            if not (0 <= a < b <= length):
                raise ValueError(f"bad TP interval [{a}, {b})")
            if a < prev_end:
                raise ValueError("TP intervals must be disjoint and ordered")
            prev_end = b


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_BIN_MAGIC = b"TLXE"
_BIN_VERSION = 1


def save_ecg(record: EcgRecord, path: str | Path, format: str | None = None) -> None:
    """Write a record as CSV (header t,ch0..ch11) or the TLXE binary format."""
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "csv":
        lines = ["t," + ",".join(f"ch{i}" for i in range(N_CHANNELS))]
        for i, row in enumerate(record.samples):
            lines.append(f"{i / record.fs:.6f}," + ",".join(repr(float(v)) for v in row))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    elif fmt == "bin":
        labels = record.labels if record.labels is not None else np.zeros(0, np.uint8)
        blob = [
            struct.pack("<4sIIId", _BIN_MAGIC, _BIN_VERSION, record.length,
                        N_CHANNELS, record.fs),
            record.samples.astype("<f4").tobytes(),
            struct.pack("<IIB", record.valid_range[0], record.valid_range[1], len(labels)),
            labels.astype(np.uint8).tobytes(),
            struct.pack("<B", 1 if record.target is not None else 0),
        ]
        if record.target is not None:
            blob.append(struct.pack("<d", record.target))
        path.write_bytes(b"".join(blob))
    else:
        raise ConfigError(f"unknown ECG format {fmt!r} (expected csv or bin)")


def load_ecg(path: str | Path, format: str | None = None, fs: float | None = None) -> EcgRecord:
    """Read a record from CSV or TLXE binary; the channel count must be 12."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such ECG file: {path}")
    fmt = format or _infer_format(path)
    if fmt == "csv":
        return _load_csv(path, fs)
    if fmt == "bin":
        return _load_bin(path)
    raise ConfigError(f"unknown ECG format {fmt!r} (expected csv or bin)")


def _infer_format(path: Path) -> str:
    ext = path.suffix.lower()
    return {"csv": "csv", ".csv": "csv", ".bin": "bin", ".tlxe": "bin"}.get(ext, ext.lstrip("."))


def _load_csv(path: Path, fs: float | None) -> EcgRecord:
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise DataFormatError(f"{path.name} line 1: empty file")
    header = [h.strip() for h in lines[0].split(",")]
    expected = ["t"] + [f"ch{i}" for i in range(N_CHANNELS)]
    if len(header) != len(expected):
        raise DataFormatError(
            f"{path.name} line 1: expected {len(expected)} columns "
            f"({N_CHANNELS} channels), got {len(header)}"
        )
    if header != expected:
        raise DataFormatError(f"{path.name} line 1: malformed header {header}")
    times, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != len(expected):
            raise DataFormatError(
                f"{path.name} line {lineno}: expected {len(expected)} fields, got {len(fields)}"
            )
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise DataFormatError(f"{path.name} line {lineno}: {exc}") from None
        times.append(vals[0])
        rows.append(vals[1:])
    if not rows:
        raise DataFormatError(f"{path.name} line 2: no sample rows")
    if fs is None:
        if len(times) >= 2 and times[1] > times[0]:
            fs = 1.0 / (times[1] - times[0])
        else:
            raise DataFormatError(f"{path.name}: cannot infer sampling rate; pass fs explicitly")
    samples = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(samples).all():
        bad = int(np.argwhere(~np.isfinite(samples))[0][0])
        raise DataFormatError(f"{path.name} line {bad + 2}: non-finite value")
    return EcgRecord(id=path.stem, samples=samples, fs=round(fs, 6))


def _load_bin(path: Path) -> EcgRecord:
    buf = path.read_bytes()
    head_fmt = "<4sIIId"
    head_len = struct.calcsize(head_fmt)
    if len(buf) < head_len:
        raise DataFormatError(f"{path.name} offset 0: truncated header")
    magic, version, L, n_ch, fs = struct.unpack_from(head_fmt, buf, 0)
    if magic != _BIN_MAGIC:
        raise DataFormatError(f"{path.name} offset 0: bad magic {magic!r}")
    if version != _BIN_VERSION:
        raise DataFormatError(f"{path.name} offset 4: unsupported version {version}")
    if n_ch != N_CHANNELS:
        raise DataFormatError(f"{path.name} offset 12: channel count {n_ch} != {N_CHANNELS}")
    off = head_len
    n_bytes = L * n_ch * 4
    if len(buf) < off + n_bytes + struct.calcsize("<IIB"):
        raise DataFormatError(f"{path.name} offset {off}: truncated sample block")
    samples = np.frombuffer(buf, dtype="<f4", count=L * n_ch, offset=off).reshape(L, n_ch)
    off += n_bytes
    v0, v1, n_labels = struct.unpack_from("<IIB", buf, off)
    off += struct.calcsize("<IIB")
    if len(buf) < off + n_labels + 1:
        raise DataFormatError(f"{path.name} offset {off}: truncated label block")
    labels = np.frombuffer(buf, dtype=np.uint8, count=n_labels, offset=off) if n_labels else None
    off += n_labels
    (has_target,) = struct.unpack_from("<B", buf, off)
    off += 1
    target = None
    if has_target:
        if len(buf) < off + 8:
            raise DataFormatError(f"{path.name} offset {off}: missing target value")
        (target,) = struct.unpack_from("<d", buf, off)
    return EcgRecord(id=path.stem, samples=samples.copy(), fs=fs,
                     valid_range=(v0, v1), labels=labels, target=target)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic record.

    Classes: 0 baseline, 1 widened QRS, 2 elevated ST / tall early T,
    3 inverted T. ``age`` modulates morphology continuously and becomes the
    record target. ``pad_to`` zero-pads both ends and sets valid_range.
    """

    fs: float = 500.0
    n_beats: int = 8
    rr_ms: float = 800.0
    class_id: int = 0
    seed: int = 0
    age: float | None = None
    noise_mv: float = 0.0
    wander_mv: float = 0.0
    amp_jitter: float = 0.05
    rr_jitter_ms: float = 10.0
    lead_in_ms: float = 400.0
    lead_out_ms: float = 600.0
    pad_to: int | None = None
    p_scale: float = 1.0


_WAVES = ("p", "q", "r", "s", "t")
_BASE_MU_MS = {"p": -160.0, "q": -22.0, "r": 0.0, "s": 28.0, "t": 270.0}
_BASE_SIGMA_MS = {"p": 22.0, "q": 9.0, "r": 12.0, "s": 10.0, "t": 55.0}
_BASE_AMP_MV = {"p": 0.12, "q": -0.18, "r": 1.10, "s": -0.25, "t": 0.35}

# Projection of each wave onto the 12 channels; lead II (column 1) carries the
# template amplitudes unchanged, aVR (column 3) is inverted, V1 has a
# dominant-negative R.
_LEAD_GAIN = np.array([
    [0.70, 1.0, 0.50, -0.80, 0.30, 0.75, 0.35, 0.45, 0.55, 0.60, 0.65, 0.60],  # P
    [0.60, 1.0, 0.60, -0.75, 0.25, 0.80, 0.30, 0.50, 0.70, 0.85, 0.80, 0.70],  # Q
    [0.80, 1.0, 0.45, -0.90, 0.40, 0.70, -0.50, -0.20, 0.35, 0.90, 1.05, 0.95],  # R
    [0.70, 1.0, 0.55, -0.80, 0.35, 0.75, 1.20, 1.00, 0.80, 0.50, 0.35, 0.30],  # S
    [0.75, 1.0, 0.50, -0.85, 0.30, 0.70, 0.25, 0.60, 0.80, 0.90, 0.85, 0.75],  # T
])


def beat_template(spec: SynthSpec, window_ms: tuple[float, float] = (300.0, 500.0),
                  lead: int = 1) -> np.ndarray:
    """Noise- and jitter-free single-beat waveform around R, for reference."""
    mu, sigma, amp = _beat_params(spec.class_id, spec.age, spec.p_scale)
    n_before = int(round(window_ms[0] * spec.fs / 1000.0))
    n_total = int(round((window_ms[0] + window_ms[1]) * spec.fs / 1000.0))
    t_ms = (np.arange(n_total) - n_before) * 1000.0 / spec.fs
    out = np.zeros(n_total)
    for wi, w in enumerate(_WAVES):
        out += amp[w] * _LEAD_GAIN[wi, lead] * np.exp(
            -0.5 * ((t_ms - mu[w]) / sigma[w]) ** 2)
    return out


def _beat_params(class_id: int, age: float | None, p_scale: float):
    if class_id not in (0, 1, 2, 3):
        raise ConfigError(f"class_id must be 0..3, got {class_id}")
    mu = dict(_BASE_MU_MS)
    sigma = dict(_BASE_SIGMA_MS)
    amp = dict(_BASE_AMP_MV)
    if class_id == 1:      # widened QRS
        for w in ("q", "r", "s"):
            sigma[w] *= 1.9
        amp["r"] *= 0.85
        mu["s"] += 18.0
    elif class_id == 2:    # elevated ST: tall, early, broad T
        amp["t"] *= 1.8
        mu["t"] -= 60.0
        sigma["t"] *= 1.35
    elif class_id == 3:    # inverted T
        amp["t"] *= -1.1
    if age is not None:
        a = (float(age) - 50.0) / 30.0
        for w in ("q", "r", "s"):
            sigma[w] *= 1.0 + 0.25 * a
        amp["t"] *= 1.0 - 0.35 * a
        amp["p"] *= 1.0 - 0.20 * a
        amp["r"] *= 1.0 - 0.15 * a
    amp["p"] *= p_scale
    return mu, sigma, amp


def synth_ecg(spec: SynthSpec, record_id: str | None = None) -> tuple[EcgRecord, KeypointSet]:
    """Generate one record plus its ground-truth keypoints.

    Each beat is a sum of five Gaussian bumps (P, Q, R, S, T) projected onto
    the 12 channels. Keypoints come from the generator parameters (peak at the
    bump center, onset/offset at the 10% points), not from detection.
    """
    if spec.fs < 100:
        raise ConfigError(f"fs must be >= 100 Hz, got {spec.fs}")
    if spec.n_beats < 1:
        raise ConfigError(f"n_beats must be >= 1, got {spec.n_beats}")
    rng = np.random.default_rng(spec.seed)
    sp_ms = spec.fs / 1000.0  # samples per millisecond
    mu, sigma, amp = _beat_params(spec.class_id, spec.age, spec.p_scale)

    centers_ms = [spec.lead_in_ms]
    for _ in range(spec.n_beats - 1):
        centers_ms.append(centers_ms[-1] + spec.rr_ms
                          + rng.uniform(-spec.rr_jitter_ms, spec.rr_jitter_ms))
    core_len = int(round((centers_ms[-1] + spec.lead_out_ms) * sp_ms))

    core = np.zeros((core_len, N_CHANNELS))
    idx = np.arange(core_len, dtype=np.float64)
    beats: list[BeatKeypoints] = []
    r_peaks: list[int] = []
    for c_ms in centers_ms:
        for wi, w in enumerate(_WAVES):
            a = amp[w] * (1.0 + spec.amp_jitter * rng.uniform(-1.0, 1.0))
            mu_s = (c_ms + mu[w]) * sp_ms
            sig_s = sigma[w] * sp_ms
            lo = max(0, int(mu_s - 5 * sig_s))
            hi = min(core_len, int(mu_s + 5 * sig_s) + 2)
            if lo >= hi:
                continue
            bump = np.exp(-0.5 * ((idx[lo:hi] - mu_s) / sig_s) ** 2)
            core[lo:hi, :] += (a * bump)[:, None] * _LEAD_GAIN[wi][None, :]

        def _at(ms: float) -> int | None:
            i = int(round(ms * sp_ms))
            return i if 0 <= i < core_len else None

        beat = BeatKeypoints(
            qrs_on=_at(c_ms + mu["q"] - _K10 * sigma["q"]),
            qrs_off=_at(c_ms + mu["s"] + _K10 * sigma["s"]),
            t_on=_at(c_ms + mu["t"] - _K10 * sigma["t"]),
            t_peak=_at(c_ms + mu["t"]),
            t_off=_at(c_ms + mu["t"] + _K10 * sigma["t"]),
        )
        if abs(amp["p"]) >= 0.02:
            beat.p_on = _at(c_ms + mu["p"] - _K10 * sigma["p"])
            beat.p_peak = _at(c_ms + mu["p"])
            beat.p_off = _at(c_ms + mu["p"] + _K10 * sigma["p"])
        # Overlapping bumps can bury one wave's boundary inside another
        # (broad early T after a wide QRS); the buried point is absent.
        _enforce_order(beat)
        beats.append(beat)
        r_peaks.append(int(round(c_ms * sp_ms)))

    if spec.noise_mv > 0:
        core += rng.normal(0.0, spec.noise_mv, size=core.shape)
    if spec.wander_mv > 0:
        phase = rng.uniform(0.0, 2 * np.pi, size=N_CHANNELS)
        t_sec = idx / spec.fs
        core += spec.wander_mv * np.sin(2 * np.pi * 0.3 * t_sec[:, None] + phase[None, :])

    pad_left = 0
    if spec.pad_to is not None:
        if core_len > spec.pad_to:
            raise ConfigError(
                f"generated {core_len} samples, does not fit pad_to={spec.pad_to}")
        pad_total = spec.pad_to - core_len
        pad_left = int(rng.integers(0, pad_total + 1)) if pad_total else 0
        samples = np.zeros((spec.pad_to, N_CHANNELS))
        samples[pad_left:pad_left + core_len] = core
    else:
        samples = core

    if pad_left:
        r_peaks = [r + pad_left for r in r_peaks]
        for beat in beats:
            for f in BEAT_FIELDS:
                v = getattr(beat, f)
                if v is not None:
                    setattr(beat, f, v + pad_left)

    tp: list[tuple[int, int]] = []
    for prev, nxt in zip(beats[:-1], beats[1:]):
        if prev.t_off is not None and nxt.p_on is not None and prev.t_off < nxt.p_on:
            tp.append((prev.t_off, nxt.p_on))

    labels = np.zeros(4, np.uint8)
    labels[spec.class_id] = 1
    record = EcgRecord(
        id=record_id or f"synth{spec.seed:08d}",
        samples=samples,
        fs=spec.fs,
        valid_range=(pad_left, pad_left + core_len),
        labels=labels,
        target=spec.age,
    )
    keypoints = KeypointSet(r_peaks=r_peaks, beats=beats, tp_intervals=tp)
    keypoints.validate(record.length)
    return record, keypoints


def synth_corpus(n: int, seed: int, task: str = "classify4", fs: float = 100.0,
                 length: int = 1024, noise_mv: float = 0.02, wander_mv: float = 0.04,
                 ) -> tuple[list[EcgRecord], list[KeypointSet]]:
    """Build a corpus of fixed-length padded records for one task.

    classify4 cycles the four morphology classes; age draws a target in
    [18, 85] that modulates morphology and heart rate.
    """
    if task not in ("classify4", "age"):
        raise ConfigError(f"unknown task {task!r}")
    root = np.random.default_rng(seed)
    records, keypoints = [], []
    for i in range(n):
        n_beats = int(root.integers(9, 12))
        age = None
        if task == "age":
            class_id = 0
            age = float(root.uniform(18.0, 85.0))
            rr = 800.0 + 1.6 * (age - 50.0) + float(root.uniform(-25.0, 25.0))
        else:
            class_id = i % 4
            rr = float(root.uniform(750.0, 870.0))
        spec = SynthSpec(
            fs=fs, n_beats=n_beats, rr_ms=rr, class_id=class_id,
            seed=int(root.integers(0, 2**31)), age=age,
            noise_mv=noise_mv, wander_mv=wander_mv,
            amp_jitter=0.06, rr_jitter_ms=15.0, pad_to=length,
        )
        rec, kp = synth_ecg(spec, record_id=f"r{i:05d}c{class_id}")
        records.append(rec)
        keypoints.append(kp)
    return records, keypoints


# ---------------------------------------------------------------------------
# R-peak detection (Pan-Tompkins style)
# ---------------------------------------------------------------------------

def _movavg(x: np.ndarray, w: int) -> np.ndarray:
    if w <= 1:
        return x.copy()
    return np.convolve(x, np.full(w, 1.0 / w), mode="same")


def detect_rpeaks(ecg: EcgRecord, lead: int = 1) -> list[int]:
    """Locate R peaks on one lead inside the record's valid range.

    Band-pass (5-15 Hz via cascaded moving averages), derivative, squaring,
    moving-window integration, then adaptive-threshold peak picking with a
    200 ms refractory period. Returns sorted sample indices.
    """
    s0, s1 = ecg.valid_range
    x = ecg.samples[s0:s1, lead].astype(np.float64)
    fs = ecg.fs
    n = x.size
    if n < int(0.5 * fs):
        return []

    bp = x - _movavg(x, max(2, int(round(fs / 5.0))))
    bp = _movavg(bp, max(2, int(round(fs / 15.0))))
    d = np.zeros_like(bp)
    d[2:-2] = (2.0 * (bp[3:-1] - bp[1:-3]) + (bp[4:] - bp[:-4])) / 8.0
    mwi = _movavg(d * d, max(2, int(round(0.150 * fs))))

    cand = np.flatnonzero((mwi[1:-1] > mwi[:-2]) & (mwi[1:-1] >= mwi[2:])) + 1
    if cand.size == 0:
        return []
    init = mwi[: max(1, min(n, int(2 * fs)))]
    spki = 0.5 * float(init.max())
    npki = 0.25 * float(init.mean())
    refractory = int(round(0.2 * fs))
    accepted: list[int] = []
    last = -10 ** 9
    for i in cand:
        thr = npki + 0.25 * (spki - npki)
        if mwi[i] > max(thr, 1e-12) and i - last >= refractory:
            accepted.append(int(i))
            last = int(i)
            spki = 0.125 * mwi[i] + 0.875 * spki
        else:
            npki = 0.125 * mwi[i] + 0.875 * npki

    half = int(round(0.10 * fs))
    refined: list[int] = []
    for i in accepted:
        lo, hi = max(0, i - half), min(n, i + half + 1)
        refined.append(lo + int(np.argmax(x[lo:hi])))
    peaks: list[int] = []
    for j in sorted(set(refined)):
        if peaks and j - peaks[-1] < refractory:
            if x[j] > x[peaks[-1]]:
                peaks[-1] = j
        else:
            peaks.append(j)
    return [p + s0 for p in peaks]


# ---------------------------------------------------------------------------
# Wave delineation
# ---------------------------------------------------------------------------

def delineate(ecg: EcgRecord, r_peaks: list[int], lead: int = 1) -> KeypointSet:
    """Find P/QRS/T on-peak-off points in fixed windows around each R peak.

    Peaks are extrema relative to a local baseline, onsets/offsets the 10%
    crossings (QRS bounds additionally require the slope to die down).
    Points that cannot be established are absent.
    """
    if not r_peaks or sorted(r_peaks) != list(r_peaks):
        raise ConfigError("r_peaks must be nonempty and sorted")
    s0, s1 = ecg.valid_range
    x = ecg.samples[:, lead].astype(np.float64)
    fs = ecg.fs

    def samp(ms: float) -> int:
        return int(round(ms * fs / 1000.0))

    beats: list[BeatKeypoints] = []
    for r in r_peaks:
        base_lo, base_hi = max(s0, r + samp(-350)), max(s0, r + samp(-280))
        if base_hi - base_lo >= 3:
            baseline = float(np.median(x[base_lo:base_hi]))
        else:
            w_lo, w_hi = max(s0, r + samp(-300)), min(s1, r + samp(500))
            baseline = float(np.median(x[w_lo:w_hi]))

        beat = BeatKeypoints()
        r_amp = x[r] - baseline

        p = _bump_points(x, baseline, max(s0, r + samp(-250)), min(s1, r + samp(-60)),
                         min_amp=0.05)
        if p:
            beat.p_on, beat.p_peak, beat.p_off = p

        q_lo, q_hi = max(s0, r + samp(-100)), min(s1, r + samp(100) + 1)
        if q_hi - q_lo >= 5:
            seg = x[q_lo:q_hi]
            slope = np.zeros_like(seg)
            slope[1:-1] = (seg[2:] - seg[:-2]) * 0.5
            thr_s = 0.08 * float(np.abs(slope).max())
            thr_a = 0.10 * abs(r_amp)
            quiet = (np.abs(slope) < thr_s) & (np.abs(seg - baseline) < thr_a)
            r_rel = r - q_lo
            left = np.flatnonzero(quiet[:r_rel])
            if left.size:
                beat.qrs_on = q_lo + int(left[-1])
            right = np.flatnonzero(quiet[r_rel + 1:])
            if right.size:
                beat.qrs_off = q_lo + r_rel + 1 + int(right[0])

        t = _bump_points(x, baseline, max(s0, r + samp(80)), min(s1, r + samp(450)),
                         min_amp=0.05)
        if t:
            beat.t_on, beat.t_peak, beat.t_off = t

        _enforce_order(beat)
        beats.append(beat)

    tp: list[tuple[int, int]] = []
    for prev, nxt in zip(beats[:-1], beats[1:]):
        if prev.t_off is not None and nxt.p_on is not None and prev.t_off < nxt.p_on:
            tp.append((prev.t_off, nxt.p_on))
    out = KeypointSet(r_peaks=list(r_peaks), beats=beats, tp_intervals=tp)
    out.validate(ecg.length)
    return out


def _bump_points(x: np.ndarray, baseline: float, lo: int, hi: int,
                 min_amp: float) -> tuple[int, int, int] | None:
    """Extremum peak plus its 10% onset/offset crossings inside [lo, hi)."""
    if hi - lo < 5:
        return None
    seg = x[lo:hi] - baseline
    pk = int(np.argmax(np.abs(seg)))
    amp = seg[pk]
    if abs(amp) < min_amp:
        return None
    level = 0.10 * abs(amp)
    below = np.abs(seg) <= level
    left = np.flatnonzero(below[:pk])
    right = np.flatnonzero(below[pk + 1:])
    if left.size == 0 or right.size == 0:
        return None
    on = lo + int(left[-1])
    off = lo + pk + 1 + int(right[0])
    return on, lo + pk, off


def _enforce_order(beat: BeatKeypoints) -> None:
    # Keep the earliest points and drop any later one that breaks the order.
    prev = -1
    for f in BEAT_FIELDS:
        v = getattr(beat, f)
        if v is None:
            continue
        if v <= prev:
            setattr(beat, f, None)
        else:
            prev = v


# ---------------------------------------------------------------------------
# Beat stacking
# ---------------------------------------------------------------------------

def stack_beats(ecg: EcgRecord, r_peaks: list[int],
                window_ms: tuple[float, float] = (300.0, 500.0)) -> np.ndarray:
    """Cut one fixed-length window around each R peak; edge-truncated beats
    are dropped. Returns (n_beats, window_len, 12)."""
    w_before, w_after = window_ms
    n_before = int(round(w_before * ecg.fs / 1000.0))
    win_len = int(round((w_before + w_after) * ecg.fs / 1000.0))
    out = []
    for r in r_peaks:
        start = r - n_before
        if start < 0 or start + win_len > ecg.length:
            continue
        out.append(ecg.samples[start:start + win_len, :])
    if not out:
        return np.zeros((0, win_len, N_CHANNELS), dtype=np.float32)
    return np.stack(out)
