"""Portable 1D-CNN inference with activation taps and reverse-mode gradients.

Activations are time-major (d timesteps, c channels) float arrays. The layer
vocabulary is fixed: conv1d, batchnorm, relu, maxpool, residual_block,
flatten, dense, and a sigmoid/linear head tag. Reverse mode covers exactly
this vocabulary; there is no general autograd and no training here.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError, NumericError, ShapeError
from .signal import EcgRecord

_BUNDLE_MAGIC = b"TLXW"
_BUNDLE_VERSION = 1
_ALIGN = 64

_EPS_LOG = 1e-12


@dataclass
class WeightsBundle:
    """Architecture list, named parameter tensors, and input metadata."""

    arch: list
    params: dict
    meta: dict

    def __post_init__(self):
        for key in ("input_length", "input_channels", "tap_names"):
            if key not in self.meta:
                raise ConfigError(f"bundle meta missing {key!r}")
        self.params = {k: np.asarray(v, dtype=np.float32) for k, v in self.params.items()}
        shapes = infer_shapes(self.arch, self.meta["input_length"],
                              self.meta["input_channels"], self.params)
        for tap in self.meta["tap_names"]:
            if tap not in shapes:
                raise ConfigError(f"tap {tap!r} does not name a layer")
        self._shapes = shapes

    def layer_shapes(self) -> dict:
        """Layer name -> (d, c) output shape, or scalar length after flatten."""
        return dict(self._shapes)


@dataclass
class Activation:
    """Output of one tapped layer, time-major."""

    layer_name: str
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise ShapeError(f"activation {self.layer_name!r} must be (d, c)")
        if not np.isfinite(self.data).all():
            raise NumericError(f"non-finite activation at {self.layer_name!r}")

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# Shape inference and parameter validation
# ---------------------------------------------------------------------------

def _conv_out_len(L: int, kernel: int, stride: int, pad: int) -> int:
    out = (L + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"conv output length {out} < 1 (L={L}, k={kernel})")
    return out


def _expect(params: dict, name: str, key: str, shape: tuple) -> None:
    full = f"{name}.{key}"
    if full not in params:
        raise ShapeError(f"{name}: missing tensor {full!r}")
    got = tuple(params[full].shape)
    if got != shape:
        raise ShapeError(f"{name}: tensor {key} expected shape {shape}, got {got}")


def _infer_chain(layers: list, d: int, c: int, params: dict, shapes: dict):
    for spec in layers:
        d, c = _infer_layer(spec, d, c, params, shapes)
    return d, c


def _infer_layer(spec: dict, d, c, params: dict, shapes: dict):
    kind = spec["type"]
    name = spec["name"]
    if kind == "conv1d":
        if spec["in_ch"] != c:
            raise ShapeError(f"{name}: expects {spec['in_ch']} input channels, got {c}")
        _expect(params, name, "weight", (spec["out_ch"], spec["in_ch"], spec["kernel"]))
        _expect(params, name, "bias", (spec["out_ch"],))
        d = _conv_out_len(d, spec["kernel"], spec["stride"], spec["pad"])
        c = spec["out_ch"]
    elif kind == "batchnorm":
        if spec["ch"] != c:
            raise ShapeError(f"{name}: normalizes {spec['ch']} channels, got {c}")
        for key in ("gamma", "beta", "mean", "var"):
            _expect(params, name, key, (c,))
    elif kind == "relu":
        pass
    elif kind == "maxpool":
        out = (d - spec["kernel"]) // spec["stride"] + 1
        if out < 1:
            raise ShapeError(f"{name}: pool output length {out} < 1")
        d = out
    elif kind == "residual_block":
        d_in, c_in = d, c
        d, c = _infer_chain(spec["inner"], d_in, c_in, params, shapes)
        if spec.get("skip") is not None:
            d_s, c_s = _infer_layer(spec["skip"], d_in, c_in, params, shapes)
        else:
            d_s, c_s = d_in, c_in
        if (d_s, c_s) != (d, c):
            raise ShapeError(
                f"{name}: inner path gives ({d},{c}) but skip gives ({d_s},{c_s})")
    elif kind == "flatten":
        d, c = d * c, 0  # scalar vector length from here on
    elif kind == "dense":
        length = d if c == 0 else d * c
        if spec["in"] != length:
            raise ShapeError(f"{name}: expects input length {spec['in']}, got {length}")
        _expect(params, name, "weight", (spec["out"], spec["in"]))
        _expect(params, name, "bias", (spec["out"],))
        d, c = spec["out"], 0
    elif kind in ("sigmoid", "linear"):
        pass
    else:
        raise ConfigError(f"{name}: unknown layer type {kind!r}")
    shapes[name] = (d, c) if c else (d,)
    return d, c


def infer_shapes(arch: list, input_length: int, input_channels: int,
                 params: dict) -> dict:
    """Validate every tensor against the architecture; map name -> shape."""
    seen = set()
    def check_names(layers):
        for spec in layers:
            if "name" not in spec or "type" not in spec:
                raise ConfigError(f"layer spec missing name/type: {spec}")
            if spec["name"] in seen:
                raise ConfigError(f"duplicate layer name {spec['name']!r}")
            seen.add(spec["name"])
            if spec["type"] == "residual_block":
                check_names(spec["inner"])
                if spec.get("skip") is not None:
                    check_names([spec["skip"]])
    check_names(arch)
    shapes: dict = {}
    _infer_chain(arch, input_length, input_channels, params, shapes)
    return shapes


# ---------------------------------------------------------------------------
# Forward / backward per layer
# ---------------------------------------------------------------------------

def _conv_forward(spec, params, x):
    W = params[f"{spec['name']}.weight"].astype(np.float64)
    b = params[f"{spec['name']}.bias"].astype(np.float64)
    k, stride, pad = spec["kernel"], spec["stride"], spec["pad"]
    L = x.shape[0]
    xp = np.zeros((L + 2 * pad, x.shape[1]))
    xp[pad:pad + L] = x
    Lout = (L + 2 * pad - k) // stride + 1
    idx = np.arange(Lout)[:, None] * stride + np.arange(k)[None, :]
    xw = xp[idx]                                   # (Lout, k, Cin)
    y = np.tensordot(xw, W, axes=([1, 2], [2, 1])) + b[None, :]
    return y, (x.shape, idx, xp.shape)


def _conv_backward(spec, params, dy, saved):
    W = params[f"{spec['name']}.weight"].astype(np.float64)
    (L, _), idx, xp_shape = saved
    pad = spec["pad"]
    dxw = np.einsum("lo,oik->lki", dy, W)          # (Lout, k, Cin)
    dxp = np.zeros(xp_shape)
    np.add.at(dxp, idx, dxw)
    return dxp[pad:pad + L]


def _maxpool_forward(spec, x):
    k, stride = spec["kernel"], spec["stride"]
    Lout = (x.shape[0] - k) // stride + 1
    starts = np.arange(Lout) * stride
    xw = x[starts[:, None] + np.arange(k)[None, :]]   # (Lout, k, C)
    arg = xw.argmax(axis=1)                           # first max on ties
    y = np.take_along_axis(xw, arg[:, None, :], axis=1)[:, 0, :]
    return y, (x.shape, starts, arg)


def _maxpool_backward(dy, saved):
    x_shape, starts, arg = saved
    dx = np.zeros(x_shape)
    rows = starts[:, None] + arg
    cols = np.broadcast_to(np.arange(x_shape[1])[None, :], rows.shape)
    np.add.at(dx, (rows, cols), dy)
    return dx


def _bn_scale(spec, params):
    name = spec["name"]
    gamma = params[f"{name}.gamma"].astype(np.float64)
    var = params[f"{name}.var"].astype(np.float64)
    return gamma / np.sqrt(var + spec["eps"])


def _layer_forward(spec, params, x, tape):
    """Run one layer; append (spec, saved) to tape when one is given."""
    kind = spec["type"]
    if kind == "conv1d":
        y, saved = _conv_forward(spec, params, x)
    elif kind == "batchnorm":
        name = spec["name"]
        scale = _bn_scale(spec, params)
        beta = params[f"{name}.beta"].astype(np.float64)
        mean = params[f"{name}.mean"].astype(np.float64)
        y, saved = (x - mean[None, :]) * scale[None, :] + beta[None, :], None
    elif kind == "relu":
        y, saved = np.maximum(x, 0.0), x > 0
    elif kind == "maxpool":
        y, saved = _maxpool_forward(spec, x)
    elif kind == "residual_block":
        inner_tape = [] if tape is not None else None
        y_inner = x
        for inner_spec in spec["inner"]:
            y_inner = _layer_forward(inner_spec, params, y_inner, inner_tape)
        if spec.get("skip") is not None:
            skip_tape = [] if tape is not None else None
            y_skip = _layer_forward(spec["skip"], params, x, skip_tape)
        else:
            y_skip, skip_tape = x, None
        y, saved = y_inner + y_skip, (inner_tape, skip_tape)
    elif kind == "flatten":
        y, saved = x.T.reshape(-1), x.shape
    elif kind == "dense":
        name = spec["name"]
        W = params[f"{name}.weight"].astype(np.float64)
        b = params[f"{name}.bias"].astype(np.float64)
        y, saved = W @ x + b, None
    elif kind == "sigmoid":
        y = 1.0 / (1.0 + np.exp(-x))
        saved = y
    elif kind == "linear":
        y, saved = x, None
    else:
        raise ConfigError(f"unknown layer type {kind!r}")
    if tape is not None:
        tape.append((spec, saved))
    return y


def _layer_backward(spec, params, dy, saved):
    kind = spec["type"]
    if kind == "conv1d":
        return _conv_backward(spec, params, dy, saved)
    if kind == "batchnorm":
        return dy * _bn_scale(spec, params)[None, :]
    if kind == "relu":
        return dy * saved
    if kind == "maxpool":
        return _maxpool_backward(dy, saved)
    if kind == "residual_block":
        inner_tape, skip_tape = saved
        dx = dy
        for inner_spec, inner_saved in reversed(inner_tape):
            dx = _layer_backward(inner_spec, params, dx, inner_saved)
        if spec.get("skip") is not None:
            skip_spec, skip_saved = skip_tape[0]
            dskip = _layer_backward(skip_spec, params, dy, skip_saved)
        else:
            dskip = dy
        return dx + dskip
    if kind == "flatten":
        d, c = saved
        return dy.reshape(c, d).T
    if kind == "dense":
        W = params[f"{spec['name']}.weight"].astype(np.float64)
        return W.T @ dy
    if kind == "sigmoid":
        return dy * saved * (1.0 - saved)
    if kind == "linear":
        return dy
    raise ConfigError(f"unknown layer type {kind!r}")


def _as_input(bundle: WeightsBundle, ecg) -> np.ndarray:
    x = ecg.samples if isinstance(ecg, EcgRecord) else np.asarray(ecg)
    if x.ndim != 2 or x.shape[1] != bundle.meta["input_channels"]:
        raise ShapeError(
            f"input must be (L, {bundle.meta['input_channels']}), got {x.shape}")
    if x.shape[0] != bundle.meta["input_length"]:
        raise ShapeError(
            f"input length {x.shape[0]} != bundle input_length "
            f"{bundle.meta['input_length']}")
    if not np.isfinite(x).all():
        raise NumericError("non-finite input")
    return x.astype(np.float64)


def forward(bundle: WeightsBundle, ecg, taps: list[str] | None = None
            ) -> tuple[np.ndarray, list[Activation]]:
    """Run the network; return head output and one Activation per tap.

    ``taps`` defaults to the bundle's own tap_names. Activations come back in
    network order regardless of the order requested.
    """
    if taps is None:
        taps = list(bundle.meta["tap_names"])
    known = bundle.layer_shapes()
    for t in taps:
        if t not in known:
            raise ConfigError(f"tap {t!r} does not name a layer")
    want = set(taps)
    x = _as_input(bundle, ecg)
    acts: list[Activation] = []
    for spec in bundle.arch:
        x = _layer_forward(spec, bundle.params, x, None)
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite values after layer {spec['name']!r}")
        if spec["name"] in want:
            acts.append(Activation(layer_name=spec["name"], data=x.copy()))
    return x, acts


def grad_wrt_tap(bundle: WeightsBundle, ecg, target_index: int, tap: str
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(output, tap activation, d output[target] / d activation)."""
    if tap not in {spec["name"] for spec in bundle.arch}:
        raise ConfigError(f"tap {tap!r} does not name a top-level layer")
    out = _as_input(bundle, ecg)
    tape: list = []
    tap_pos = tap_act = None
    for i, spec in enumerate(bundle.arch):
        out = _layer_forward(spec, bundle.params, out, tape)
        if spec["name"] == tap:
            tap_pos, tap_act = i, out
    output = out
    if not (0 <= target_index < output.shape[0]):
        raise ConfigError(
            f"target_index {target_index} outside output of size {output.shape[0]}")
    grad = np.zeros_like(output)
    grad[target_index] = 1.0
    for spec, saved in reversed(tape[tap_pos + 1:]):
        grad = _layer_backward(spec, bundle.params, grad, saved)
    return output, tap_act, grad


def gradcam(bundle: WeightsBundle, ecg, target_index: int, tap: str,
            merge: str = "max") -> np.ndarray:
    """Saliency over the tap's time axis for one output index.

    Channel weights are the time-averaged gradients of output[target] with
    respect to the tap activation; the weighted channel maps are merged with
    an elementwise max (``merge="sum"`` gives the classic weighted sum) and
    rectified at zero.
    """
    if merge not in ("max", "sum"):
        raise ConfigError(f"merge must be max or sum, got {merge!r}")
    _, act, grad = grad_wrt_tap(bundle, ecg, target_index, tap)
    if act.ndim != 2:
        raise ConfigError(f"tap {tap!r} is not a (d, c) activation")
    alpha = grad.mean(axis=0)                      # (c,)
    weighted = act * alpha[None, :]                # (d, c)
    merged = weighted.max(axis=1) if merge == "max" else weighted.sum(axis=1)
    return np.maximum(merged, 0.0)


def contrast_transform(saliency: np.ndarray, temperature: float = 10.0,
                       temperature_exponent: int = 1) -> np.ndarray:
    """Map a nonnegative saliency vector into (0, 1) with enhanced contrast.

    y = sigmoid(z * temperature**temperature_exponent) where z is the
    standardized log of the map (floored at 1e-12). A constant map has no
    contrast to enhance and comes back as all 0.5.
    """
    s = np.asarray(saliency, dtype=np.float64)
    if (s < 0).any():
        raise NumericError("saliency must be elementwise >= 0")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if temperature_exponent not in (-1, 1):
        raise ConfigError("temperature_exponent must be +1 or -1")
    z = np.log(s + _EPS_LOG)
    std = z.std()
    if std < 1e-15:
        return np.full_like(z, 0.5)
    z = (z - z.mean()) / std
    t = float(temperature) ** temperature_exponent
    return 1.0 / (1.0 + np.exp(-z * t))


# ---------------------------------------------------------------------------
# Reference architecture
# ---------------------------------------------------------------------------

def reference_arch(input_length: int = 4096, input_channels: int = 12,
                   n_out: int = 4, head: str = "sigmoid",
                   channels: tuple = (16, 32, 32, 64, 64), kernel: int = 17,
                   ) -> tuple[list, dict]:
    """Desk-scale topology: one stem conv then five stride-2 residual blocks.

    Returns (arch, meta). The tap names are the post-add activations of the
    last three blocks.
    """
    pad = kernel // 2
    arch = [
        {"type": "conv1d", "name": "conv0", "in_ch": input_channels,
         "out_ch": channels[0], "kernel": kernel, "stride": 1, "pad": pad},
        {"type": "batchnorm", "name": "bn0", "ch": channels[0], "eps": 1e-5},
        {"type": "relu", "name": "relu0"},
    ]
    d = input_length
    prev = channels[0]
    for i, ch in enumerate(channels, start=1):
        name = f"block{i}"
        inner = [
            {"type": "conv1d", "name": f"{name}.conv1", "in_ch": prev, "out_ch": ch,
             "kernel": kernel, "stride": 2, "pad": pad},
            {"type": "batchnorm", "name": f"{name}.bn1", "ch": ch, "eps": 1e-5},
            {"type": "relu", "name": f"{name}.relu1"},
            {"type": "conv1d", "name": f"{name}.conv2", "in_ch": ch, "out_ch": ch,
             "kernel": kernel, "stride": 1, "pad": pad},
            {"type": "batchnorm", "name": f"{name}.bn2", "ch": ch, "eps": 1e-5},
        ]
        skip = {"type": "conv1d", "name": f"{name}.skip", "in_ch": prev,
                "out_ch": ch, "kernel": 1, "stride": 2, "pad": 0}
        arch.append({"type": "residual_block", "name": name, "inner": inner,
                     "skip": skip})
        arch.append({"type": "relu", "name": f"{name}_out"})
        d = (d + 2 * pad - kernel) // 2 + 1
        prev = ch
    arch.append({"type": "flatten", "name": "flatten"})
    arch.append({"type": "dense", "name": "fc", "in": d * prev, "out": n_out})
    arch.append({"type": head, "name": "head"})
    n_blocks = len(channels)
    first_tap = max(1, n_blocks - 2)
    meta = {
        "input_length": input_length,
        "input_channels": input_channels,
        "tap_names": [f"block{i}_out" for i in range(first_tap, n_blocks + 1)],
        "head": head,
    }
    return arch, meta


# ---------------------------------------------------------------------------
# Bundle file format
# ---------------------------------------------------------------------------

def save_bundle(bundle: WeightsBundle, path: str | Path) -> None:
    """Write arch + meta as a JSON header and tensors as aligned float32."""
    path = Path(path)
    names = sorted(bundle.params)
    # First pass with zero offsets fixes the header length, second fills them.
    directory = [{"name": n, "shape": list(bundle.params[n].shape), "offset": 0}
                 for n in names]
    header = {"arch": bundle.arch, "meta": bundle.meta, "tensors": directory}

    def encode(hdr):
        return json.dumps(hdr, sort_keys=True).encode("utf-8")

    base = struct.calcsize("<4sII")
    header_len = len(encode(header))
    # Offsets widen the header by a bounded number of digits; iterate to fix.
    for _ in range(4):
        off = base + header_len
        for entry in directory:
            off = (off + _ALIGN - 1) // _ALIGN * _ALIGN
            entry["offset"] = off
            off += int(np.prod(entry["shape"], dtype=np.int64)) * 4 if entry["shape"] else 4
        blob = encode(header)
        if len(blob) == header_len:
            break
        header_len = len(blob)
    else:
        raise NumericError("header length failed to stabilize")

    out = bytearray(struct.pack("<4sII", _BUNDLE_MAGIC, _BUNDLE_VERSION, header_len))
    out += blob
    for entry in directory:
        if len(out) > entry["offset"]:
            raise NumericError("tensor offsets overlap header")
        out += b"\0" * (entry["offset"] - len(out))
        out += bundle.params[entry["name"]].astype("<f4").tobytes()
    path.write_bytes(bytes(out))


def load_bundle(path: str | Path) -> WeightsBundle:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such bundle file: {path}")
    buf = path.read_bytes()
    base = struct.calcsize("<4sII")
    if len(buf) < base:
        raise DataFormatError(f"{path.name} offset 0: truncated header")
    magic, version, header_len = struct.unpack_from("<4sII", buf, 0)
    if magic != _BUNDLE_MAGIC:
        raise DataFormatError(f"{path.name} offset 0: bad magic {magic!r}")
    if version != _BUNDLE_VERSION:
        raise DataFormatError(f"{path.name} offset 4: unsupported version {version}")
    if len(buf) < base + header_len:
        raise DataFormatError(f"{path.name} offset {base}: truncated JSON header")
    try:
        header = json.loads(buf[base:base + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path.name} offset {base}: bad header ({exc})") from None
    params = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        end = entry["offset"] + count * 4
        if end > len(buf):
            raise DataFormatError(
                f"{path.name} offset {entry['offset']}: tensor {entry['name']!r} "
                f"runs past end of file")
        flat = np.frombuffer(buf, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = flat.reshape(entry["shape"]).copy()
    return WeightsBundle(arch=header["arch"], params=params, meta=header["meta"])
