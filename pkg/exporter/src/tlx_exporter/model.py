"""Torch definition of the exportable 1D residual network.

The topology is locked to what the bundle consumer can run: a stem conv,
a stack of stride-2 residual blocks (each with a 1x1 strided skip conv),
flatten, one dense layer, and a sigmoid or linear head. Batch norm stays
a separate layer with explicit running statistics so the exported bundle
carries them unfused.
"""

from __future__ import annotations

import torch
from torch import nn


class ResidualBlock(nn.Module):
    """conv(stride 2) -> bn -> relu -> conv -> bn, plus a 1x1 strided skip."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(in_ch, out_ch, kernel, stride=2, padding=pad)
        self.bn1 = nn.BatchNorm1d(out_ch, eps=1e-5)
        self.conv2 = nn.Conv1d(out_ch, out_ch, kernel, stride=1, padding=pad)
        self.bn2 = nn.BatchNorm1d(out_ch, eps=1e-5)
        self.skip = nn.Conv1d(in_ch, out_ch, 1, stride=2, padding=0)

    def forward(self, x):
        inner = self.bn2(self.conv2(torch.relu(self.bn1(self.conv1(x)))))
        return torch.relu(inner + self.skip(x))


class ResNet1d(nn.Module):
    """Small 1D ResNet over (N, 12, L) inputs with tap points after each block.

    ``head`` selects sigmoid (multi-label probabilities) or linear (scalar
    regression) on top of the single dense layer.
    """

    def __init__(self, input_length: int = 1024, input_channels: int = 12,
                 n_out: int = 4, head: str = "sigmoid",
                 channels: tuple = (16, 32, 32, 64, 64), kernel: int = 17):
        super().__init__()
        if head not in ("sigmoid", "linear"):
            raise ValueError(f"head must be sigmoid or linear, got {head!r}")
        self.input_length = input_length
        self.input_channels = input_channels
        self.n_out = n_out
        self.head = head
        self.channels = tuple(channels)
        self.kernel = kernel
        pad = kernel // 2

        self.conv0 = nn.Conv1d(input_channels, channels[0], kernel, stride=1, padding=pad)
        self.bn0 = nn.BatchNorm1d(channels[0], eps=1e-5)
        blocks = []
        d = input_length
        prev = channels[0]
        for ch in channels:
            blocks.append(ResidualBlock(prev, ch, kernel))
            d = (d + 2 * pad - kernel) // 2 + 1
            prev = ch
        self.blocks = nn.ModuleList(blocks)
        self.flat_dim = d * prev
        self.fc = nn.Linear(self.flat_dim, n_out)
        n_blocks = len(self.channels)
        first = max(1, n_blocks - 2)
        self.tap_names = [f"block{i}_out" for i in range(first, n_blocks + 1)]

    def config(self) -> dict:
        """Constructor kwargs; enough to rebuild the module for a checkpoint."""
        return {
            "input_length": self.input_length,
            "input_channels": self.input_channels,
            "n_out": self.n_out,
            "head": self.head,
            "channels": list(self.channels),
            "kernel": self.kernel,
        }

    def _trunk(self, x):
        taps = {}
        h = torch.relu(self.bn0(self.conv0(x)))
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            taps[f"block{i}_out"] = h
        # torch flatten of (N, C, D) is channel-major, matching the consumer.
        return torch.flatten(h, start_dim=1), taps

    def logits(self, x):
        flat, _ = self._trunk(x)
        return self.fc(flat)

    def forward(self, x):
        z = self.logits(x)
        return torch.sigmoid(z) if self.head == "sigmoid" else z

    def forward_with_taps(self, x):
        """Head output plus the {tap_name: (N, c, d)} activations."""
        flat, taps = self._trunk(x)
        z = self.fc(flat)
        y = torch.sigmoid(z) if self.head == "sigmoid" else z
        return y, {name: taps[name] for name in self.tap_names}


def arch_spec(input_length: int, input_channels: int, n_out: int, head: str,
              channels: tuple, kernel: int) -> tuple[list, dict]:
    """Architecture header for the exported bundle, in consumer vocabulary.

    Built independently of the consumer package so the export path does
    not import it; the layer dicts below ARE the interchange contract.
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
        arch.append({"type": "residual_block", "name": name, "inner": inner, "skip": skip})
        arch.append({"type": "relu", "name": f"{name}_out"})
        d = (d + 2 * pad - kernel) // 2 + 1
        prev = ch
    arch.append({"type": "flatten", "name": "flatten"})
    arch.append({"type": "dense", "name": "fc", "in": d * prev, "out": n_out})
    arch.append({"type": head, "name": "head"})
    n_blocks = len(channels)
    first = max(1, n_blocks - 2)
    meta = {
        "input_length": input_length,
        "input_channels": input_channels,
        "tap_names": [f"block{i}_out" for i in range(first, n_blocks + 1)],
        "head": head,
    }
    return arch, meta
