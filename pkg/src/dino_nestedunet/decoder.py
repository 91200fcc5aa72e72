"""Nested dense decoder grid and segmentation head.

Node ``x[i][0]`` is the projected input ``S_i``. For ``j >= 1`` and
``i + j <= L - 1``::

    x[i][j] = H([U(x[i+1][j-1]), x[i][0], ..., x[i][j-1]])

with ``H`` two Conv3x3-BN-ReLU layers producing ``w_i`` channels and ``U``
the bilinear 2x upsampling below. The upsampled contributor keeps its
``w_{i+1}`` channels, so node ``(i, j)`` takes ``w_{i+1} + j * w_i`` inputs.

Bilinear convention (``align_corners=False``): output pixel ``k`` of a 2x
upsampling reads input coordinate ``(k + 0.5) / 2 - 0.5``, clamped to
``[0, n - 1]``, and interpolates linearly between its two neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError


def upsample(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    if factor == 1:
        return x
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


@dataclass(frozen=True)
class NodeSpec:
    level: int
    column: int
    in_channels: int
    out_channels: int

    @property
    def name(self) -> str:
        return f"x{self.level}_{self.column}"


def grid_nodes(widths) -> list[NodeSpec]:
    """Computed nodes (``j >= 1``) in evaluation order: ``j`` ascending, ``i`` descending."""
    widths = list(widths)
    levels = len(widths)
    nodes = []
    for j in range(1, levels):
        for i in reversed(range(levels - j)):
            nodes.append(NodeSpec(i, j, widths[i + 1] + j * widths[i], widths[i]))
    return nodes


class VGGBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


class NestedDecoder(nn.Module):
    """The grid of ``VGGBlock`` nodes; returns ``x[0][L-1]``."""

    def __init__(self, widths):
        super().__init__()
        widths = list(widths)
        if not widths or any(w < 1 for w in widths):
            raise ValidationError(f"decoder widths must be positive, got {widths}")
        self.widths = widths
        self.specs = grid_nodes(widths)
        self.nodes = nn.ModuleDict({s.name: VGGBlock(s.in_channels, s.out_channels) for s in self.specs})

    @property
    def levels(self) -> int:
        return len(self.widths)

    def node_forward(self, spec: NodeSpec, up_input: torch.Tensor, same_level: list[torch.Tensor]):
        up = upsample(up_input)
        parts = [up, *same_level]
        size = parts[0].shape[-2:]
        for p in parts[1:]:
            if p.shape[-2:] != size:
                raise ShapeError(f"{spec.name}: spatial dims {tuple(p.shape[-2:])} != {tuple(size)}")
        cat = torch.cat(parts, dim=1)
        if cat.shape[1] != spec.in_channels:
            raise ShapeError(f"{spec.name}: concatenated {cat.shape[1]} channels, declared {spec.in_channels}")
        return self.nodes[spec.name](cat)

    def forward(self, inputs: list[torch.Tensor], return_grid: bool = False):
        if len(inputs) != self.levels:
            raise ShapeError(f"expected {self.levels} inputs, got {len(inputs)}")
        for i, (s, w) in enumerate(zip(inputs, self.widths)):
            if s.shape[1] != w:
                raise ShapeError(f"input {i} has {s.shape[1]} channels, expected {w}")
        grid: list[list[torch.Tensor]] = [[s] for s in inputs]
        for spec in self.specs:
            i, j = spec.level, spec.column
            grid[i].append(self.node_forward(spec, grid[i + 1][j - 1], grid[i][:j]))
        top = grid[0][-1]
        return (top, grid) if return_grid else top


def build_grid(cfg) -> NestedDecoder:
    """Decoder grid for a validated ``ModelConfig``."""
    from .config import check_config

    check_config(cfg)
    return NestedDecoder(cfg.decoder_widths)


class SegmentationHead(nn.Module):
    """1x1 conv to class logits, then bilinear upsampling by the finest stride."""

    def __init__(self, width: int, num_classes: int, factor: int):
        super().__init__()
        self.conv = nn.Conv2d(width, num_classes, 1)
        self.factor = factor

    def forward(self, x):
        return upsample(self.conv(x), self.factor)
