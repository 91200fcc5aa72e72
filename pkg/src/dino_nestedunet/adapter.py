"""Spatial prior module and interaction blocks.

The adapter turns an image plus the frozen backbone's maps into a feature
pyramid at ``scale_strides``. Levels are processed coarsest to finest with a
single running stream: the query at level ``i`` is the spatial-prior map
``C_i`` plus the previous (coarser) interaction output upsampled to level
``i``; the coarsest level starts from ``C_i`` alone.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ViTBackbone, extract_backbone_features
from .deform_attn import DeformableCrossAttention
from .errors import ShapeError


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SpatialPrior(nn.Module):
    """Convolutional stem to the finest stride, then one stride-2 stage per level.

    Each level is projected to ``out_dim`` channels by a 1x1 convolution.
    """

    def __init__(self, strides, out_dim: int, width: int = 64):
        super().__init__()
        strides = list(strides)
        self.strides = strides
        n_down = int(math.log2(strides[0]))
        stem = [conv_bn_relu(3, width, stride=2 if n_down else 1)]
        stem += [conv_bn_relu(width, width, stride=2) for _ in range(max(n_down - 1, 0))]
        self.stem = nn.Sequential(*stem)
        chans = [width * min(2 ** i, 4) for i in range(len(strides))]
        self.stages = nn.ModuleList(
            conv_bn_relu(chans[i - 1], chans[i], stride=2) for i in range(1, len(strides))
        )
        self.proj = nn.ModuleList(nn.Conv2d(c, out_dim, 1) for c in chans)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h, w = x.shape[-2:]
        for s in self.strides:
            if h % s or w % s:
                raise ShapeError(f"input {h}x{w} is not divisible by stride {s}")
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return [p(f) for p, f in zip(self.proj, feats)]


class InteractionBlock(nn.Module):
    """Pre-norm deformable cross-attention plus a pointwise feed-forward.

    ``out = y + FFN(LN(y))`` with ``y = q + A(LN(q), LN(F), LN(F))``.
    """

    def __init__(self, dim: int, heads: int = 6, points: int = 4, ffn_ratio: float = 0.25):
        super().__init__()
        self.query_norm = nn.LayerNorm(dim)
        self.feat_norm = nn.LayerNorm(dim)
        self.attn = DeformableCrossAttention(dim, dim, heads, points)
        self.ffn_norm = nn.LayerNorm(dim)
        hidden = max(int(dim * ffn_ratio), 1)
        self.ffn = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    @staticmethod
    def _ln(norm: nn.LayerNorm, x: torch.Tensor) -> torch.Tensor:
        return norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)

    def forward(self, c_prev: torch.Tensor, f_vit: torch.Tensor) -> torch.Tensor:
        if c_prev.shape[:2] != f_vit.shape[:2]:
            raise ShapeError(
                f"query {tuple(c_prev.shape)} and backbone map {tuple(f_vit.shape)} disagree"
            )
        kv = self._ln(self.feat_norm, f_vit)
        y = c_prev + self.attn(self._ln(self.query_norm, c_prev), kv, kv)
        z = self.ffn(self.ffn_norm(y.permute(0, 2, 3, 1))).permute(0, 3, 1, 2)
        return y + z


class Adapter(nn.Module):
    def __init__(self, strides, dim: int, heads=6, points=4, ffn_ratio=0.25, spm_width=64):
        super().__init__()
        self.strides = list(strides)
        self.spm = SpatialPrior(strides, dim, spm_width)
        self.blocks = nn.ModuleList(
            InteractionBlock(dim, heads, points, ffn_ratio) for _ in self.strides
        )

    def forward(self, x: torch.Tensor, vit_feats: list[torch.Tensor]) -> list[torch.Tensor]:
        spatial = self.spm(x)
        out: list[torch.Tensor | None] = [None] * len(spatial)
        state = None
        for i in reversed(range(len(spatial))):
            q = spatial[i]
            if state is not None:
                q = q + F.interpolate(state, size=q.shape[-2:], mode="bilinear", align_corners=False)
            state = self.blocks[i](q, vit_feats[i])
            out[i] = state
        return out


def run_adapter(backbone: ViTBackbone, adapter: Adapter, x: torch.Tensor) -> list[torch.Tensor]:
    """Backbone features, then the spatial prior and interaction chain."""
    feats = extract_backbone_features(backbone, x, adapter.strides)
    return adapter(x, feats)
