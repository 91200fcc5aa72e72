"""Single-level deformable cross-attention in pure PyTorch.

Coordinates are normalised to [0, 1] with (x, y) order. A location ``u``
maps to the continuous pixel coordinate ``u * W - 0.5`` of the value map,
which is ``grid_sample(align_corners=False)``. Samples falling outside the
map use border padding, so a constant value map yields a constant output
for any offsets.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError


def reference_points(h: int, w: int, device=None, dtype=None) -> torch.Tensor:
    """Pixel-centre coordinates of an ``h x w`` grid, shape (h*w, 2) as (x, y)."""
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def deformable_sample(
    value: torch.Tensor, locations: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Weighted bilinear sampling of a per-head value map.

    Args:
        value: (B, heads, C_head, H, W).
        locations: (B, Lq, heads, points, 2) normalised (x, y) in [0, 1].
        weights: (B, Lq, heads, points), summing to 1 over points.

    Returns:
        (B, Lq, heads * C_head).
    """
    b, nh, ch, h, w = value.shape
    _, lq, _, npts, _ = locations.shape
    v = value.reshape(b * nh, ch, h, w)
    # (B, Lq, heads, P, 2) -> (B*heads, Lq, P, 2)
    grid = (2.0 * locations - 1.0).permute(0, 2, 1, 3, 4).reshape(b * nh, lq, npts, 2)
    sampled = F.grid_sample(v, grid, mode="bilinear", padding_mode="border", align_corners=False)
    # sampled: (B*heads, C_head, Lq, P)
    wts = weights.permute(0, 2, 1, 3).reshape(b * nh, 1, lq, npts)
    out = (sampled * wts).sum(-1)  # (B*heads, C_head, Lq)
    return out.reshape(b, nh * ch, lq).transpose(1, 2)


class DeformableCrossAttention(nn.Module):
    """Queries attend to ``points`` learned offsets per head around a reference.

    Offsets and attention weights are predicted from the query; values are a
    linear projection of ``V``. ``K`` only has to agree with ``V`` in shape:
    deformable attention has no query-key dot product.
    """

    def __init__(self, dim: int, value_dim: int | None = None, heads: int = 6, points: int = 4):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.points = dim, heads, points
        self.value_dim = value_dim or dim
        self.sampling_offsets = nn.Linear(dim, heads * points * 2)
        self.attention_weights = nn.Linear(dim, heads * points)
        self.value_proj = nn.Linear(self.value_dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self.reset_parameters()

    def reset_parameters(self):
        # Offsets start on a ring of directions per head, growing with point index.
        nn.init.zeros_(self.sampling_offsets.weight)
        theta = torch.arange(self.heads, dtype=torch.float32) * (2.0 * math.pi / self.heads)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid[:, None, :].repeat(1, self.points, 1)
        grid = grid * torch.arange(1, self.points + 1, dtype=torch.float32)[None, :, None]
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, query, key, value, ref_points=None):
        """
        Args:
            query: (B, dim, Hq, Wq) map defining the output geometry.
            key, value: (B, value_dim, Hv, Wv) maps.
            ref_points: optional (Hq*Wq, 2) or (B, Hq*Wq, 2) normalised
                coordinates; defaults to the query pixel centres.

        Returns:
            (B, dim, Hq, Wq).
        """
        if key.shape != value.shape:
            raise ShapeError(f"K and V shapes differ: {tuple(key.shape)} vs {tuple(value.shape)}")
        if query.shape[1] != self.dim or value.shape[1] != self.value_dim:
            raise ShapeError(
                f"channel mismatch: Q has {query.shape[1]} (expected {self.dim}), "
                f"V has {value.shape[1]} (expected {self.value_dim})"
            )
        if query.shape[0] != value.shape[0]:
            raise ShapeError("Q and V batch sizes differ")
        b, _, hq, wq = query.shape
        _, _, hv, wv = value.shape
        q = query.flatten(2).transpose(1, 2)  # (B, Lq, dim)
        lq = hq * wq
        if ref_points is None:
            ref_points = reference_points(hq, wq, query.device, query.dtype)
        if ref_points.dim() == 2:
            ref_points = ref_points.unsqueeze(0).expand(b, -1, -1)

        v = self.value_proj(value.flatten(2).transpose(1, 2))  # (B, Lv, dim)
        v = v.transpose(1, 2).reshape(b, self.heads, self.dim // self.heads, hv, wv)

        offsets = self.sampling_offsets(q).view(b, lq, self.heads, self.points, 2)
        normalizer = torch.tensor([wv, hv], dtype=q.dtype, device=q.device)
        locations = ref_points[:, :, None, None, :] + offsets / normalizer
        weights = self.attention_weights(q).view(b, lq, self.heads, self.points).softmax(-1)

        out = deformable_sample(v, locations, weights)
        out = self.output_proj(out)
        return out.transpose(1, 2).reshape(b, self.dim, hq, wq)
