"""Fidelity-aware projection of adapter features to decoder widths.

Per level ``i``::

    z_ctx = W_ctx^T c          (1x1, shared across levels)
    z_sp  = W_sp_i^T c         (1x1, per level)
    gamma, beta = G_i(z_ctx)   (1x1 -> ReLU -> 1x1, per-pixel maps)
    z_mod = gamma * z_sp + beta
    s     = SE(dwsep(z_mod)) + P_i(z_mod)

``W_ctx`` and ``W_sp_i`` are bias-free and orthogonally initialised; they
are not constrained afterwards unless ``ortho_penalty`` is set.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ShapeError


def gram_deviation(weight: torch.Tensor) -> float:
    """Frobenius norm of ``W W^T - I`` (or ``W^T W - I`` for tall matrices)."""
    w = weight.detach().reshape(weight.shape[0], -1).double()
    g = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    return torch.linalg.matrix_norm(g - torch.eye(g.shape[0], dtype=g.dtype)).item()


def _gram_penalty(weight: torch.Tensor) -> torch.Tensor:
    w = weight.reshape(weight.shape[0], -1)
    g = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    return ((g - torch.eye(g.shape[0], dtype=g.dtype, device=g.device)) ** 2).sum()


def orthogonal_pointwise(cin: int, cout: int) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, 1, bias=False)
    with torch.no_grad():
        w = torch.empty(cout, cin, dtype=torch.float64)
        nn.init.orthogonal_(w)
        conv.weight.copy_(w.reshape(cout, cin, 1, 1))
    return conv


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.act = nn.ReLU(inplace=True)
        self.fc2 = nn.Conv2d(hidden, channels, 1)
        self.gate = nn.Sigmoid()

    def forward(self, x):
        return x * self.gate(self.fc2(self.act(self.fc1(self.pool(x)))))


class DepthwiseSeparable(nn.Module):
    """Depthwise 3x3 followed by pointwise 1x1, BatchNorm and ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False)
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.bn(self.pointwise(self.depthwise(x))))


class AffineGenerator(nn.Module):
    """Emits per-pixel ``(gamma, beta)`` for ``channels`` from the context."""

    def __init__(self, ctx_channels: int, channels: int):
        super().__init__()
        self.channels = channels
        self.net = nn.Sequential(
            nn.Conv2d(ctx_channels, channels, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, 2 * channels, 1),
        )
        # gamma starts near 1 so the specific branch passes through at init.
        with torch.no_grad():
            self.net[2].bias[:channels].fill_(1.0)
            self.net[2].bias[channels:].zero_()

    def forward(self, z_ctx):
        gamma, beta = self.net(z_ctx).split(self.channels, dim=1)
        return gamma, beta


class FAPMLevel(nn.Module):
    def __init__(self, shared_ctx: nn.Conv2d, in_dim: int, width: int, se_reduction: int = 4):
        super().__init__()
        # Plain attribute access keeps the shared projection registered once, on the parent.
        self._ctx = [shared_ctx]
        self.w_sp = orthogonal_pointwise(in_dim, width)
        self.generator = AffineGenerator(shared_ctx.out_channels, width)
        self.dwsep = DepthwiseSeparable(width)
        self.se = SqueezeExcite(width, se_reduction)
        self.shortcut = nn.Conv2d(width, width, 1)

    @property
    def w_ctx(self) -> nn.Conv2d:
        return self._ctx[0]

    def decompose(self, c):
        if c.shape[1] != self.w_sp.in_channels:
            raise ShapeError(f"expected {self.w_sp.in_channels} channels, got {c.shape[1]}")
        return self.w_ctx(c), self.w_sp(c)

    def modulate(self, z_ctx, z_sp):
        gamma, beta = self.generator(z_ctx)
        if gamma.shape != z_sp.shape:
            raise ShapeError(f"affine maps {tuple(gamma.shape)} do not match {tuple(z_sp.shape)}")
        return gamma * z_sp + beta

    def refine(self, z_mod):
        if z_mod.shape[1] != self.shortcut.in_channels:
            raise ShapeError(f"expected {self.shortcut.in_channels} channels, got {z_mod.shape[1]}")
        return self.se(self.dwsep(z_mod)) + self.shortcut(z_mod)

    def forward(self, c):
        return self.refine(self.modulate(*self.decompose(c)))


class FAPM(nn.Module):
    def __init__(self, in_dim: int, widths, ctx_width: int | None = None):
        super().__init__()
        widths = list(widths)
        self.widths = widths
        self.ctx_width = ctx_width or max(widths[0] // 2, 4)
        self.w_ctx = orthogonal_pointwise(in_dim, self.ctx_width)
        self.levels = nn.ModuleList(FAPMLevel(self.w_ctx, in_dim, w) for w in widths)

    def forward(self, pyramid: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(pyramid) != len(self.levels):
            raise ShapeError(f"expected {len(self.levels)} levels, got {len(pyramid)}")
        return [lvl(c) for lvl, c in zip(self.levels, pyramid)]

    def projection_weights(self) -> list[torch.Tensor]:
        return [self.w_ctx.weight] + [lvl.w_sp.weight for lvl in self.levels]

    def orthogonality_penalty(self) -> torch.Tensor:
        return sum(_gram_penalty(w) for w in self.projection_weights())
