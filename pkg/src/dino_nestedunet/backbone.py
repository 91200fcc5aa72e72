"""Frozen plain-ViT backbone.

The same :class:`ViTBackbone` serves both backbone kinds: ``stub`` builds it
from a seed, ``pretrained_vit`` fills it from a weights container written by
:func:`save_backbone_weights`. The container is a ``torch.save`` dict::

    {"magic": "DNUNET-VIT", "version": 1, "embed_dim": int,
     "patch_size": int, "depth": int, "num_heads": int,
     "num_registers": int, "state_dict": {...}}

Only patch tokens are returned; the class and register tokens are dropped.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CheckpointError, ShapeError, WeightsNotFound, WeightsShapeMismatch

WEIGHTS_MAGIC = "DNUNET-VIT"
WEIGHTS_VERSION = 1


def parameter_digest(module: nn.Module) -> str:
    """sha256 over the names and raw bytes of every parameter and buffer."""
    h = hashlib.sha256()
    for name, t in list(module.named_parameters()) + list(module.named_buffers()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tap_indices(depth: int, num_taps: int) -> list[int]:
    """1-based block indices after which the N equal block groups end."""
    if num_taps < 1 or depth % num_taps:
        raise ValueError(f"{depth} blocks cannot be split into {num_taps} equal groups")
    step = depth // num_taps
    return [step * (k + 1) for k in range(num_taps)]


def sincos_pos_embed(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed 2D sine-cosine position embedding, shape (h*w, dim)."""
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij"
    )
    out = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        angles = coord[:, None] * omega[None]
        out += [angles.sin(), angles.cos()]
    emb = torch.cat(out, dim=1)
    if emb.shape[1] < dim:
        emb = F.pad(emb, (0, dim - emb.shape[1]))
    return emb.float()


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ViTBackbone(nn.Module):
    """Plain ViT emitting one stride-``patch_size`` token stream.

    ``forward`` returns the patch-token maps tapped after each of
    ``num_taps`` equal groups of blocks, as ``(B, embed_dim, H/p, W/p)``.
    Parameters never require grad and the module stays in eval mode.
    """

    def __init__(self, embed_dim=384, patch_size=16, depth=12, num_heads=None, num_registers=4):
        super().__init__()
        self.embed_dim = embed_dim
        self.patch_size = patch_size
        self.depth = depth
        self.num_heads = num_heads or max(1, embed_dim // 64)
        self.num_registers = num_registers
        self.patch_embed = nn.Conv2d(3, embed_dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.register_tokens = nn.Parameter(torch.zeros(1, num_registers, embed_dim))
        self.blocks = nn.ModuleList(Block(embed_dim, self.num_heads) for _ in range(depth))
        self.norm = nn.LayerNorm(embed_dim, eps=1e-6)

    @property
    def block_count(self) -> int:
        return self.depth

    def freeze(self) -> "ViTBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        # Frozen backbone: always evaluated in inference mode.
        return super().train(False)

    def forward(self, x: torch.Tensor, num_taps: int) -> list[torch.Tensor]:
        b, _, h, w = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"input {h}x{w} is not divisible by patch size {p}")
        gh, gw = h // p, w // p
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = tokens + sincos_pos_embed(gh, gw, self.embed_dim).to(tokens)
        prefix = 1 + self.num_registers
        tokens = torch.cat(
            [self.cls_token.expand(b, -1, -1), self.register_tokens.expand(b, -1, -1), tokens], dim=1
        )
        taps = set(tap_indices(self.depth, num_taps))
        maps = []
        for k, blk in enumerate(self.blocks, start=1):
            tokens = blk(tokens)
            if k in taps:
                patch = self.norm(tokens)[:, prefix:]
                maps.append(patch.transpose(1, 2).reshape(b, self.embed_dim, gh, gw))
        return maps


def init_stub(backbone: ViTBackbone, seed: int) -> ViTBackbone:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in backbone.named_parameters():
            if p.dim() > 1 or "token" in name:
                p.copy_(torch.randn(p.shape, generator=g).clamp_(-2, 2) * 0.02)
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    return backbone


def save_backbone_weights(backbone: ViTBackbone, path: str | Path) -> None:
    torch.save(
        {
            "magic": WEIGHTS_MAGIC,
            "version": WEIGHTS_VERSION,
            "embed_dim": backbone.embed_dim,
            "patch_size": backbone.patch_size,
            "depth": backbone.depth,
            "num_heads": backbone.num_heads,
            "num_registers": backbone.num_registers,
            "state_dict": backbone.state_dict(),
        },
        path,
    )


def make_backbone(
    kind: str,
    weights: str | Path | None = None,
    seed: int | None = None,
    embed_dim: int = 384,
    patch_size: int = 16,
    depth: int = 12,
) -> ViTBackbone:
    """Build a frozen backbone.

    ``stub`` gives a deterministic random ViT for a seed; ``pretrained_vit``
    loads a weights container verbatim and checks its embed dim and patch
    size against the requested ones.
    """
    if kind == "stub":
        if seed is None:
            raise ValueError("stub backbone requires a seed")
        b = ViTBackbone(embed_dim, patch_size, depth)
        return init_stub(b, seed).freeze()
    if kind != "pretrained_vit":
        raise ValueError(f"unknown backbone kind {kind!r}")
    if weights is None or not Path(weights).is_file():
        raise WeightsNotFound(f"backbone weights not found: {weights}")
    blob = torch.load(weights, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("magic") != WEIGHTS_MAGIC:
        raise CheckpointError(f"{weights}: not a backbone weights container")
    if blob["embed_dim"] != embed_dim or blob["patch_size"] != patch_size:
        raise WeightsShapeMismatch(
            f"{weights}: embed_dim/patch_size {blob['embed_dim']}/{blob['patch_size']} "
            f"!= configured {embed_dim}/{patch_size}"
        )
    if blob["depth"] != depth:
        raise WeightsShapeMismatch(f"{weights}: depth {blob['depth']} != configured {depth}")
    b = ViTBackbone(embed_dim, patch_size, depth, blob["num_heads"], blob["num_registers"])
    try:
        b.load_state_dict(blob["state_dict"], strict=True)
    except RuntimeError as exc:
        raise WeightsShapeMismatch(f"{weights}: {exc}") from None
    return b.freeze()


def extract_backbone_features(
    backbone: ViTBackbone, x: torch.Tensor, strides
) -> list[torch.Tensor]:
    """Per-level backbone maps resampled from the token grid to each stride.

    Runs without autograd; the result carries no graph back to the backbone.
    """
    h, w = x.shape[-2:]
    n = len(strides)
    with torch.no_grad():
        maps = backbone(x, n)
    out = []
    for m, s in zip(maps, strides):
        if h % s or w % s:
            raise ShapeError(f"input {h}x{w} is not divisible by stride {s}")
        size = (h // s, w // s)
        if tuple(m.shape[-2:]) != size:
            m = F.interpolate(m, size=size, mode="bilinear", align_corners=False)
        out.append(m)
    return out
