"""Full segmentation network: frozen backbone -> adapter -> FAPM -> nested decoder -> head."""

from __future__ import annotations

import torch
import torch.nn as nn

from .adapter import Adapter
from .backbone import extract_backbone_features, make_backbone, parameter_digest
from .config import ModelConfig, check_config
from .decoder import NestedDecoder, SegmentationHead
from .fapm import FAPM

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class DinoNestedUNet(nn.Module):
    def __init__(self, cfg: ModelConfig, backbone=None):
        super().__init__()
        check_config(cfg)
        self.cfg = cfg
        self.backbone = backbone or make_backbone(
            cfg.backbone_kind,
            cfg.backbone_weights,
            seed=cfg.backbone_seed,
            embed_dim=cfg.backbone_embed_dim,
            patch_size=cfg.backbone_patch_size,
            depth=cfg.backbone_depth,
        )
        dim = cfg.backbone_embed_dim
        self.adapter = Adapter(
            cfg.scale_strides,
            dim,
            heads=cfg.attention_heads,
            points=cfg.sampling_points,
            ffn_ratio=cfg.ffn_ratio,
            spm_width=cfg.spm_width,
        )
        self.fapm = FAPM(dim, cfg.decoder_widths, cfg.context_width)
        self.decoder = NestedDecoder(cfg.decoder_widths)
        self.head = SegmentationHead(cfg.decoder_widths[0], cfg.num_classes, cfg.scale_strides[0])
        self.register_buffer("pixel_mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def backbone_digest(self) -> str:
        return parameter_digest(self.backbone)

    def features(self, x: torch.Tensor):
        """Intermediate maps: backbone features, adapter pyramid and FAPM outputs."""
        x = (x - self.pixel_mean) / self.pixel_std
        vit = extract_backbone_features(self.backbone, x, self.cfg.scale_strides)
        pyramid = self.adapter(x, vit)
        return vit, pyramid, self.fapm(pyramid)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Images in [0, 1], (B, 3, H, W) -> raw logits (B, num_classes, H, W)."""
        _, _, s = self.features(x)
        return self.head(self.decoder(s))


def build_model(cfg: ModelConfig) -> DinoNestedUNet:
    return DinoNestedUNet(cfg)
