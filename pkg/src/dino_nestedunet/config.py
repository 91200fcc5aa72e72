"""Model and training configuration.

Configs are frozen dataclasses. They are read from and written to a flat
``key = value`` text file with two sections::

    # comments start with '#' or ';'
    [model]
    input_size = 256
    scale_strides = [4, 8, 16, 32]
    decoder_widths = [8, 16, 32, 64]
    loss_variant = bce

    [train]
    optimizer = sgd_nesterov
    epochs = 100

Keys are exactly the dataclass field names; unknown sections or keys are
rejected. Lists are written in brackets, strings bare or quoted, and
``none`` clears an optional field. Omitted keys take their defaults.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ParseError, ValidationError

BACKBONE_KINDS = ("pretrained_vit", "stub")
LOSS_VARIANTS = ("standard", "bce")
OPTIMIZERS = ("sgd_nesterov", "adam")
SCHEDULES = ("poly",)

# optimizer -> (lr0, weight_decay)
OPTIMIZER_DEFAULTS = {
    "sgd_nesterov": (1e-4, 3e-5),
    "adam": (3e-4, 1e-4),
}


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 1024
    num_scales: int = 4
    scale_strides: tuple[int, ...] = (4, 8, 16, 32)
    backbone_kind: str = "stub"
    backbone_weights: str | None = None
    backbone_seed: int = 0
    backbone_embed_dim: int = 384
    backbone_patch_size: int = 16
    backbone_depth: int = 12
    spm_width: int = 64
    decoder_widths: tuple[int, ...] = (8, 16, 32, 64)
    # None resolves from loss_variant: 1 for bce, 2 for standard.
    num_classes: int | None = None
    loss_variant: str = "bce"
    attention_heads: int = 6
    sampling_points: int = 4
    ffn_ratio: float = 0.25
    # Weight of the optional ||W W^T - I||^2 penalty on the FAPM projections.
    ortho_penalty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "scale_strides", tuple(self.scale_strides))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", 1 if self.loss_variant == "bce" else 2)

    @property
    def context_width(self) -> int:
        """Channels of the shared FAPM context projection."""
        return max(self.decoder_widths[0] // 2, 4)

    def feature_size(self, level: int) -> int:
        return self.input_size // self.scale_strides[level]


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd_nesterov"
    # None resolves from OPTIMIZER_DEFAULTS.
    lr0: float | None = None
    momentum: float = 0.99
    weight_decay: float | None = None
    schedule: str = "poly"
    poly_power: float = 0.9
    epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        lr0, wd = OPTIMIZER_DEFAULTS.get(self.optimizer, (None, None))
        if self.lr0 is None:
            object.__setattr__(self, "lr0", lr0)
        if self.weight_decay is None:
            object.__setattr__(self, "weight_decay", wd)


def desk_scale(**overrides) -> ModelConfig:
    """CPU-friendly preset: 256 px input, stub backbone, widths 8..64."""
    base = dict(input_size=256, backbone_kind="stub", decoder_widths=(8, 16, 32, 64))
    base.update(overrides)
    return ModelConfig(**base)


def full_scale(weights: str | None = None, **overrides) -> ModelConfig:
    """1024 px input, pretrained ViT-S/16 backbone, widths 64..512."""
    base = dict(
        input_size=1024,
        backbone_kind="pretrained_vit",
        backbone_weights=weights,
        decoder_widths=(64, 128, 256, 512),
    )
    base.update(overrides)
    return ModelConfig(**base)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def validate_config(m: ModelConfig, t: TrainConfig) -> list[str]:
    """Return every violated invariant as a message naming the field(s)."""
    v: list[str] = []
    strides, widths = list(m.scale_strides), list(m.decoder_widths)

    if m.num_scales < 1:
        v.append(f"num_scales: must be >= 1, got {m.num_scales}")
    if not (len(strides) == len(widths) == m.num_scales):
        v.append(
            "scale_strides/decoder_widths: lengths must equal num_scales "
            f"({len(strides)}, {len(widths)} vs {m.num_scales})"
        )
    if any(b <= a for a, b in zip(strides, strides[1:])):
        v.append(f"scale_strides: must be strictly increasing, got {strides}")
    elif any(b != 2 * a for a, b in zip(strides, strides[1:])) or not all(map(_is_pow2, strides)):
        v.append(f"scale_strides: must be powers of two that double per level, got {strides}")

    if m.input_size < 1:
        v.append(f"input_size: must be positive, got {m.input_size}")
    else:
        bad = sorted({d for d in strides + [m.backbone_patch_size] if d < 1 or m.input_size % d})
        if bad:
            v.append(f"input_size: {m.input_size} is not divisible by {bad} (scale_strides/backbone_patch_size)")

    if m.backbone_kind not in BACKBONE_KINDS:
        v.append(f"backbone_kind: expected one of {BACKBONE_KINDS}, got {m.backbone_kind!r}")
    elif m.backbone_kind == "pretrained_vit" and not m.backbone_weights:
        v.append("backbone_weights: required when backbone_kind = pretrained_vit")
    if m.backbone_embed_dim < 1 or m.backbone_patch_size < 1:
        v.append("backbone_embed_dim/backbone_patch_size: must be positive")
    if m.backbone_depth < m.num_scales or m.backbone_depth % max(m.num_scales, 1):
        v.append(
            f"backbone_depth: {m.backbone_depth} blocks cannot be split into "
            f"{m.num_scales} equal groups"
        )
    if m.spm_width < 1:
        v.append(f"spm_width: must be positive, got {m.spm_width}")
    if any(w < 1 for w in widths):
        v.append(f"decoder_widths: must be positive, got {widths}")

    if m.loss_variant not in LOSS_VARIANTS:
        v.append(f"loss_variant: expected one of {LOSS_VARIANTS}, got {m.loss_variant!r}")
    elif m.loss_variant == "bce" and m.num_classes != 1:
        v.append(f"num_classes/loss_variant: bce requires num_classes == 1, got {m.num_classes}")
    elif m.loss_variant == "standard" and (m.num_classes or 0) < 2:
        v.append(f"num_classes/loss_variant: standard requires num_classes >= 2, got {m.num_classes}")

    if m.attention_heads < 1 or m.backbone_embed_dim % m.attention_heads:
        v.append(
            f"attention_heads: {m.attention_heads} must divide backbone_embed_dim "
            f"{m.backbone_embed_dim}"
        )
    if m.sampling_points < 1:
        v.append(f"sampling_points: must be >= 1, got {m.sampling_points}")
    if m.ffn_ratio <= 0:
        v.append(f"ffn_ratio: must be positive, got {m.ffn_ratio}")
    if m.ortho_penalty < 0:
        v.append(f"ortho_penalty: must be >= 0, got {m.ortho_penalty}")

    if t.optimizer not in OPTIMIZERS:
        v.append(f"optimizer: expected one of {OPTIMIZERS}, got {t.optimizer!r}")
    if t.schedule not in SCHEDULES:
        v.append(f"schedule: expected one of {SCHEDULES}, got {t.schedule!r}")
    if t.lr0 is None or not t.lr0 > 0:
        v.append(f"lr0: must be > 0, got {t.lr0}")
    if not 0 <= t.momentum < 1:
        v.append(f"momentum: must satisfy 0 <= momentum < 1, got {t.momentum}")
    if t.weight_decay is None or t.weight_decay < 0:
        v.append(f"weight_decay: must be >= 0, got {t.weight_decay}")
    if not (math.isfinite(t.poly_power) and t.poly_power > 0):
        v.append(f"poly_power: must be > 0, got {t.poly_power}")
    if t.epochs < 1:
        v.append(f"epochs: must be >= 1, got {t.epochs}")
    if t.batch_size < 1:
        v.append(f"batch_size: must be >= 1, got {t.batch_size}")
    return v


def check_config(m: ModelConfig, t: TrainConfig | None = None) -> None:
    """Raise ValidationError listing all violations, if any."""
    violations = validate_config(m, t or TrainConfig())
    if violations:
        raise ValidationError("; ".join(violations))


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "train": TrainConfig}


def _convert(cls, name: str, raw: str) -> Any:
    f = {f.name: f for f in fields(cls)}[name]
    kind = str(f.type)
    text = raw.strip()
    if text.lower() == "none":
        if "None" not in kind:
            raise ParseError(f"[{cls.__name__}] {name}: 'none' is not allowed")
        return None
    try:
        if "tuple" in kind:
            value = ast.literal_eval(text)
            if not isinstance(value, (list, tuple)) or not all(isinstance(x, int) for x in value):
                raise ValueError
            return tuple(value)
        if kind.startswith("bool"):
            if text.lower() in ("true", "yes", "on", "1"):
                return True
            if text.lower() in ("false", "no", "off", "0"):
                return False
            raise ValueError
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except (ValueError, SyntaxError):
        raise ParseError(f"{name}: cannot parse {raw!r} as {kind}") from None
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        text = text[1:-1]
    return text


def parse_config(text: str, source: str = "<string>") -> tuple[ModelConfig, TrainConfig]:
    parser = configparser.ConfigParser(
        interpolation=None, default_section="__none__", inline_comment_prefixes=("#", ";")
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(f"{source}: {exc}") from None

    values: dict[str, dict[str, Any]] = {"model": {}, "train": {}}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ParseError(f"{source}: unknown section [{section}]")
        cls = _SECTIONS[section]
        names = {f.name for f in fields(cls)}
        for key, raw in parser.items(section):
            if key not in names:
                raise ParseError(f"{source}: unknown key {key!r} in [{section}]")
            values[section][key] = _convert(cls, key, raw)

    m = ModelConfig(**values["model"])
    t = TrainConfig(**values["train"])
    violations = validate_config(m, t)
    if violations:
        raise ValidationError(f"{source}: " + "; ".join(violations))
    return m, t


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return "[" + ", ".join(str(x) for x in value) + "]"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(m: ModelConfig, t: TrainConfig) -> str:
    lines = []
    for section, cfg in (("model", m), ("train", t)):
        lines.append(f"[{section}]")
        for f in fields(cfg):
            lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
        lines.append("")
    return "\n".join(lines)


def save_config(path: str | Path, m: ModelConfig, t: TrainConfig) -> None:
    Path(path).write_text(dump_config(m, t), encoding="utf-8")


def to_dict(cfg) -> dict[str, Any]:
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def model_config_from_dict(d: dict[str, Any]) -> ModelConfig:
    return ModelConfig(**d)


def train_config_from_dict(d: dict[str, Any]) -> TrainConfig:
    return TrainConfig(**d)
