"""Training loop, checkpoints, evaluation, prediction and slide stitching.

Checkpoints are single ``torch.save`` files::

    {"magic": "DNUNET-CKPT", "version": 1,
     "model_config": {...}, "train_config": {...},
     "meta": {"epoch", "val_dice", "digest", "backbone_digest",
              "train_manifest_digest", "train_images"},
     "state_dict": {...}}

A checkpoint is written only when the validation Dice strictly improves on
the best seen so far. The learning rate follows the poly schedule per
optimizer step, with ``total_steps = epochs * ceil(n_train / batch_size)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import ViTBackbone, parameter_digest
from .config import (
    ModelConfig,
    TrainConfig,
    check_config,
    model_config_from_dict,
    to_dict,
)
from .data import Manifest, load_records, load_split, read_image, resize_image, resize_mask, save_mask
from .errors import CheckpointError, ConfigMismatch, DivergedLoss, RangeError, ShapeError
from .losses import compound_loss, foreground_probs
from .metrics import MetricReport, binarize, evaluate_masks
from .model import DinoNestedUNet

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "DNUNET-CKPT"
CHECKPOINT_VERSION = 1


def poly_lr(step: int, total_steps: int, lr0: float, power: float = 0.9) -> float:
    """``lr0 * (1 - step / total_steps) ** power``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise RangeError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 - step / total_steps) ** power


def set_determinism(seed: int, deterministic: bool = True) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(deterministic)


@dataclass
class CheckpointMeta:
    epoch: int
    val_dice: float
    digest: str
    backbone_digest: str
    model_config: dict
    train_config: dict
    train_manifest_digest: str = ""
    train_images: list[str] = field(default_factory=list)


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RunLog":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def manifest_digest(manifest: Manifest) -> str:
    h = hashlib.sha256()
    for r in manifest.records:
        h.update(f"{r.patch_id}\0{r.slide_id}\0{r.split}\n".encode())
    return h.hexdigest()


def _image_keys(manifest: Manifest, records) -> list[str]:
    return [str(manifest.resolve(r.image_path).resolve()) for r in records]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: DinoNestedUNet, meta: CheckpointMeta) -> None:
    torch.save(
        {
            "magic": CHECKPOINT_MAGIC,
            "version": CHECKPOINT_VERSION,
            "model_config": meta.model_config,
            "train_config": meta.train_config,
            "meta": asdict(meta),
            "backbone": {"num_heads": model.backbone.num_heads, "num_registers": model.backbone.num_registers},
            "state_dict": model.state_dict(),
        },
        path,
    )


def _comparable(cfg: ModelConfig) -> dict:
    d = to_dict(cfg)
    d.pop("backbone_weights")
    return d


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None):
    """Rebuild the model from a checkpoint; returns ``(model, meta)`` in eval mode."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    cfg = model_config_from_dict(blob["model_config"])
    if expect is not None and _comparable(expect) != _comparable(cfg):
        diff = sorted(k for k, v in _comparable(cfg).items() if _comparable(expect)[k] != v)
        raise ConfigMismatch(f"{path}: checkpoint config differs from requested in {diff}")
    # Backbone weights come from the state dict, not from the original file or seed.
    bb = blob.get("backbone", {})
    shell = ViTBackbone(
        cfg.backbone_embed_dim,
        cfg.backbone_patch_size,
        cfg.backbone_depth,
        bb.get("num_heads"),
        bb.get("num_registers", 4),
    ).freeze()
    model = DinoNestedUNet(cfg, backbone=shell)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, CheckpointMeta(**blob["meta"])


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


@torch.no_grad()
def predict_logits(model: DinoNestedUNet, images: np.ndarray, batch_size: int = 8) -> torch.Tensor:
    was_training = model.training
    model.eval()
    dtype = model.head.conv.weight.dtype
    out = []
    for k in range(0, len(images), batch_size):
        x = torch.as_tensor(images[k : k + batch_size]).to(dtype)
        out.append(model(x))
    model.train(was_training)
    return torch.cat(out)


def predict_masks(model: DinoNestedUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    return binarize(predict_logits(model, images, batch_size), model.cfg.loss_variant)


def predict_probs(model: DinoNestedUNet, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    logits = predict_logits(model, images, batch_size)
    return foreground_probs(logits, model.cfg.loss_variant).double().numpy()


def make_optimizer(params, t: TrainConfig) -> torch.optim.Optimizer:
    if t.optimizer == "sgd_nesterov":
        return torch.optim.SGD(
            params, lr=t.lr0, momentum=t.momentum, nesterov=True, weight_decay=t.weight_decay
        )
    if t.optimizer == "adam":
        return torch.optim.Adam(params, lr=t.lr0, weight_decay=t.weight_decay)
    raise ValueError(f"unknown optimizer {t.optimizer!r}")


def _augment(x: torch.Tensor, y: torch.Tensor, rng: np.random.Generator):
    if rng.random() < 0.5:
        x, y = x.flip(-1), y.flip(-1)
    if rng.random() < 0.5:
        x, y = x.flip(-2), y.flip(-2)
    k = int(rng.integers(4))
    return torch.rot90(x, k, (-2, -1)), torch.rot90(y, k, (-2, -1))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(
    m: ModelConfig,
    t: TrainConfig,
    manifest: Manifest,
    out_dir: str | Path,
    deterministic: bool = True,
    model: DinoNestedUNet | None = None,
) -> CheckpointMeta:
    """Fit on the train split, checkpointing ``best.ckpt`` on val Dice improvement.

    Writes ``run_log.json`` and the checkpoint into ``out_dir``. Returns the
    metadata of the best checkpoint.
    """
    check_config(m, t)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    set_determinism(t.seed, deterministic)

    _, x_train, y_train = load_split(manifest, "train", m.input_size)
    _, x_val, y_val = load_split(manifest, "val", m.input_size)

    model = model or DinoNestedUNet(m)
    backbone_before = model.backbone_digest()
    params = model.trainable_parameters()
    opt = make_optimizer(params, t)
    n = len(x_train)
    steps_per_epoch = math.ceil(n / t.batch_size)
    total = t.epochs * steps_per_epoch
    rng = np.random.default_rng(t.seed)
    runlog = RunLog()
    best: CheckpointMeta | None = None
    best_dice = -math.inf
    step = 0
    dtype = params[0].dtype
    x_train_t = torch.as_tensor(x_train).to(dtype)
    y_train_t = torch.as_tensor(y_train).long()
    t0 = time.time()

    for epoch in range(1, t.epochs + 1):
        model.train()
        perm = rng.permutation(n)
        losses = []
        for k in range(0, n, t.batch_size):
            idx = torch.as_tensor(perm[k : k + t.batch_size])
            xb, yb = x_train_t[idx], y_train_t[idx]
            if t.augment:
                xb, yb = _augment(xb, yb, rng)
            lr = poly_lr(step, total, t.lr0, t.poly_power)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = compound_loss(model(xb), yb, m.loss_variant)
            if m.ortho_penalty > 0:
                loss = loss + m.ortho_penalty * model.fapm.orthogonality_penalty()
            if not torch.isfinite(loss):
                runlog.save(out_dir / "run_log.json")
                raise DivergedLoss(f"non-finite loss {loss.item()} at step {step} (epoch {epoch}, lr {lr:.3g})")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            runlog.steps.append({"step": step, "lr": lr, "loss": loss.item()})
            losses.append(loss.item())
            step += 1

        val = evaluate_masks(predict_masks(model, x_val, t.batch_size), y_val, cohort="val")
        val_dice = val.mean["dice"]
        runlog.epochs.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val": val.mean, "time_s": time.time() - t0}
        )
        log.info("epoch %d loss %.4f val dice %.4f", epoch, np.mean(losses), val_dice)
        if val_dice > best_dice:
            best_dice = val_dice
            best = CheckpointMeta(
                epoch=epoch,
                val_dice=val_dice,
                digest=parameter_digest(model),
                backbone_digest=model.backbone_digest(),
                model_config=to_dict(m),
                train_config=to_dict(t),
                train_manifest_digest=manifest_digest(manifest),
                train_images=_image_keys(manifest, manifest.split("train")),
            )
            save_checkpoint(out_dir / "best.ckpt", model, best)
            runlog.checkpoints.append({"epoch": epoch, "val_dice": val_dice, "step": step})
        runlog.save(out_dir / "run_log.json")

    if model.backbone_digest() != backbone_before:
        raise RuntimeError("backbone parameters changed during training")
    return best


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _evaluate_model(model, manifest: Manifest, split: str | None, cohort: str, tags: dict) -> MetricReport:
    if split is None:
        ids, x, y = load_records(manifest, manifest.records, model.cfg.input_size)
    else:
        ids, x, y = load_split(manifest, split, model.cfg.input_size)
    preds = [predict_masks(model, x[k : k + 1])[0] for k in range(len(x))]
    return evaluate_masks(preds, y, ids, cohort=cohort, tags=tags)


def evaluate(checkpoint, manifest: Manifest, split: str = "test", expect: ModelConfig | None = None) -> MetricReport:
    model, meta = load_checkpoint(checkpoint, expect)
    cohort = f"{manifest.name or 'cohort'}:{split}"
    tags = {"checkpoint": str(checkpoint), "checkpoint_epoch": meta.epoch, "split": split}
    return _evaluate_model(model, manifest, split, cohort, tags)


def cross_dataset_eval(
    checkpoint, manifest: Manifest, split: str | None = None, expect: ModelConfig | None = None
) -> MetricReport:
    """Zero-shot evaluation on an external cohort; parameters must stay untouched.

    ``split=None`` evaluates every record of the manifest.
    """
    model, meta = load_checkpoint(checkpoint, expect)
    before = parameter_digest(model)
    train_images = set(meta.train_images)
    overlap = sum(k in train_images for k in _image_keys(manifest, manifest.records))
    same = manifest_digest(manifest) == meta.train_manifest_digest
    tags = {
        "zero_shot": True,
        "checkpoint": str(checkpoint),
        "split": split or "all",
        "evaluated_on_training_manifest": bool(same or overlap),
        "training_patch_overlap": overlap,
    }
    if same or overlap:
        log.warning("external manifest overlaps the training data (%d patches)", overlap)
    report = _evaluate_model(model, manifest, split, f"{manifest.name or 'external'}:zero-shot", tags)
    after = parameter_digest(model)
    if after != before:
        raise RuntimeError("model parameters changed during zero-shot evaluation")
    report.tags["parameter_digest"] = after
    return report


def predict_file(checkpoint, image_path, out_mask_path, model=None) -> np.ndarray:
    """Write a {0, 255} mask with the input image's dimensions."""
    if model is None:
        model, _ = load_checkpoint(checkpoint)
    image = read_image(image_path)
    h, w = image.shape[:2]
    x = resize_image(image, model.cfg.input_size).astype(np.float32).transpose(2, 0, 1)[None] / 255.0
    mask = resize_mask(predict_masks(model, x)[0], (h, w))
    save_mask(mask, out_mask_path)
    return mask


# ---------------------------------------------------------------------------
# slide stitching
# ---------------------------------------------------------------------------


def tile_origins(length: int, patch: int, stride: int) -> list[int]:
    """Grid origins covering ``[0, length)``; a final tile is snapped to the edge."""
    starts = list(range(0, length - patch + 1, stride))
    if starts[-1] != length - patch:
        starts.append(length - patch)
    return starts


def stitch_probabilities(slide: np.ndarray, patch_size: int, stride: int, prob_fn) -> np.ndarray:
    """Average per-tile foreground probabilities over every covering tile.

    ``prob_fn`` maps a (patch, patch, 3) uint8 tile to a (patch, patch)
    probability map.
    """
    h, w = slide.shape[:2]
    if h < patch_size or w < patch_size:
        raise ShapeError(f"slide {h}x{w} is smaller than patch size {patch_size}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    acc = np.zeros((h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.int64)
    for y in tile_origins(h, patch_size, stride):
        for x in tile_origins(w, patch_size, stride):
            p = prob_fn(slide[y : y + patch_size, x : x + patch_size])
            acc[y : y + patch_size, x : x + patch_size] += p
            cnt[y : y + patch_size, x : x + patch_size] += 1
    return acc / cnt


def model_prob_fn(model: DinoNestedUNet):
    size = model.cfg.input_size

    def fn(tile: np.ndarray) -> np.ndarray:
        ps = tile.shape[0]
        x = resize_image(tile, size).astype(np.float32).transpose(2, 0, 1)[None] / 255.0
        prob = predict_probs(model, x)[0]
        if ps != size:
            t = torch.as_tensor(prob)[None, None]
            prob = torch.nn.functional.interpolate(t, size=(ps, ps), mode="bilinear", align_corners=False)[0, 0].numpy()
        return prob

    return fn


def stitch_wsi(model: DinoNestedUNet, slide: np.ndarray, patch_size: int, stride: int | None = None) -> np.ndarray:
    """Slide-level {0, 1} mask: tile, average probabilities, threshold once at 0.5."""
    probs = stitch_probabilities(slide, patch_size, stride or patch_size, model_prob_fn(model))
    return (probs > 0.5).astype(np.uint8)
