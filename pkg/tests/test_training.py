import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from conftest import tiny_config, write_cohort
from dino_nestedunet.backbone import make_backbone, parameter_digest
from dino_nestedunet.config import TrainConfig
from dino_nestedunet.data import STROMA_RGB, load_split, read_mask
from dino_nestedunet.errors import CheckpointError, ConfigMismatch, DivergedLoss, RangeError, ShapeError
from dino_nestedunet.metrics import evaluate_masks
from dino_nestedunet.model import DinoNestedUNet
from dino_nestedunet.training import (
    RunLog,
    cross_dataset_eval,
    evaluate,
    load_checkpoint,
    poly_lr,
    predict_file,
    stitch_probabilities,
    stitch_wsi,
    tile_origins,
    train,
)


def test_poly_lr_values():
    assert poly_lr(0, 100, 1e-4) == 1e-4
    assert poly_lr(100, 100, 1e-4) == 0.0
    assert poly_lr(50, 100, 1e-4) == pytest.approx(1e-4 * 0.5 ** 0.9)
    assert poly_lr(50, 100, 1e-4) == pytest.approx(5.359e-5, rel=1e-4)
    for bad in (-1, 101):
        with pytest.raises(RangeError):
            poly_lr(bad, 100, 1e-4)
    with pytest.raises(RangeError):
        poly_lr(0, 0, 1e-4)


@given(total=st.integers(2, 5000), data=st.data())
def test_poly_lr_strictly_decreasing(total, data):
    s = data.draw(st.integers(0, total - 1))
    assert poly_lr(s + 1, total, 1e-4) < poly_lr(s, total, 1e-4)


def test_overfit_reaches_high_train_dice(overfit_run):
    rep = evaluate(overfit_run["ckpt"], overfit_run["manifest"], "train")
    assert rep.n == 8
    assert rep.mean["dice"] >= 0.95


def test_run_log_follows_schedule(overfit_run):
    log = RunLog.load(overfit_run["log"])
    t = overfit_run["train_cfg"]
    total = t.epochs  # one step per epoch with 8 patches and batch 8
    assert len(log.steps) == total
    for rec in log.steps:
        assert rec["lr"] == poly_lr(rec["step"], total, t.lr0, t.poly_power)


def test_checkpoints_strictly_improve(overfit_run):
    log = RunLog.load(overfit_run["log"])
    dices = [c["val_dice"] for c in log.checkpoints]
    assert dices and all(b > a for a, b in zip(dices, dices[1:]))
    meta = overfit_run["meta"]
    assert meta.val_dice == dices[-1] == max(e["val"]["dice"] for e in log.epochs)
    assert meta.epoch == log.checkpoints[-1]["epoch"]


def test_smoothed_loss_non_increasing(overfit_run):
    losses = [s["loss"] for s in RunLog.load(overfit_run["log"]).steps]
    means = [np.mean(losses[k:k + 50]) for k in range(0, len(losses), 50)]
    assert all(b <= a for a, b in zip(means, means[1:]))


def test_backbone_untouched_by_training(overfit_run):
    m = overfit_run["model_cfg"]
    fresh = make_backbone("stub", seed=m.backbone_seed, embed_dim=m.backbone_embed_dim,
                          patch_size=m.backbone_patch_size, depth=m.backbone_depth)
    model, meta = load_checkpoint(overfit_run["ckpt"])
    assert meta.backbone_digest == parameter_digest(fresh) == model.backbone_digest()
    assert meta.digest == parameter_digest(model)


def test_evaluate_is_deterministic(overfit_run):
    a = evaluate(overfit_run["ckpt"], overfit_run["manifest"], "val")
    b = evaluate(overfit_run["ckpt"], overfit_run["manifest"], "val")
    assert [r.row() for r in a.rows] == [r.row() for r in b.rows]
    assert a.mean == b.mean


def test_ground_truth_as_prediction(overfit_run):
    _, _, y = load_split(overfit_run["manifest"], "train", 128)
    rep = evaluate_masks(list(y) + [np.zeros((8, 8), np.uint8)], list(y) + [np.zeros((8, 8), np.uint8)])
    assert all(v == 1.0 for v in rep.mean.values())


def test_checkpoint_errors(overfit_run, tmp_path):
    with pytest.raises(ConfigMismatch):
        load_checkpoint(overfit_run["ckpt"], expect=replace(overfit_run["model_cfg"], spm_width=8))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.ckpt")
    torch.save({"hello": 1}, tmp_path / "bad.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_cross_dataset_eval(overfit_run, tmp_path):
    ext = write_cohort(tmp_path, range(500, 504), [None] * 4, 128, name="ext")
    model, _ = load_checkpoint(overfit_run["ckpt"])
    rep = cross_dataset_eval(overfit_run["ckpt"], ext)
    assert rep.n == 4 and rep.tags["zero_shot"] is True
    assert rep.tags["evaluated_on_training_manifest"] is False
    assert rep.tags["parameter_digest"] == parameter_digest(model)
    s = rep.summary()
    assert "mDice" in s and "mIoU" in s
    own = cross_dataset_eval(overfit_run["ckpt"], overfit_run["manifest"])
    assert own.tags["evaluated_on_training_manifest"] is True
    assert own.tags["training_patch_overlap"] == 8


def test_predict_file(overfit_run, tmp_path):
    img = np.asarray(Image.open(overfit_run["root"] / "img" / "tiny0.png"))
    Image.fromarray(img[:100, :80]).save(tmp_path / "odd.png")
    m1 = predict_file(overfit_run["ckpt"], tmp_path / "odd.png", tmp_path / "a.png")
    predict_file(overfit_run["ckpt"], tmp_path / "odd.png", tmp_path / "b.png")
    raw = np.asarray(Image.open(tmp_path / "a.png"))
    assert raw.shape == (100, 80) and set(np.unique(raw)) <= {0, 255}
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert np.array_equal(read_mask(tmp_path / "a.png"), m1)


def test_tile_origins():
    assert tile_origins(8, 4, 4) == [0, 4]
    assert tile_origins(10, 4, 4) == [0, 4, 6]
    assert tile_origins(4, 4, 2) == [0]


def test_stitch_no_overlap_places_tiles():
    rng = np.random.default_rng(0)
    slide = rng.integers(0, 256, size=(8, 12, 3), dtype=np.uint8)

    def fn(tile):
        return tile[..., 0] / 255.0

    probs = stitch_probabilities(slide, 4, 4, fn)
    assert np.array_equal(probs, slide[..., 0] / 255.0)


def test_stitch_overlap_averages_before_threshold():
    slide = np.zeros((4, 6, 3), dtype=np.uint8)
    values = iter([0.2, 0.7])

    def fn(tile):
        return np.full(tile.shape[:2], next(values))

    probs = stitch_probabilities(slide, 4, 2, fn)
    assert probs[0].tolist() == pytest.approx([0.2, 0.2, 0.45, 0.45, 0.7, 0.7])
    # thresholding the mean (0.45) gives background; an OR of tile masks would not
    assert ((probs > 0.5).astype(int)[0]).tolist() == [0, 0, 0, 0, 1, 1]
    with pytest.raises(ShapeError):
        stitch_probabilities(slide, 5, 2, fn)


def test_stitch_background_slide_is_near_empty(overfit_run):
    model, _ = load_checkpoint(overfit_run["ckpt"])
    rng = np.random.default_rng(1)
    slide = np.clip(STROMA_RGB + rng.normal(0, 4, size=(256, 384, 3)), 0, 255).astype(np.uint8)
    mask = stitch_wsi(model, slide, 128, 64)
    assert mask.shape == (256, 384)
    assert mask.mean() < 0.05


def test_stitch_tumour_slide_matches_patch(overfit_run):
    model, _ = load_checkpoint(overfit_run["ckpt"])
    _, x, y = load_split(overfit_run["manifest"], "train", 128)
    tile = np.rint(x[0].transpose(1, 2, 0) * 255).astype(np.uint8)
    mask = stitch_wsi(model, tile, 128)
    assert evaluate_masks([mask], [y[0]]).mean["dice"] > 0.9


def test_diverged_loss(tmp_path, overfit_run):
    m = overfit_run["model_cfg"]
    model = DinoNestedUNet(m)
    with torch.no_grad():
        model.head.conv.bias.fill_(math.nan)
    with pytest.raises(DivergedLoss):
        train(m, TrainConfig(epochs=1), overfit_run["manifest"], tmp_path, model=model)
    assert (tmp_path / "run_log.json").is_file()


def test_training_is_reproducible(tmp_path):
    manifest = write_cohort(tmp_path / "d", range(3), ["train", "train", "val"], 64)
    m = tiny_config()
    for opt in ("sgd_nesterov", "adam"):
        t = TrainConfig(optimizer=opt, lr0=1e-3, epochs=2, batch_size=2)
        a = train(m, t, manifest, tmp_path / f"{opt}-a")
        b = train(m, t, manifest, tmp_path / f"{opt}-b")
        assert a.digest == b.digest
        assert a.backbone_digest == b.backbone_digest
