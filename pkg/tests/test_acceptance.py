"""Exit criteria, one test per criterion; the summary hook prints PASS/FAIL lines."""

import hashlib
import json
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from conftest import tiny_config, write_cohort
from dino_nestedunet import cli
from dino_nestedunet.backbone import parameter_digest
from dino_nestedunet.config import ModelConfig, TrainConfig, desk_scale
from dino_nestedunet.data import PatchRecord, largest_remainder, slide_level_split, synthesize_patch
from dino_nestedunet.decoder import grid_nodes
from dino_nestedunet.fapm import FAPM, gram_deviation
from dino_nestedunet.losses import compound_loss
from dino_nestedunet.metrics import PatchMetrics, confusion
from dino_nestedunet.model import DinoNestedUNet
from dino_nestedunet.training import RunLog, evaluate, load_checkpoint, poly_lr, train

acceptance = pytest.mark.acceptance


def synthetic_batch(n, size, seed=0):
    pairs = [synthesize_patch(seed + k, size) for k in range(n)]
    x = torch.as_tensor(np.stack([p[0] for p in pairs])).permute(0, 3, 1, 2).float() / 255.0
    y = torch.as_tensor(np.stack([p[1] for p in pairs])).long()
    return x, y


@acceptance(1, "shape contract: 2x256x256 -> logits 256x256xC in < 30 s on one core")
@pytest.mark.parametrize("variant,classes", [("bce", 1), ("standard", 2)])
def test_shape_contract(variant, classes):
    cfg = desk_scale(loss_variant=variant)
    assert cfg.decoder_widths == (8, 16, 32, 64) and cfg.backbone_kind == "stub"
    model = DinoNestedUNet(cfg)
    x, _ = synthetic_batch(2, 256)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        t0 = time.perf_counter()
        logits = model(x)
        elapsed = time.perf_counter() - t0
    finally:
        torch.set_num_threads(threads)
    print(f"criterion 1 [{variant}]: forward {elapsed:.2f} s")
    assert logits.shape == (2, classes, 256, 256)
    assert elapsed < 30.0


@acceptance(2, "frozen backbone: digest bitwise identical after 5 optimizer steps")
def test_frozen_backbone():
    cfg = desk_scale()
    model = DinoNestedUNet(cfg)
    before = parameter_digest(model.backbone)
    head_before = parameter_digest(model.head)
    backbone_ids = {id(p) for p in model.backbone.parameters()}
    assert not any(id(p) in backbone_ids for p in model.trainable_parameters())
    # every parameter, frozen ones included, goes to an optimizer with weight decay
    opt = torch.optim.SGD(model.parameters(), lr=1e-2, momentum=0.99, nesterov=True, weight_decay=3e-5)
    x, y = synthetic_batch(2, 256, seed=40)
    model.train()
    for _ in range(5):
        loss = compound_loss(model(x), y, cfg.loss_variant)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert parameter_digest(model.backbone) == before
    assert parameter_digest(model.head) != head_before


@acceptance(3, "overfit-a-batch: 8 patches, BCE, 200 steps -> train mean Dice >= 0.95 in < 10 min")
def test_overfit_a_batch(overfit_run):
    log = RunLog.load(overfit_run["log"])
    assert len(log.steps) == 200
    assert overfit_run["model_cfg"].loss_variant == "bce"
    assert torch.are_deterministic_algorithms_enabled()
    rep = evaluate(overfit_run["ckpt"], overfit_run["manifest"], "train")
    print(f"criterion 3: train mean Dice {rep.mean['dice']:.4f} in {overfit_run['seconds']:.1f} s")
    assert rep.n == 8
    assert rep.mean["dice"] >= 0.95
    assert overfit_run["seconds"] < 600


def gradient_model():
    cfg = ModelConfig(
        input_size=8,
        scale_strides=(1, 2, 4, 8),
        backbone_patch_size=4,
        backbone_embed_dim=8,
        backbone_depth=4,
        attention_heads=2,
        sampling_points=2,
        spm_width=4,
        decoder_widths=(4, 4, 4, 4),
        loss_variant="bce",
    )
    torch.manual_seed(0)
    return DinoNestedUNet(cfg).double().eval()


@acceptance(4, "gradient fidelity: float64 analytic vs central differences, rel err <= 1e-3")
def test_gradient_fidelity():
    model = gradient_model()
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64)
    y = (torch.rand(2, 8, 8, generator=g) > 0.5).long()

    def loss_fn():
        return compound_loss(model(x), y, "bce")

    loss_fn().backward()
    groups = {"fapm": model.fapm, "decoder": model.decoder, "head": model.head}
    rng = np.random.default_rng(0)
    h = 1e-6
    checked = {k: 0 for k in groups}
    worst = 0.0
    for name, module in groups.items():
        params = [(n, p) for n, p in module.named_parameters() if p.grad is not None]
        tries = 0
        while checked[name] < 8 and tries < 400:
            tries += 1
            pname, p = params[rng.integers(len(params))]
            idx = int(rng.integers(p.numel()))
            analytic = p.grad.reshape(-1)[idx].item()
            if abs(analytic) < 1e-5:
                continue
            flat = p.data.view(-1)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = loss_fn().item()
                flat[idx] = orig - h
                down = loss_fn().item()
                flat[idx] = orig
            numeric = (up - down) / (2 * h)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
            worst = max(worst, rel)
            assert rel <= 1e-3, f"{name}.{pname}[{idx}]: analytic {analytic} numeric {numeric}"
            checked[name] += 1
    print(f"criterion 4: {sum(checked.values())} coordinates {checked}, max rel err {worst:.2e}")
    assert all(c == 8 for c in checked.values())
    assert sum(checked.values()) >= 20


def oracle(pred, gt):
    tp = tn = fp = fn = 0
    for p, t in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += p and t
        fp += p and not t
        fn += t and not p
        tn += not p and not t

    def r(a, b):
        return Fraction(1) if b == 0 else Fraction(a, b)

    return (tp, tn, fp, fn), {
        "dice": r(2 * tp, 2 * tp + fp + fn),
        "recall": r(tp, tp + fn),
        "precision": r(tp, tp + fp),
        "accuracy": r(tp + tn, tp + tn + fp + fn),
        "iou": r(tp, tp + fp + fn),
    }


@acceptance(5, "metric oracle: exact on 1000 random 16x16 pairs + hand case")
def test_metric_oracle():
    rng = np.random.default_rng(2024)
    for k in range(1000):
        # densities include the empty and full extremes
        pred = (rng.random((16, 16)) < rng.choice([0.0, 1.0, rng.random()], p=[0.05, 0.05, 0.9])).astype(np.uint8)
        gt = (rng.random((16, 16)) < rng.choice([0.0, 1.0, rng.random()], p=[0.05, 0.05, 0.9])).astype(np.uint8)
        counts, want = oracle(pred, gt)
        c = confusion(pred, gt)
        assert (c.tp, c.tn, c.fp, c.fn) == counts
        m = PatchMetrics.from_counts(str(k), c)
        for name, v in want.items():
            assert getattr(m, name) == float(v), (k, name)
    gt = np.array([1] * 8 + [0] * 2 + [1] * 2 + [0] * 4, dtype=np.uint8).reshape(4, 4)
    pred = np.array([1] * 10 + [0] * 6, dtype=np.uint8).reshape(4, 4)
    m = PatchMetrics.from_counts("hand", confusion(pred, gt))
    assert (m.counts.tp, m.counts.fp, m.counts.fn, m.counts.tn) == (8, 2, 2, 4)
    assert (m.dice, m.recall, m.precision, m.accuracy) == (0.8, 0.8, 0.8, 0.75)
    assert abs(m.iou - 0.6667) <= 1e-4


@acceptance(6, "dense topology: declared w_{i+1}+j*w_i, runtime widths match, x0_3 contributors live")
def test_dense_topology():
    widths = (8, 16, 32, 64)
    specs = grid_nodes(widths)
    assert len(specs) == 6
    for s in specs:
        assert s.in_channels == widths[s.level + 1] + s.column * widths[s.level]
    assert {s.name: s.in_channels for s in specs}["x0_3"] == 40

    torch.manual_seed(0)
    model = DinoNestedUNet(tiny_config(input_size=64)).eval()
    seen = {}
    for s in model.decoder.specs:
        model.decoder.nodes[s.name].register_forward_pre_hook(
            lambda mod, args, name=s.name: seen.__setitem__(name, args[0].shape[1])
        )
    x, _ = synthetic_batch(1, 64, seed=7)
    with torch.no_grad():
        base = model(x)
    assert seen == {s.name: s.in_channels for s in model.decoder.specs}

    node = model.decoder.nodes["x0_3"]
    for k in range(3):  # x0_0, x0_1, x0_2 occupy channels 16 + 8k .. 16 + 8(k+1)
        lo = widths[1] + k * widths[0]
        for mode in ("zero", "eps"):
            def edit(mod, args, lo=lo, mode=mode):
                z = args[0].clone()
                if mode == "zero":
                    z[:, lo:lo + widths[0]] = 0
                else:
                    z[:, lo:lo + widths[0]] += 1e-3
                return (z,)

            handle = node.register_forward_pre_hook(edit)
            with torch.no_grad():
                out = model(x)
            handle.remove()
            assert (out - base).abs().max().item() > 0, (k, mode)


@acceptance(7, "FAPM identity: (gamma, beta) = (1, 0) gives Z_mod == Z_sp; Gram deviation <= 1e-5")
@pytest.mark.parametrize("widths", [(8, 16, 32, 64), (64, 128, 256, 512)])
def test_fapm_identity(widths):
    fapm = FAPM(384, widths)
    for w in fapm.projection_weights():
        assert gram_deviation(w) <= 1e-5
    g = torch.Generator().manual_seed(5)
    for level, s in zip(fapm.levels, (16, 8, 4, 2)):
        h = level.generator.register_forward_hook(lambda m, i, o: (torch.ones_like(o[0]), torch.zeros_like(o[1])))
        c = torch.randn(2, 384, s, s, generator=g)
        z_ctx, z_sp = level.decompose(c)
        assert torch.equal(level.modulate(z_ctx, z_sp), z_sp)
        h.remove()


@acceptance(8, "schedule and checkpoints: poly_lr endpoints, strict decrease, val_dice strictly increasing")
def test_schedule_and_checkpoints(overfit_run, tmp_path):
    lr0 = TrainConfig().lr0
    total = 1000
    assert poly_lr(0, total, lr0) == 1e-4
    assert poly_lr(total, total, lr0) == 0.0
    lrs = [poly_lr(s, total, lr0, 0.9) for s in range(total + 1)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))

    second = write_cohort(tmp_path, range(300, 306), ["train"] * 4 + ["val"] * 2, 64, name="second")
    train(tiny_config(), TrainConfig(lr0=1e-2, epochs=15, batch_size=2, seed=3), second, tmp_path / "run")
    for log_path in (overfit_run["log"], tmp_path / "run" / "run_log.json"):
        log = RunLog.load(log_path)
        dices = [c["val_dice"] for c in log.checkpoints]
        assert dices, log_path
        assert all(b > a for a, b in zip(dices, dices[1:])), dices
        steps = [s["lr"] for s in log.steps]
        assert all(b < a for a, b in zip(steps, steps[1:]))


@acceptance(9, "no-leakage splits: 100 seeds x 50 slides, disjoint slide sets, 7:1:2 largest remainder")
def test_no_leakage_splits():
    records = [PatchRecord(f"s{s}-p{p}", f"slide{s:02d}", f"s{s}-p{p}.png", f"s{s}-p{p}_m.png")
               for s in range(50) for p in range(3)]
    expected = largest_remainder(50, (7, 1, 2))
    assert expected == [35, 5, 10]
    assignments = set()
    for seed in range(100):
        m = slide_level_split(records, (7, 1, 2), seed)
        sets = [m.slides(s) for s in ("train", "val", "test")]
        assert [len(s) for s in sets] == expected
        assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
        assert set().union(*sets) == {f"slide{s:02d}" for s in range(50)}
        for split, slides in zip(("train", "val", "test"), sets):
            assert all(r.slide_id in slides for r in m.split(split))
        assignments.add(tuple(sorted(sets[2])))
    assert len(assignments) > 1


def file_sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@acceptance(10, "zero-shot: xeval on a second cohort keeps digests and emits mDice/mIoU")
def test_zero_shot_contract(overfit_run, tmp_path):
    ckpt = overfit_run["ckpt"]
    model, meta = load_checkpoint(ckpt)
    digest_before, sha_before = parameter_digest(model), file_sha(ckpt)
    assert cli.main(["synth", "--out", str(tmp_path / "ext"), "--slides", "4", "--patches-per-slide", "2",
                     "--size", "128", "--seed", "77", "--name", "external"]) == 0
    out = tmp_path / "xeval"
    assert cli.main(["xeval", "--checkpoint", str(ckpt), "--manifest", str(tmp_path / "ext" / "manifest.csv"),
                     "--out", str(out), "--deterministic"]) == 0
    reloaded, _ = load_checkpoint(ckpt)
    assert parameter_digest(reloaded) == digest_before
    assert file_sha(ckpt) == sha_before
    summary = json.loads((out / "xeval.json").read_text())
    assert summary["parameter_digest"] == digest_before
    assert summary["zero_shot"] is True and summary["evaluated_on_training_manifest"] is False
    header, row = (out / "xeval_summary.csv").read_text().splitlines()[:2]
    cols = dict(zip(header.split(","), row.split(",")))
    assert {"mDice", "mIoU"} <= set(cols)
    assert 0.0 <= float(cols["mDice"]) <= 1.0 and 0.0 <= float(cols["mIoU"]) <= 1.0
    assert cols["n"] == "8"
    print(f"criterion 10: mDice {float(cols['mDice']):.4f} mIoU {float(cols['mIoU']):.4f}")
