import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dino_nestedunet.config import ModelConfig, TrainConfig
from dino_nestedunet.data import Manifest, PatchRecord, save_patch, synthesize_patch
from dino_nestedunet.training import set_determinism, train

OVERFIT_SIZE = 128


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        input_size=64,
        backbone_embed_dim=32,
        backbone_depth=4,
        attention_heads=2,
        spm_width=16,
        decoder_widths=(8, 16, 32, 64),
    )
    base.update(kw)
    return ModelConfig(**base)


def write_cohort(root: Path, seeds, splits, size: int, name="tiny") -> Manifest:
    (root / "img").mkdir(parents=True, exist_ok=True)
    records = []
    for k, (seed, split) in enumerate(zip(seeds, splits)):
        img, mask = synthesize_patch(seed, size)
        ip, mp = f"img/{name}{k}.png", f"img/{name}{k}_mask.png"
        save_patch(img, mask, root / ip, root / mp)
        records.append(PatchRecord(f"{name}-{k}", f"{name}-slide{k}", ip, mp, split))
    return Manifest(records, name, root=root)


@pytest.fixture(autouse=True)
def _deterministic():
    set_determinism(0, True)
    yield


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """8 seeded synthetic train patches, BCE, 200 SGD-Nesterov steps."""
    root = tmp_path_factory.mktemp("overfit")
    manifest = write_cohort(root, range(100, 110), ["train"] * 8 + ["val"] * 2, OVERFIT_SIZE)
    m = tiny_config(input_size=OVERFIT_SIZE, loss_variant="bce")
    t = TrainConfig(optimizer="sgd_nesterov", lr0=1e-2, epochs=200, batch_size=8, seed=0)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    try:
        meta = train(m, t, manifest, root / "run", deterministic=True)
    finally:
        torch.set_num_threads(threads)
    return {"root": root, "manifest": manifest, "model_cfg": m, "train_cfg": t, "meta": meta,
            "ckpt": root / "run" / "best.ckpt", "log": root / "run" / "run_log.json",
            "seconds": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion
# ---------------------------------------------------------------------------

_ACCEPTANCE: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        key = marker.args[0]
        prev = _ACCEPTANCE.get(key, (marker.args[1], True))
        _ACCEPTANCE[key] = (prev[0], prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key:>2}: {title}")


def random_masks(rng: np.random.Generator, n: int, shape=(16, 16)):
    return [(rng.random(shape) < rng.random()).astype(np.uint8) for _ in range(n)]
