"""Static report figures: Dice boxplots and error-tinted overlay panels.

Overlay colours: false positives red, false negatives yellow, true
positives white over the dimmed input.
"""

from __future__ import annotations

import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import EmptyInput  # noqa: E402

FP_RGB = (255, 0, 0)
FN_RGB = (255, 220, 0)
TP_RGB = (255, 255, 255)

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_") or "cohort"


def overlay_tints(image: np.ndarray, gt: np.ndarray, pred: np.ndarray):
    """Tint FP/FN/TP pixels over a dimmed copy of ``image``.

    Returns the (H, W, 3) uint8 panel and the tinted pixel counts
    ``{"fp": ..., "fn": ..., "tp": ...}``.
    """
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    g, p = np.asarray(gt).astype(bool), np.asarray(pred).astype(bool)
    out = (img.astype(np.float32) * 0.6).astype(np.uint8)
    fp, fn, tp = p & ~g, ~p & g, p & g
    out[tp] = TP_RGB
    out[fp] = FP_RGB
    out[fn] = FN_RGB
    return out, {"fp": int(fp.sum()), "fn": int(fn.sum()), "tp": int(tp.sum())}


def dice_boxplot(reports, path, title: str = "Dice distribution"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(reports), 3.2))
        ax.boxplot(
            [r.values("dice") for r in reports],
            showfliers=True,
            widths=0.6,
            medianprops={"color": "black"},
        )
        ax.set_xticks(range(1, len(reports) + 1), [r.cohort or f"#{k}" for k, r in enumerate(reports)],
                      rotation=20, ha="right")
        ax.set_ylabel("Dice")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def overlay_panel(patch_id: str, image, gt, pred, path):
    tinted, counts = overlay_tints(image, gt, pred)
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 3 and img.shape[-1] != 3:
        img = img.transpose(1, 2, 0)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.7))
        axes[0].imshow(img)
        axes[0].set_title("input")
        axes[1].imshow(np.asarray(gt), cmap="gray", vmin=0, vmax=1)
        axes[1].set_title("ground truth")
        axes[2].imshow(tinted)
        axes[2].set_title(f"prediction (FP {counts['fp']}, FN {counts['fn']})")
        for ax in axes:
            ax.set_axis_off()
        fig.suptitle(patch_id)
        fig.savefig(path)
        plt.close(fig)
    return Path(path), counts


def emit_plots(reports, out_dir, overlays=None) -> list[Path]:
    """Write the combined and per-cohort Dice boxplots, plus overlay panels.

    ``overlays`` is an optional iterable of ``(patch_id, image, gt, pred)``.
    """
    reports = list(reports)
    if not reports:
        raise EmptyInput("emit_plots needs at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [dice_boxplot(reports, out_dir / "dice_boxplot.png")]
    for r in reports:
        paths.append(dice_boxplot([r], out_dir / f"dice_boxplot_{_slug(r.cohort)}.png", title=r.cohort))
    for patch_id, image, gt, pred in overlays or ():
        paths.append(overlay_panel(patch_id, image, gt, pred, out_dir / f"overlay_{_slug(patch_id)}.png")[0])
    return paths
