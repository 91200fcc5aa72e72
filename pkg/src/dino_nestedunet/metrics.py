"""Pixel-level confusion counts, overlap metrics and cohort aggregation.

All metrics are computed from exact integer counts. When a metric's
denominator is zero it returns 1.0: with no positives in either mask the
prediction agrees perfectly with the ground truth.

Aggregates are the arithmetic mean and the sample standard deviation
(``n - 1``) over patches. For a single patch the std is reported as 0 and
``std_defined`` is False.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import EmptyInput, ShapeError, VariantMismatch

METRICS = ("dice", "recall", "precision", "accuracy", "iou")
CSV_COLUMNS = ("patch_id",) + METRICS + ("tp", "tn", "fp", "fn")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def binarize(logits, variant: str) -> np.ndarray:
    """Hard labels: ``sigmoid(z) > 0.5`` for bce, argmax for standard.

    ``logits`` is (C, H, W) or (B, C, H, W). Ties go to background.
    """
    z = torch.as_tensor(logits)
    chan_dim = 0 if z.dim() == 3 else 1
    c = z.shape[chan_dim]
    if variant == "bce":
        if c != 1:
            raise VariantMismatch(f"bce variant expects 1 channel, got {c}")
        out = (torch.sigmoid(z) > 0.5).squeeze(chan_dim)
    elif variant == "standard":
        if c < 2:
            raise VariantMismatch(f"standard variant expects >= 2 channels, got {c}")
        out = z.argmax(chan_dim) == 1
    else:
        raise VariantMismatch(f"unknown variant {variant!r}")
    return out.cpu().numpy().astype(np.uint8)


def confusion(pred, y) -> ConfusionCounts:
    pred, y = np.asarray(pred), np.asarray(y)
    if pred.shape != y.shape:
        raise ShapeError(f"prediction {pred.shape} and mask {y.shape} differ")
    p, t = pred.astype(bool), y.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total)


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn)


_FUNCS = {"dice": dice, "recall": recall, "precision": precision, "accuracy": accuracy, "iou": iou}


@dataclass
class PatchMetrics:
    patch_id: str
    counts: ConfusionCounts
    dice: float
    recall: float
    precision: float
    accuracy: float
    iou: float

    @classmethod
    def from_counts(cls, patch_id: str, c: ConfusionCounts) -> "PatchMetrics":
        return cls(patch_id, c, **{k: f(c) for k, f in _FUNCS.items()})

    def row(self) -> dict:
        d = {"patch_id": self.patch_id}
        d.update({k: getattr(self, k) for k in METRICS})
        d.update(asdict(self.counts))
        return d


@dataclass
class MetricReport:
    rows: list[PatchMetrics]
    mean: dict[str, float]
    std: dict[str, float]
    std_defined: bool = True
    cohort: str = ""
    tags: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.rows)

    def values(self, metric: str) -> list[float]:
        return [getattr(r, metric) for r in self.rows]

    def summary(self) -> dict:
        d = {
            "cohort": self.cohort,
            "n": self.n,
            "mean": self.mean,
            "std": self.std,
            "std_defined": self.std_defined,
            "mDice": self.mean["dice"],
            "mIoU": self.mean["iou"],
        }
        d.update(self.tags)
        return d


def aggregate(rows, cohort: str = "", tags: dict | None = None) -> MetricReport:
    rows = list(rows)
    if not rows:
        raise EmptyInput("cannot aggregate zero rows")
    mean, std = {}, {}
    for k in METRICS:
        vals = np.array([getattr(r, k) for r in rows], dtype=np.float64)
        mean[k] = float(vals.mean())
        std[k] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return MetricReport(rows, mean, std, len(rows) > 1, cohort, dict(tags or {}))


def evaluate_masks(preds, gts, ids=None, cohort: str = "", tags=None) -> MetricReport:
    preds, gts = list(preds), list(gts)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(preds))]
    rows = [PatchMetrics.from_counts(i, confusion(p, g)) for i, p, g in zip(ids, preds, gts)]
    return aggregate(rows, cohort, tags)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def write_report(report: MetricReport, csv_path: str | Path, json_path: str | Path | None = None) -> None:
    """Per-patch delimited rows (columns ``CSV_COLUMNS``) plus a JSON summary."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in report.rows:
            w.writerow(r.row())
    if json_path is None:
        json_path = csv_path.with_suffix(".json")
    Path(json_path).write_text(json.dumps(report.summary(), indent=2), encoding="utf-8")


def read_report(csv_path: str | Path) -> MetricReport:
    csv_path = Path(csv_path)
    rows = []
    with csv_path.open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            c = ConfusionCounts(int(rec["tp"]), int(rec["tn"]), int(rec["fp"]), int(rec["fn"]))
            rows.append(PatchMetrics.from_counts(rec["patch_id"], c))
    meta_path = csv_path.with_suffix(".json")
    cohort, tags = csv_path.stem, {}
    if meta_path.is_file():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        cohort = meta.get("cohort") or cohort
        skip = {"cohort", "n", "mean", "std", "std_defined", "mDice", "mIoU"}
        tags = {k: v for k, v in meta.items() if k not in skip}
    return aggregate(rows, cohort, tags)
