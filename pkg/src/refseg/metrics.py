"""Segmentation metrics: oIoU, mIoU, Precision@X and the non-target
activation IoU (NTA-IoU) together with its eligibility filter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .datamodel import BinaryMask, RISExample

DEFAULT_THRESHOLDS = (0.5, 0.7, 0.9)


@dataclass(frozen=True)
class EvalRecord:
    prediction: BinaryMask  # I_1
    target_gt: BinaryMask  # G_1
    cocategory_gt: BinaryMask  # G, includes the target

    def __post_init__(self):
        if not (self.prediction.shape == self.target_gt.shape == self.cocategory_gt.shape):
            raise ValueError("prediction / target / co-category masks differ in size")
        if not self.target_gt.issubset(self.cocategory_gt):
            raise ValueError("target GT must be contained in the co-category GT")


@dataclass(frozen=True)
class NTATemplate:
    """An NTA-eligible example waiting for its prediction."""

    index: int
    target_gt: BinaryMask
    cocategory_gt: BinaryMask

    def with_prediction(self, pred: BinaryMask) -> EvalRecord:
        return EvalRecord(pred, self.target_gt, self.cocategory_gt)


@dataclass
class MetricReport:
    oiou: float
    miou: float
    prec_at: dict[float, float]  # percentages
    n_examples: int
    nta_iou: Optional[float] = None  # None when no eligible example had a defined value
    n_nta_eligible: int = 0
    n_nta_defined: int = 0
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, int]]:
        """(metric, value, n) rows for CSV output."""
        out = [
            ("oIoU", f"{self.oiou:.6f}", self.n_examples),
            ("mIoU", f"{self.miou:.6f}", self.n_examples),
        ]
        for x, v in sorted(self.prec_at.items()):
            out.append((f"Pr@{x:g}", f"{v:.4f}", self.n_examples))
        nta = "n/a" if self.nta_iou is None else f"{self.nta_iou:.6f}"
        out.append(("NTA-IoU", nta, self.n_nta_eligible))
        return out


def nta_iou(rec: EvalRecord) -> Optional[float]:
    """|W & S| / |W | S| with W the wrongly predicted region (prediction
    outside the target) and S the non-target co-category region. Returns
    None when both regions are empty."""
    pred = rec.prediction.bits
    tgt = rec.target_gt.bits
    wrong = pred & ~tgt
    nontarget = rec.cocategory_gt.bits & ~tgt
    union = int((wrong | nontarget).sum())
    if union == 0:
        return None
    return int((wrong & nontarget).sum()) / union


def _check_pairs(preds: Sequence[BinaryMask], gts: Sequence[BinaryMask]) -> None:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise ValueError("empty prediction list")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ValueError(f"mask dimension mismatch: {p.shape} vs {g.shape}")


def pair_iou(pred: BinaryMask, gt: BinaryMask) -> float:
    """IoU of one pair; two empty masks count as a perfect match (1.0)."""
    union = int((pred.bits | gt.bits).sum())
    if union == 0:
        return 1.0
    return int((pred.bits & gt.bits).sum()) / union


def oiou(preds: Sequence[BinaryMask], gts: Sequence[BinaryMask]) -> float:
    _check_pairs(preds, gts)
    inter = sum(int((p.bits & g.bits).sum()) for p, g in zip(preds, gts))
    union = sum(int((p.bits | g.bits).sum()) for p, g in zip(preds, gts))
    if union == 0:
        return 1.0
    return inter / union


def miou(preds: Sequence[BinaryMask], gts: Sequence[BinaryMask]) -> float:
    _check_pairs(preds, gts)
    return math.fsum(pair_iou(p, g) for p, g in zip(preds, gts)) / len(preds)


def precision_at(
    preds: Sequence[BinaryMask],
    gts: Sequence[BinaryMask],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
) -> dict[float, float]:
    """Percentage of pairs whose IoU is strictly higher than each threshold."""
    _check_pairs(preds, gts)
    thresholds = tuple(thresholds)
    for x in thresholds:
        if not 0.0 < x < 1.0:
            raise ValueError(f"threshold {x} outside (0, 1)")
    ious = np.array([pair_iou(p, g) for p, g in zip(preds, gts)])
    return {float(x): 100.0 * float((ious > x).sum()) / len(ious) for x in thresholds}


def build_nta_subset(dataset: Sequence[RISExample]) -> list[NTATemplate]:
    """Keep the examples whose image holds at least two instances of the
    target's category, with G the union of the target and its siblings."""
    return [
        NTATemplate(i, ex.target_mask, ex.cocategory_mask())
        for i, ex in enumerate(dataset)
        if ex.sibling_masks
    ]


def mean_nta_iou(records: Iterable[EvalRecord]) -> tuple[Optional[float], int]:
    """Mean over the records with a defined value, and how many there were."""
    vals = [v for v in (nta_iou(r) for r in records) if v is not None]
    if not vals:
        return None, 0
    return math.fsum(vals) / len(vals), len(vals)


def report(
    preds: Sequence[BinaryMask],
    dataset: Sequence[RISExample],
    with_nta: bool = True,
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
) -> MetricReport:
    gts = [ex.target_mask for ex in dataset]
    rep = MetricReport(
        oiou=oiou(preds, gts),
        miou=miou(preds, gts),
        prec_at=precision_at(preds, gts, thresholds),
        n_examples=len(gts),
    )
    if with_nta:
        subset = build_nta_subset(dataset)
        rep.n_nta_eligible = len(subset)
        rep.nta_iou, rep.n_nta_defined = mean_nta_iou(t.with_prediction(preds[t.index]) for t in subset)
    return rep
