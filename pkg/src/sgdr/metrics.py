"""Dice and average symmetric surface distance, per structure and averaged."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Set, Tuple

import numpy as np
from scipy import ndimage

from .domain import CLASS_NAMES, FOREGROUND_CLASSES

EVAL_CLASSES = tuple(CLASS_NAMES[c] for c in FOREGROUND_CLASSES)


def _pair(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_coefficient(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def boundary_mask(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (border counts as outside)."""
    mask = np.asarray(mask).astype(bool)
    interior = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)
    return mask & ~interior


def extract_boundary(mask) -> Set[Tuple[int, int]]:
    return {(int(r), int(c)) for r, c in zip(*np.nonzero(boundary_mask(mask)))}


def image_diagonal_mm(shape, spacing_mm) -> float:
    return float(np.hypot(shape[0] * spacing_mm[0], shape[1] * spacing_mm[1]))


def _surface_distances(from_b, to_b, spacing):
    # distance from every pixel centre to the nearest pixel of to_b
    dist = ndimage.distance_transform_edt(~to_b, sampling=spacing)
    return dist[from_b]


def assd_with_status(pred, gt, spacing_mm=(1.0, 1.0)) -> Tuple[float, bool]:
    """ASSD and whether the slice hit the degenerate one-sided-empty case."""
    pred, gt = _pair(pred, gt)
    bp, bg = boundary_mask(pred), boundary_mask(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 0.0, False
    if n_p == 0 or n_g == 0:
        return image_diagonal_mm(pred.shape, spacing_mm), True
    spacing = tuple(float(s) for s in spacing_mm)
    d_pg = _surface_distances(bp, bg, spacing)
    d_gp = _surface_distances(bg, bp, spacing)
    return float((d_pg.sum() + d_gp.sum()) / (n_p + n_g)), False


def assd(pred, gt, spacing_mm=(1.0, 1.0)) -> float:
    return assd_with_status(pred, gt, spacing_mm)[0]


@dataclass
class EvalReport:
    dice: Dict[str, float]        # percent
    assd: Dict[str, float]        # millimetres
    mean_dice: float
    mean_assd: float
    num_samples: int
    num_degenerate: int

    def __post_init__(self):
        for v in self.dice.values():
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"dice {v} outside [0, 100]")
        for v in self.assd.values():
            if v < 0:
                raise ValueError(f"negative assd {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def to_table(self) -> str:
        lines = [
            "# Average = macro mean over MYO, LV, RV (each itself a mean over slices)",
            f"{'Metric':<10}" + "".join(f"{c:>10}" for c in EVAL_CLASSES) + f"{'Average':>10}",
            f"{'Dice(%)':<10}" + "".join(f"{self.dice[c]:>10.2f}" for c in EVAL_CLASSES)
            + f"{self.mean_dice:>10.2f}",
            f"{'ASSD(mm)':<10}" + "".join(f"{self.assd[c]:>10.2f}" for c in EVAL_CLASSES)
            + f"{self.mean_assd:>10.2f}",
            f"# slices={self.num_samples} degenerate={self.num_degenerate}",
        ]
        return "\n".join(lines) + "\n"


def parse_table(text: str) -> Dict[str, Dict[str, float]]:
    """Inverse of :meth:`EvalReport.to_table` (values at printed precision)."""
    rows = [ln.split() for ln in text.splitlines() if ln and not ln.startswith("#")]
    header = rows[0][1:]
    return {r[0]: dict(zip(header, map(float, r[1:]))) for r in rows[1:]}


def evaluate(predictions: Sequence[np.ndarray], ground_truths: Sequence[np.ndarray],
             spacing_mm=(1.0, 1.0)) -> EvalReport:
    """Per-slice, per-class Dice/ASSD (one-vs-rest), averaged over slices."""
    if len(predictions) == 0 or len(predictions) != len(ground_truths):
        raise ValueError("need a non-empty, equal-length list of predictions and ground truths")
    per: Dict[str, List[Tuple[float, float]]] = {c: [] for c in EVAL_CLASSES}
    degenerate = 0
    for pred, gt in zip(predictions, ground_truths):
        pred = getattr(pred, "labels", pred)
        gt = getattr(gt, "labels", gt)
        for cls_id, name in zip(FOREGROUND_CLASSES, EVAL_CLASSES):
            p, g = pred == cls_id, gt == cls_id
            a, deg = assd_with_status(p, g, spacing_mm)
            degenerate += deg
            per[name].append((dice_coefficient(p, g), a))
    dice = {c: 100.0 * float(np.mean([d for d, _ in per[c]])) for c in EVAL_CLASSES}
    dist = {c: float(np.mean([a for _, a in per[c]])) for c in EVAL_CLASSES}
    return EvalReport(
        dice=dice, assd=dist,
        mean_dice=float(np.mean(list(dice.values()))),
        mean_assd=float(np.mean(list(dist.values()))),
        num_samples=len(predictions), num_degenerate=degenerate,
    )
