"""Dice, false-negative and false-positive volumes over connected lesion components."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DimMismatch, EmptyList

METRIC_COLUMNS = ("dice", "fnv_cm3", "fpv_cm3")


@dataclass
class SegScore:
    case: str
    dice: float
    fnv_cm3: float
    fpv_cm3: float


def _pair(pred, gt):
    pred = np.asarray(pred) != 0
    gt = np.asarray(gt) != 0
    if pred.shape != gt.shape:
        raise DimMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def connected_components(mask, connectivity: int = 26) -> tuple[np.ndarray, np.ndarray]:
    """Labels ``1..K`` for each connected foreground region and the size of each."""
    if connectivity not in (6, 18, 26):
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    rank = {6: 1, 18: 2, 26: 3}[connectivity]
    structure = ndimage.generate_binary_structure(3, rank)
    mask = np.asarray(mask) != 0
    labels, k = ndimage.label(mask, structure=structure)
    sizes = np.bincount(labels.ravel(), minlength=k + 1)[1:]
    return labels, sizes


def _missed_volume(ref, other, connectivity) -> int:
    """Voxels of ``ref`` components that do not touch ``other`` at all."""
    labels, sizes = connected_components(ref, connectivity)
    if sizes.size == 0:
        return 0
    hit = np.zeros(sizes.size + 1, dtype=bool)
    hit[np.unique(labels[other])] = True
    return int(sizes[~hit[1:]].sum())


def false_volumes(pred, gt, spacing=(1.0, 1.0, 1.0), connectivity: int = 26) -> tuple[float, float]:
    """``(fnv_cm3, fpv_cm3)``: GT components with zero overlap, prediction components with zero overlap."""
    pred, gt = _pair(pred, gt)
    voxel_cm3 = float(np.prod(spacing)) / 1000.0
    fnv = _missed_volume(gt, pred, connectivity) * voxel_cm3
    fpv = _missed_volume(pred, gt, connectivity) * voxel_cm3
    return fnv, fpv


def score_case(name, pred, gt, spacing=(1.0, 1.0, 1.0), connectivity: int = 26) -> SegScore:
    fnv, fpv = false_volumes(pred, gt, spacing, connectivity)
    return SegScore(name, dice(pred, gt), fnv, fpv)


def aggregate(scores: list[SegScore]) -> dict:
    if not scores:
        raise EmptyList("cannot aggregate an empty score list")
    # fsum is exactly rounded, so the means do not depend on list order
    out = {col: math.fsum(getattr(s, col) for s in scores) / len(scores) for col in METRIC_COLUMNS}
    out["n_cases"] = len(scores)
    return out


def write_scores_csv(scores: list[SegScore], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("case",) + METRIC_COLUMNS)
        for s in scores:
            w.writerow((s.case, repr(s.dice), repr(s.fnv_cm3), repr(s.fpv_cm3)))


def read_scores_csv(path) -> list[SegScore]:
    with open(path, newline="") as fh:
        return [SegScore(r["case"], float(r["dice"]), float(r["fnv_cm3"]), float(r["fpv_cm3"])) for r in csv.DictReader(fh)]


def write_aggregate_json(scores: list[SegScore], path) -> dict:
    summary = aggregate(scores)
    summary["cases"] = [asdict(s) for s in scores]
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")
    return summary
