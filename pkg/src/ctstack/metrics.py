"""Dice, prevalence, area-plots and the total-variation continuity statistic."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidInputError
from .volume import MaskVolume


def dice_score(pred: MaskVolume, truth: MaskVolume) -> float:
    """``2|P & T| / (|P| + |T|)``; two empty masks agree perfectly (1.0)."""
    pred.check_same_geometry(truth)
    p = pred.voxels.astype(bool)
    t = truth.voxels.astype(bool)
    denom = int(np.count_nonzero(p)) + int(np.count_nonzero(t))
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(p & t)) / denom


def dataset_dice(pairs: Sequence[tuple[MaskVolume, MaskVolume]]) -> float:
    """Unweighted mean of per-scan dice scores."""
    if not pairs:
        raise InvalidInputError("dataset_dice needs at least one (pred, truth) pair")
    return float(np.mean([dice_score(p, t) for p, t in pairs]))


def pooled_dice(pairs: Sequence[tuple[MaskVolume, MaskVolume]]) -> float:
    """Dice over all voxels of all scans pooled together (reported alongside the per-scan mean)."""
    if not pairs:
        raise InvalidInputError("pooled_dice needs at least one (pred, truth) pair")
    inter = total = 0
    for p, t in pairs:
        p.check_same_geometry(t)
        pb, tb = p.voxels.astype(bool), t.voxels.astype(bool)
        inter += int(np.count_nonzero(pb & tb))
        total += int(np.count_nonzero(pb)) + int(np.count_nonzero(tb))
    return 1.0 if total == 0 else 2.0 * inter / total


def prevalence(masks: Sequence[MaskVolume]) -> float:
    """Fraction of slices, over the whole dataset, holding at least one positive voxel."""
    if not masks:
        raise InvalidInputError("prevalence needs at least one mask")
    positive = sum(int(np.count_nonzero(m.voxels.reshape(m.depth, -1).any(axis=1))) for m in masks)
    return positive / sum(m.depth for m in masks)


@dataclass(frozen=True)
class AreaPlot:
    scan_id: str
    ratios: tuple[float, ...]
    normalized: tuple[float, ...]

    def __len__(self):
        return len(self.ratios)

    @classmethod
    def from_ratios(cls, ratios, scan_id: str = "") -> "AreaPlot":
        r = np.asarray(ratios, dtype=np.float64)
        peak = r.max() if r.size else 0.0
        norm = r / peak if peak > 0 else np.zeros_like(r)
        return cls(scan_id, tuple(r.tolist()), tuple(norm.tolist()))


def area_plot(mask: MaskVolume) -> AreaPlot:
    counts = np.count_nonzero(mask.voxels.reshape(mask.depth, -1), axis=1)
    return AreaPlot.from_ratios(counts / float(mask.width * mask.height), scan_id=mask.scan_id)


def continuity_tv(plot: AreaPlot | Sequence[float]) -> float:
    """Total variation of the normalized area-plot; small means slice-to-slice continuity."""
    values = np.asarray(plot.normalized if isinstance(plot, AreaPlot) else plot, dtype=np.float64)
    if values.size < 2:
        raise InvalidInputError("continuity needs an area-plot with at least two slices")
    return float(np.abs(np.diff(values)).sum())


@dataclass
class ScanEval:
    scan_id: str
    dice: float
    truth_tv: float | None
    pred_tv: float | None
    depth: int


@dataclass
class EvalReport:
    scans: list[ScanEval]
    mean_dice: float
    pooled_dice: float
    prevalence: float
    threshold: float | None = None
    timing: dict | None = None
    config: dict = field(default_factory=dict)

    @property
    def dice(self) -> list[float]:
        return [s.dice for s in self.scans]

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(pairs: Sequence[tuple[MaskVolume, MaskVolume]], **extra) -> EvalReport:
    if not pairs:
        raise InvalidInputError("nothing to evaluate")
    scans = []
    for pred, truth in pairs:
        tv = (lambda m: continuity_tv(area_plot(m)) if m.depth >= 2 else None)
        scans.append(ScanEval(truth.scan_id or pred.scan_id, dice_score(pred, truth), tv(truth), tv(pred), truth.depth))
    return EvalReport(
        scans=scans,
        mean_dice=float(np.mean([s.dice for s in scans])),
        pooled_dice=pooled_dice(pairs),
        prevalence=prevalence([t for _, t in pairs]),
        **extra,
    )


def format_dice_table(results: dict[str, float]) -> str:
    """Two-column model/dice table in percent, e.g. ``{"2D Model": 0.73}``."""
    rows = [("Model", "Dice Score")] + [(name, f"{100 * value:.0f}%") for name, value in results.items()]
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    rule = f"+-{'-' * w0}-+-{'-' * w1}-+"
    lines = [rule]
    for i, (a, b) in enumerate(rows):
        lines.append(f"| {a:<{w0}} | {b:>{w1}} |")
        if i == 0:
            lines.append(rule)
    lines.append(rule)
    return "\n".join(lines)
