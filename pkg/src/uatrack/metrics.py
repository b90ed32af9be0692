"""CLEAR-MOT style evaluation: MOTA, MOTP, miss / mismatch / false-positive rates.

Matching is persistence-first: a ground-truth object keeps its previous
hypothesis while their overlap stays above the gate, remaining pairs are
matched by optimal assignment on (1 - IoU), and an identity switch is counted
whenever a ground-truth object's matched hypothesis label changes from the
last one it had.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox, iou

IOU_GATE = 0.5


@dataclass(frozen=True)
class FrameTruth:
    frame: int
    objects: tuple[tuple[str, BBox], ...]

    def __post_init__(self):
        labels = [g for g, _ in self.objects]
        if len(labels) != len(set(labels)):
            raise ValueError(f"duplicate ground-truth labels in frame {self.frame}")


@dataclass
class FrameMatching:
    """Per-frame match outcome plus the carried gt -> hyp correspondence."""

    matches: list[tuple[str, int, float]] = field(default_factory=list)  # (gt, hyp, iou)
    misses: int = 0
    false_positives: int = 0
    switches: int = 0
    gt_count: int = 0
    mapping: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class MetricsReport:
    mota: float
    motp: float
    miss: float
    mismatch: float
    fp: float
    matches: int
    misses: int
    false_positives: int
    switches: int
    gt_total: int

    def to_dict(self) -> dict:
        return {
            "mota": self.mota, "motp": self.motp, "miss": self.miss,
            "mismatch": self.mismatch, "fp": self.fp,
            "counts": {"matches": self.matches, "misses": self.misses,
                       "false_positives": self.false_positives,
                       "switches": self.switches, "gt_total": self.gt_total},
        }


def match_frame(hyps: Sequence[tuple[int, BBox]],
                truth: Sequence[tuple[str, BBox]],
                prev: FrameMatching | None = None) -> FrameMatching:
    """Match one frame of hypotheses against ground truth.

    ``prev`` carries the correspondence from earlier frames; pairs that still
    overlap at IOU_GATE are kept before any fresh assignment is attempted.
    """
    carried = dict(prev.mapping) if prev is not None else {}
    gt_labels = [g for g, _ in truth]
    gt_boxes = {g: b for g, b in truth}
    hyp_labels = [h for h, _ in hyps]
    hyp_boxes = {h: b for h, b in hyps}

    matches: list[tuple[str, int, float]] = []
    used_gt: set[str] = set()
    used_hyp: set[int] = set()

    for g in gt_labels:
        h = carried.get(g)
        if h is None or h not in hyp_boxes or h in used_hyp:
            continue
        v = iou(gt_boxes[g], hyp_boxes[h])
        if v >= IOU_GATE:
            matches.append((g, h, v))
            used_gt.add(g)
            used_hyp.add(h)

    free_gt = [g for g in gt_labels if g not in used_gt]
    free_hyp = [h for h in hyp_labels if h not in used_hyp]
    if free_gt and free_hyp:
        cost = np.ones((len(free_gt), len(free_hyp)))
        for i, g in enumerate(free_gt):
            for j, h in enumerate(free_hyp):
                v = iou(gt_boxes[g], hyp_boxes[h])
                if v >= IOU_GATE:
                    cost[i, j] = 1.0 - v
        rows, cols = linear_sum_assignment(cost)
        for i, j in zip(rows, cols):
            if cost[i, j] <= 1.0 - IOU_GATE:
                g, h = free_gt[i], free_hyp[j]
                matches.append((g, h, 1.0 - cost[i, j]))
                used_gt.add(g)
                used_hyp.add(h)

    switches = 0
    mapping = carried
    for g, h, _ in matches:
        old = mapping.get(g)
        if old is not None and old != h:
            switches += 1
        mapping[g] = h

    return FrameMatching(
        matches=sorted(matches),
        misses=len(gt_labels) - len(used_gt),
        false_positives=len(hyp_labels) - len(used_hyp),
        switches=switches,
        gt_count=len(gt_labels),
        mapping=mapping,
    )


def accumulate(matchings: Sequence[FrameMatching]) -> MetricsReport:
    """Fold per-frame matchings into the five summary statistics.

    miss / fp / mismatch are normalized by the total ground-truth count;
    mota is one minus their sum; motp is the mean (1 - IoU) over matches.
    """
    if not matchings:
        raise ValueError("need at least one frame")
    gt_total = sum(m.gt_count for m in matchings)
    if gt_total == 0:
        raise ValueError("no ground-truth objects in the sequence")
    misses = sum(m.misses for m in matchings)
    fps = sum(m.false_positives for m in matchings)
    switches = sum(m.switches for m in matchings)
    all_matches = [v for m in matchings for (_, _, v) in m.matches]
    miss = misses / gt_total
    fp = fps / gt_total
    mismatch = switches / gt_total
    return MetricsReport(
        mota=1.0 - miss - fp - mismatch,
        motp=float(np.mean([1.0 - v for v in all_matches])) if all_matches else 0.0,
        miss=miss, mismatch=mismatch, fp=fp,
        matches=len(all_matches), misses=misses, false_positives=fps,
        switches=switches, gt_total=gt_total,
    )


def evaluate_sequence(hyp_frames: Sequence[Sequence[tuple[int, BBox]]],
                      truth_frames: Sequence[Sequence[tuple[str, BBox]]]) -> MetricsReport:
    """Run the per-frame matcher over a whole sequence and accumulate."""
    n = max(len(hyp_frames), len(truth_frames))
    matchings = []
    prev: FrameMatching | None = None
    for k in range(n):
        hyps = hyp_frames[k] if k < len(hyp_frames) else []
        truth = truth_frames[k] if k < len(truth_frames) else []
        prev = match_frame(hyps, truth, prev)
        matchings.append(prev)
    return accumulate(matchings)


def write_report(path: str | Path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")


def csv_header() -> str:
    return "seed,mota,motp,miss,mismatch,fp"


def csv_row(seed: int, report: MetricsReport) -> str:
    return (f"{seed},{report.mota:.6f},{report.motp:.6f},"
            f"{report.miss:.6f},{report.mismatch:.6f},{report.fp:.6f}")
