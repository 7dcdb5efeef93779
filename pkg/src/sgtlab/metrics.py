"""Evaluation kernels: rank metrics, IoU / mIoU, and a grid-count IoU oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import Layout, center_to_edges
from .kernels import grid_iou, target_ranks


@dataclass(frozen=True)
class RankReport:
    ravg: float
    hits: dict[int, float]
    count: int
    ranks: np.ndarray = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {"ravg": self.ravg, "hits": {str(k): v for k, v in self.hits.items()}, "count": self.count}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def rank_metrics(
    scores, targets, exclude: Iterable[int] = (), ks: Sequence[int] = (1, 5), candidates: Iterable[int] | None = None
) -> RankReport:
    """rAVG and Hits@k over score rows, skipping rows whose target is excluded.

    Rank is 1 plus the number of other labels scoring at least as high as the
    target, so ties count against the prediction. ``candidates`` restricts the
    labels that compete (default: every column); rows whose target is not a
    candidate are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    scores = scores.reshape(len(targets), -1)
    num_labels = scores.shape[1]
    keep = ~np.isin(targets, list(exclude))
    if candidates is not None:
        cols = np.array(sorted(set(int(c) for c in candidates)), dtype=np.int64)
        if len(cols) == 0 or cols.min() < 0 or cols.max() >= num_labels:
            raise ValueError("candidate label out of range")
        keep &= np.isin(targets, cols)
        remap = np.full(num_labels, -1, dtype=np.int64)
        remap[cols] = np.arange(len(cols))
        scores, targets = scores[:, cols], remap[np.clip(targets, 0, num_labels - 1)]
        num_labels = len(cols)
    if not keep.any():
        raise ValueError("empty effective set: every target is excluded")
    if targets[keep].min() < 0 or targets[keep].max() >= num_labels:
        raise ValueError("target label out of range")
    ranks = target_ranks(scores[keep], targets[keep])
    hits = {int(k): float(np.mean(ranks <= k)) for k in ks}
    return RankReport(float(ranks.mean()), hits, int(len(ranks)), ranks)


def box_iou(a, b) -> np.ndarray:
    """Analytic IoU of center-format boxes (broadcasting over leading axes)."""
    ea, eb = center_to_edges(a), center_to_edges(b)
    iw = np.clip(np.minimum(ea[..., 2], eb[..., 2]) - np.maximum(ea[..., 0], eb[..., 0]), 0, None)
    ih = np.clip(np.minimum(ea[..., 3], eb[..., 3]) - np.maximum(ea[..., 1], eb[..., 1]), 0, None)
    inter = iw * ih
    union = (ea[..., 2] - ea[..., 0]) * (ea[..., 3] - ea[..., 1]) + (eb[..., 2] - eb[..., 0]) * (eb[..., 3] - eb[..., 1]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou_grid_oracle(box_a, box_b, resolution: int = 1024) -> float:
    """IoU by counting grid cells over the two boxes' enclosing rectangle."""
    if resolution < 64:
        raise ValueError("resolution must be at least 64")
    return grid_iou(center_to_edges(np.asarray(box_a)), center_to_edges(np.asarray(box_b)), resolution)


@dataclass(frozen=True)
class MIoUReport:
    novel: float | None
    existing: float | None
    total: float | None
    n_novel: int
    n_existing: int

    def __iter__(self):
        return iter((self.novel, self.existing, self.total))

    def to_dict(self) -> dict:
        return {
            "miou_novel": self.novel,
            "miou_existing": self.existing,
            "miou_total": self.total,
            "n_novel": self.n_novel,
            "n_existing": self.n_existing,
        }


def miou_report(pred: Layout | np.ndarray, gt: Layout | np.ndarray, novel_flags, include=None) -> MIoUReport:
    """Per-group mean IoU; the total is the count-weighted mean of the groups.

    An empty group reports ``None`` and drops out of the total. ``include``
    selects which objects count (e.g. to skip the IMAGE node).
    """
    pb = pred.boxes if isinstance(pred, Layout) else np.asarray(pred, dtype=np.float64)
    gb = gt.boxes if isinstance(gt, Layout) else np.asarray(gt, dtype=np.float64)
    novel = np.asarray(novel_flags, dtype=bool)
    if not (len(pb) == len(gb) == len(novel)):
        raise ValueError("layout length mismatch")
    inc = np.ones(len(novel), dtype=bool) if include is None else np.asarray(include, dtype=bool)
    ious = box_iou(pb, gb)
    groups = {}
    for name, sel in (("novel", novel & inc), ("existing", ~novel & inc)):
        n = int(sel.sum())
        groups[name] = (float(ious[sel].mean()) if n else None, n)
    (mn, nn), (me, ne) = groups["novel"], groups["existing"]
    total = None
    if nn + ne:
        total = ((mn or 0.0) * nn + (me or 0.0) * ne) / (nn + ne)
    return MIoUReport(mn, me, total, nn, ne)


def format_rank_table(reports: dict[str, RankReport]) -> str:
    ks = sorted({k for r in reports.values() for k in r.hits})
    head = f"{'':10s} {'rAVG':>8s} " + " ".join(f"{'Hit@' + str(k):>8s}" for k in ks) + f" {'count':>7s}"
    lines = [head]
    for name, rep in reports.items():
        cells = " ".join(f"{100 * rep.hits[k]:8.1f}" if k in rep.hits else f"{'-':>8s}" for k in ks)
        lines.append(f"{name:10s} {rep.ravg:8.3f} {cells} {rep.count:7d}")
    return "\n".join(lines)


def format_miou(rep: MIoUReport) -> str:
    def pct(x):
        return "undefined" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{100 * x:.1f}"

    return f"mIoU novel/existing/total: {pct(rep.novel)} / {pct(rep.existing)} / {pct(rep.total)}"
