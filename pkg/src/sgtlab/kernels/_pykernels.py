"""NumPy implementations of the loop kernels (fallback when the extension is absent)."""

from __future__ import annotations

import numpy as np


def paint_boxes(edges: np.ndarray, labels: np.ndarray, size: int, background: int) -> np.ndarray:
    out = np.full((size, size), background, dtype=np.int32)
    centers = (np.arange(size) + 0.5) / size
    for (left, top, right, bottom), label in zip(edges, labels):
        if right <= left or bottom <= top:
            continue
        rows = (centers >= top) & (centers < bottom)
        cols = (centers >= left) & (centers < right)
        out[np.ix_(rows, cols)] = label
    return out


def grid_iou(a: np.ndarray, b: np.ndarray, resolution: int) -> float:
    x0, y0 = min(a[0], b[0]), min(a[1], b[1])
    x1, y1 = max(a[2], b[2]), max(a[3], b[3])
    sx, sy = (x1 - x0) / resolution, (y1 - y0) / resolution
    if sx <= 0.0 or sy <= 0.0:
        return 0.0
    idx = np.arange(resolution) + 0.5
    cx = x0 + idx * sx
    cy = y0 + idx * sy
    in_a = ((cy >= a[1]) & (cy < a[3]))[:, None] & ((cx >= a[0]) & (cx < a[2]))[None, :]
    in_b = ((cy >= b[1]) & (cy < b[3]))[:, None] & ((cx >= b[0]) & (cx < b[2]))[None, :]
    union = int(np.count_nonzero(in_a | in_b))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(in_a & in_b)) / union


def target_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    rows = np.arange(scores.shape[0])
    target_scores = scores[rows, targets]
    # the target itself always satisfies >=, which supplies the leading 1
    return np.count_nonzero(scores >= target_scores[:, None], axis=1).astype(np.int64)


def pairwise_disparities(boxes: np.ndarray, log_quotient: bool) -> tuple[np.ndarray, np.ndarray]:
    n = boxes.shape[0]
    d = np.zeros((n, n, 4), dtype=np.float64)
    d[:, :, 0] = boxes[:, None, 0] - boxes[None, :, 0]
    d[:, :, 1] = boxes[:, None, 1] - boxes[None, :, 1]
    positive = (boxes[:, 2] > 0.0) & (boxes[:, 3] > 0.0)
    valid = positive[:, None] & positive[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.log(np.where(positive, boxes[:, 2], 1.0))
        logh = np.log(np.where(positive, boxes[:, 3], 1.0))
        d[:, :, 2] = np.where(valid, logw[:, None] - logw[None, :], 0.0)
        if log_quotient:
            q = logh[:, None] / logh[None, :]
            finite = np.isfinite(q)
            valid = valid & finite
            d[:, :, 3] = np.where(valid, q, 0.0)
        else:
            d[:, :, 3] = np.where(valid, logh[:, None] - logh[None, :], 0.0)
    return d, valid.astype(np.uint8)
