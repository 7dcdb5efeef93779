"""Loop-heavy kernels with a compiled backend and a NumPy fallback.

The compiled extension is used when it imports cleanly; set ``SGTLAB_PURE=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

try:
    if os.environ.get("SGTLAB_PURE", "") not in ("", "0"):
        raise ImportError("pure backend forced")
    from . import _ckernels as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

__all__ = ["BACKEND", "paint_boxes", "grid_iou", "target_ranks", "pairwise_disparities"]


def paint_boxes(edges, labels, size: int, background: int) -> np.ndarray:
    """Paint ``[left, top, right, bottom]`` boxes in list order onto a square grid.

    A cell is covered when its center lies in the half-open box. Later boxes
    overwrite earlier ones.
    """
    edges = np.ascontiguousarray(edges, dtype=np.float64).reshape(-1, 4)
    labels = np.ascontiguousarray(labels, dtype=np.int64).reshape(-1)
    return _impl.paint_boxes(edges, labels, int(size), int(background))


def grid_iou(a_edges, b_edges, resolution: int) -> float:
    a = np.ascontiguousarray(a_edges, dtype=np.float64)
    b = np.ascontiguousarray(b_edges, dtype=np.float64)
    return float(_impl.grid_iou(a, b, int(resolution)))


def target_ranks(scores, targets) -> np.ndarray:
    """1-based rank of each target; ties with other labels count against it."""
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    return _impl.target_ranks(scores, targets)


def pairwise_disparities(boxes, log_quotient: bool = False) -> tuple[np.ndarray, np.ndarray]:
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    d, valid = _impl.pairwise_disparities(boxes, bool(log_quotient))
    return d, valid.astype(bool)


def python_backend():
    """The fallback module, for benchmarks and backend cross-checks."""
    return _pykernels


def compiled_backend():
    """The compiled module, or None when the extension is not built."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels
