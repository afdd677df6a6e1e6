"""Segmentation evaluation: overlap ratios, surface distances, complexity.

Masks are (h, w) uint8 arrays with 0 = background and 1 = the positive
break-up class. Boundaries use 4-connectivity with the image border
counting as background; distances are Euclidean between pixel centers.
Surface metrics pool both directed nearest-distance sets before the
percentile/mean, and are undefined (None) when either boundary set is
empty: reports render that state as "N/A".

When prediction and truth are both empty, overlap ratios report 0 for
the positive class rather than 1 or undefined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "ClassCounts",
    "MetricReport",
    "check_mask",
    "confusion",
    "overlap_metrics",
    "boundary_pixels",
    "hd95",
    "assd",
    "boundary_complexity",
    "evaluate_dataset",
]

NUM_CLASSES = 2


def check_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {mask.shape}")
    if mask.size and mask.max() > 1:
        raise ValueError(f"{name} labels must be 0 or 1")
    return mask.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class ClassCounts:
    """Per-class confusion counts, index 0 = background, 1 = positive."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray


def confusion(pred: np.ndarray, gt: np.ndarray) -> ClassCounts:
    pred = check_mask(pred, "pred")
    gt = check_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = pred.size
    tp = np.zeros(NUM_CLASSES, dtype=np.int64)
    fp = np.zeros(NUM_CLASSES, dtype=np.int64)
    fn = np.zeros(NUM_CLASSES, dtype=np.int64)
    tn = np.zeros(NUM_CLASSES, dtype=np.int64)
    for c in range(NUM_CLASSES):
        p = pred == c
        g = gt == c
        tp[c] = np.count_nonzero(p & g)
        fp[c] = np.count_nonzero(p & ~g)
        fn[c] = np.count_nonzero(~p & g)
        tn[c] = total - tp[c] - fp[c] - fn[c]
    return ClassCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(len(num), dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz].astype(np.float64) / den[nz]
    return out


def overlap_metrics(counts: ClassCounts) -> dict:
    """IoU, DSC, Recall and FPR per class plus their means.

    Empty denominators (e.g. both masks empty for a class) yield 0.
    """
    iou = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    dsc = _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    fpr = _ratio(counts.fp, counts.fp + counts.tn)
    return {
        "iou": iou,
        "dsc": dsc,
        "recall": recall,
        "fpr": fpr,
        "miou": float(iou.mean()),
        "mdsc": float(dsc.mean()),
        "mrecall": float(recall.mean()),
        "mfpr": float(fpr.mean()),
    }


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbor.

    The image border counts as background. Returns an (m, 2) array of
    (row, col) coordinates.
    """
    mask = check_mask(mask)
    fg = mask == 1
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = fg
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(fg & ~interior)


def _directed_distances(src: np.ndarray, dst: np.ndarray, shape) -> np.ndarray:
    """Distance from each src boundary pixel to the nearest dst boundary pixel."""
    occupied = np.ones(shape, dtype=bool)
    occupied[dst[:, 0], dst[:, 1]] = False
    dist = ndimage.distance_transform_edt(occupied)
    return dist[src[:, 0], src[:, 1]]


def _pooled_surface_distances(pred: np.ndarray, gt: np.ndarray):
    pred = check_mask(pred, "pred")
    gt = check_mask(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    bp = boundary_pixels(pred)
    bg = boundary_pixels(gt)
    if len(bp) == 0 or len(bg) == 0:
        return None
    return np.concatenate(
        [
            _directed_distances(bp, bg, pred.shape),
            _directed_distances(bg, bp, pred.shape),
        ]
    )


def hd95(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """95th percentile (linear interpolation) of the pooled surface distances."""
    pooled = _pooled_surface_distances(pred, gt)
    if pooled is None:
        return None
    return float(np.percentile(pooled, 95))


def assd(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """Mean of the pooled symmetric surface distances."""
    pooled = _pooled_surface_distances(pred, gt)
    if pooled is None:
        return None
    return float(pooled.mean())


def boundary_complexity(mask: np.ndarray) -> float | None:
    """Boundary pixel count over foreground area; undefined for empty masks."""
    mask = check_mask(mask)
    area = int((mask == 1).sum())
    if area == 0:
        return None
    return len(boundary_pixels(mask)) / area


@dataclass(frozen=True)
class MetricReport:
    """Dataset-level evaluation summary (image-averaged)."""

    image_count: int
    iou: np.ndarray
    dsc: np.ndarray
    recall: np.ndarray
    fpr: np.ndarray
    miou: float
    mdsc: float
    mrecall: float
    mfpr: float
    hd95: float | None
    assd: float | None
    hd95_undefined: int
    assd_undefined: int

    def to_text(self) -> str:
        def fmt(v):
            return "N/A" if v is None else f"{v:.6f}"

        lines = [f"images {self.image_count}"]
        for c, label in enumerate(("background", "tfbu")):
            lines.append(f"[class {label}]")
            lines.append(f"iou {self.iou[c]:.6f}")
            lines.append(f"dsc {self.dsc[c]:.6f}")
            lines.append(f"recall {self.recall[c]:.6f}")
            lines.append(f"fpr {self.fpr[c]:.6f}")
        lines.append("[mean]")
        lines.append(f"miou {self.miou:.6f}")
        lines.append(f"mdsc {self.mdsc:.6f}")
        lines.append(f"mrecall {self.mrecall:.6f}")
        lines.append(f"mfpr {self.mfpr:.6f}")
        lines.append("[surface]")
        lines.append(f"hd95 {fmt(self.hd95)}")
        lines.append(f"assd {fmt(self.assd)}")
        lines.append(f"hd95_undefined {self.hd95_undefined}")
        lines.append(f"assd_undefined {self.assd_undefined}")
        return "\n".join(lines) + "\n"


def evaluate_dataset(pairs) -> MetricReport:
    """Average per-image metrics; undefined distances are excluded and counted."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one (pred, gt) pair")

    overlaps = []
    hd_values = []
    as_values = []
    hd_undef = 0
    as_undef = 0
    for pred, gt in pairs:
        overlaps.append(overlap_metrics(confusion(pred, gt)))
        h = hd95(pred, gt)
        if h is None:
            hd_undef += 1
        else:
            hd_values.append(h)
        a = assd(pred, gt)
        if a is None:
            as_undef += 1
        else:
            as_values.append(a)

    def stack(key):
        return np.mean([o[key] for o in overlaps], axis=0)

    iou = stack("iou")
    dsc = stack("dsc")
    recall = stack("recall")
    fpr = stack("fpr")
    return MetricReport(
        image_count=len(pairs),
        iou=iou,
        dsc=dsc,
        recall=recall,
        fpr=fpr,
        miou=float(iou.mean()),
        mdsc=float(dsc.mean()),
        mrecall=float(recall.mean()),
        mfpr=float(fpr.mean()),
        hd95=float(np.mean(hd_values)) if hd_values else None,
        assd=float(np.mean(as_values)) if as_values else None,
        hd95_undefined=hd_undef,
        assd_undefined=as_undef,
    )
