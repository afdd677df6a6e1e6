"""Frame annotation records and polygon rasterization.

The annotation file is JSON with one record per frame:

    {"frames": [
        {"frame": 1, "label": "Closed"},
        {"frame": 2, "label": "Clear",
         "boxes": {"inside": [x, y, w, h],
                   "middle": [x, y, w, h],
                   "outside": [x, y, w, h]}},
        {"frame": 3, "label": "Broken",
         "boxes": {"outside": [x, y, w, h]},
         "polygons": [[[x1, y1], [x2, y2], ...], ...]}
    ]}

Labels are exactly Clear/Closed/Broken/Blur; polygon lists are only
legal on Broken frames. Polygons rasterize with an even-odd scanline
fill evaluated at pixel centers, so self-intersecting outlines are
well-defined rather than an error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

__all__ = [
    "LABELS",
    "AnnotationRecord",
    "ingest_annotations",
    "rasterize_polygons",
]

LABELS = ("Clear", "Closed", "Broken", "Blur")


@dataclass(frozen=True)
class AnnotationRecord:
    frame: int
    label: str
    boxes: dict[str, tuple[float, float, float, float]] = field(default_factory=dict)
    polygons: list[list[tuple[float, float]]] = field(default_factory=list)


def _parse_box(name: str, value) -> tuple[float, float, float, float]:
    if (
        not isinstance(value, (list, tuple))
        or len(value) != 4
        or not all(isinstance(v, (int, float)) for v in value)
    ):
        raise DataError(f"box {name!r} must be [x, y, w, h], got {value!r}")
    return tuple(float(v) for v in value)


def _parse_record(raw: dict) -> AnnotationRecord:
    try:
        frame = int(raw["frame"])
        label = raw["label"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"record missing frame/label: {raw!r}") from exc
    if label not in LABELS:
        raise DataError(f"unknown label {label!r} (expected one of {LABELS})")

    boxes = {}
    for name, value in (raw.get("boxes") or {}).items():
        if name not in ("inside", "middle", "outside"):
            raise DataError(f"unknown box kind {name!r}")
        boxes[name] = _parse_box(name, value)

    polygons = []
    for poly in raw.get("polygons") or []:
        if not isinstance(poly, list) or len(poly) < 3:
            raise DataError(f"polygon needs at least 3 vertices: {poly!r}")
        polygons.append([(float(p[0]), float(p[1])) for p in poly])
    if polygons and label != "Broken":
        raise DataError(f"frame {frame}: polygons are only valid on Broken frames")

    return AnnotationRecord(frame=frame, label=label, boxes=boxes, polygons=polygons)


def ingest_annotations(path) -> list[AnnotationRecord]:
    """Load and validate an annotation file; records come back frame-sorted."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read annotation file {path}: {exc}") from exc
    frames = payload.get("frames")
    if not isinstance(frames, list):
        raise DataError("annotation file must contain a 'frames' list")
    records = [_parse_record(r) for r in frames]
    seen = set()
    for r in records:
        if r.frame in seen:
            raise DataError(f"duplicate frame id {r.frame}")
        seen.add(r.frame)
    return sorted(records, key=lambda r: r.frame)


def _fill_scanline(mask_row: np.ndarray, crossings: list[float]) -> None:
    crossings.sort()
    w = mask_row.shape[0]
    for i in range(0, len(crossings) - 1, 2):
        xa, xb = crossings[i], crossings[i + 1]
        # pixel j covered iff xa <= j + 0.5 < xb
        start = max(0, math.ceil(xa - 0.5))
        stop = min(w, math.ceil(xb - 0.5))
        if stop > start:
            mask_row[start:stop] = 1


def rasterize_polygons(polygons, height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill of each polygon, OR-ed into one mask."""
    mask = np.zeros((height, width), dtype=np.uint8)
    for poly in polygons:
        n = len(poly)
        if n < 3:
            continue
        for row in range(height):
            yc = row + 0.5
            crossings = []
            for k in range(n):
                x1, y1 = poly[k]
                x2, y2 = poly[(k + 1) % n]
                if y1 == y2:
                    continue
                if (y1 <= yc < y2) or (y2 <= yc < y1):
                    crossings.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
            _fill_scanline(mask[row], crossings)
    return mask
