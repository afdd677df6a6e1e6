"""Frame-by-frame analysis: blink tracking, break-up timing, crop geometry.

Each frame is classified; a 'Closed' frame resets the blink onset, the
first 'Broken' frame fixes the break-up interval (frames since onset,
locked for the rest of the run), and every non-Closed frame is cropped
to the outer ring box, segmented, and mapped back into full-frame
coordinates. The label state machine is strictly sequential; the
per-frame spatial work is independent and may run on a thread pool,
capped by the TEARFLOW_THREADS environment variable, with outputs
identical to a sequential run.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import ops
from .annotations import AnnotationRecord, rasterize_polygons
from .errors import DataError

__all__ = [
    "FrameLabel",
    "RingBoxes",
    "PipelineState",
    "CropTransform",
    "StageBackends",
    "RunResult",
    "advance",
    "step",
    "run_video",
    "crop",
    "map_back",
    "oracle_backends",
    "fixed_box_detector",
    "model_segmenter",
    "oracle_but",
]


class FrameLabel(str, Enum):
    CLEAR = "Clear"
    CLOSED = "Closed"
    BROKEN = "Broken"
    BLUR = "Blur"


SEGMENTED_LABELS = (FrameLabel.CLEAR, FrameLabel.BLUR, FrameLabel.BROKEN)

Box = tuple[float, float, float, float]  # (x, y, w, h)


def _contains(outer: Box, inner: Box) -> bool:
    ox, oy, ow, oh = outer
    ix, iy, iw, ih = inner
    return ix >= ox and iy >= oy and ix + iw <= ox + ow and iy + ih <= oy + oh


@dataclass(frozen=True)
class RingBoxes:
    """Inside/middle/outside ring rectangles in frame pixels."""

    outside: Box
    middle: Box | None = None
    inside: Box | None = None

    def __post_init__(self):
        if self.middle is not None and not _contains(self.outside, self.middle):
            raise ValueError("middle box must lie inside the outside box")
        if self.inside is not None:
            enclosing = self.middle if self.middle is not None else self.outside
            if not _contains(enclosing, self.inside):
                raise ValueError("inside box must lie inside the enclosing ring box")


@dataclass(frozen=True)
class PipelineState:
    """Blink onset and break-up interval; t_but is set at most once."""

    t_onset: int = 1
    t_but: int | None = None
    last_frame: int = 0


def advance(state: PipelineState, t: int, label: FrameLabel):
    """Pure label-transition step: returns (new state, emit-mask flag)."""
    if t <= state.last_frame or t < 1:
        raise ValueError(
            f"frame indices must increase strictly from 1; got {t} after "
            f"{state.last_frame}"
        )
    label = FrameLabel(label)
    t_onset = state.t_onset
    t_but = state.t_but
    if label is FrameLabel.CLOSED:
        t_onset = t
    elif label is FrameLabel.BROKEN and t_but is None:
        t_but = t - t_onset
    emit = label in SEGMENTED_LABELS
    return PipelineState(t_onset=t_onset, t_but=t_but, last_frame=t), emit


def oracle_but(labels) -> int | None:
    """Independent two-pass break-up arithmetic used to cross-check runs.

    Finds the first Broken frame and the last Closed frame before it
    (onset 1 when none), returning their index difference.
    """
    labels = [FrameLabel(l) for l in labels]
    first_broken = None
    for i, l in enumerate(labels, start=1):
        if l is FrameLabel.BROKEN:
            first_broken = i
            break
    if first_broken is None:
        return None
    onset = 1
    for i in range(first_broken - 1, 0, -1):
        if labels[i - 1] is FrameLabel.CLOSED:
            onset = i
            break
    return first_broken - onset


# ---------------------------------------------------------------------------
# crop geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CropTransform:
    """Clamped source box plus the crop size it was resized to."""

    box: tuple[int, int, int, int]  # (x, y, w, h) after clamping, integer pixels
    crop_size: tuple[int, int]  # (h, w)
    frame_size: tuple[int, int]  # (h, w)


def _clamp_box(box: Box, frame_h: int, frame_w: int) -> tuple[int, int, int, int]:
    x, y, w, h = box
    x0 = max(0, int(round(x)))
    y0 = max(0, int(round(y)))
    x1 = min(frame_w, int(round(x + w)))
    y1 = min(frame_h, int(round(y + h)))
    if x1 <= x0 or y1 <= y0:
        raise DataError(f"box {box} is degenerate after clamping to the frame")
    return x0, y0, x1 - x0, y1 - y0


def crop(frame: np.ndarray, box: Box, target_size: int | tuple[int, int] = 512):
    """Clamp, extract and bilinearly resize a frame region.

    `frame` is (c, h, w); returns (crop image, CropTransform).
    """
    if frame.ndim != 3:
        raise ValueError(f"frame must be (c, h, w), got {frame.shape}")
    fh, fw = frame.shape[1], frame.shape[2]
    x0, y0, bw, bh = _clamp_box(box, fh, fw)
    if isinstance(target_size, int):
        target = (target_size, target_size)
    else:
        target = (int(target_size[0]), int(target_size[1]))
    region = frame[:, y0 : y0 + bh, x0 : x0 + bw]
    resized = ops.bilinear_resize(region[None], target[0], target[1])[0]
    return resized, CropTransform(
        box=(x0, y0, bw, bh), crop_size=target, frame_size=(fh, fw)
    )


def _nn_indices(out_size: int, in_size: int) -> np.ndarray:
    idx = np.floor((np.arange(out_size) + 0.5) * in_size / out_size).astype(np.intp)
    return np.minimum(idx, in_size - 1)


def map_back(
    mask: np.ndarray, transform: CropTransform, frame_size: tuple[int, int]
) -> np.ndarray:
    """Nearest-neighbor inverse resize of a crop mask, pasted at the box.

    Pixels outside the box are 0.
    """
    ch, cw = transform.crop_size
    if mask.shape != (ch, cw):
        raise ValueError(
            f"mask shape {mask.shape} does not match crop size {(ch, cw)}"
        )
    fh, fw = frame_size
    x0, y0, bw, bh = transform.box
    rows = _nn_indices(bh, ch)
    cols = _nn_indices(bw, cw)
    out = np.zeros((fh, fw), dtype=np.uint8)
    out[y0 : y0 + bh, x0 : x0 + bw] = mask[np.ix_(rows, cols)]
    return out


# ---------------------------------------------------------------------------
# backends and the run loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageBackends:
    """Pluggable per-frame functions for the three pipeline stages.

    classify(frame, t) -> FrameLabel
    detect(frame, t) -> RingBoxes
    segment(crop_image, t, transform) -> (h, w) uint8 mask in crop space
    """

    classify: object
    detect: object
    segment: object
    crop_target: int = 512


def _segment_frame(frame: np.ndarray, t: int, backends: StageBackends) -> np.ndarray:
    boxes = backends.detect(frame, t)
    crop_img, transform = crop(frame, boxes.outside, backends.crop_target)
    crop_mask = backends.segment(crop_img, t, transform)
    return map_back(crop_mask, transform, transform.frame_size)


def step(state: PipelineState, frame_index: int, label, frame, backends):
    """Advance one frame: update timing state and produce the frame's mask.

    Returns (new state, full-frame mask or None for Closed frames).
    """
    new_state, emit = advance(state, frame_index, label)
    mask = _segment_frame(frame, frame_index, backends) if emit else None
    return new_state, mask


@dataclass(frozen=True)
class RunResult:
    t_but_frames: int | None
    t_but_seconds: float | None
    labels: list
    masks: list


def _thread_cap() -> int | None:
    raw = os.environ.get("TEARFLOW_THREADS", "").strip()
    if not raw:
        return None
    try:
        cap = int(raw)
    except ValueError:
        return None
    return max(1, cap)


def run_video(frames, backends: StageBackends, fps: float, workers: int = 1):
    """Fold the state machine over a frame sequence.

    The classification pass is sequential; per-frame detection and
    segmentation fan out over `workers` threads (capped by
    TEARFLOW_THREADS) with outputs identical to sequential execution.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    if fps <= 0:
        raise ValueError("fps must be positive")

    cap = _thread_cap()
    if cap is not None:
        workers = min(workers, cap)

    state = PipelineState()
    labels = []
    emits = []
    for t, frame in enumerate(frames, start=1):
        label = FrameLabel(backends.classify(frame, t))
        labels.append(label)
        state, emit = advance(state, t, label)
        emits.append(emit)

    jobs = [(t, frame) for t, (frame, emit) in enumerate(zip(frames, emits), start=1) if emit]
    masks: list = [None] * len(frames)
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(
                lambda job: (job[0], _segment_frame(job[1], job[0], backends)), jobs
            )
            for t, mask in results:
                masks[t - 1] = mask
    else:
        for t, frame in jobs:
            masks[t - 1] = _segment_frame(frame, t, backends)

    seconds = None if state.t_but is None else state.t_but / fps
    return RunResult(
        t_but_frames=state.t_but,
        t_but_seconds=seconds,
        labels=labels,
        masks=masks,
    )


# ---------------------------------------------------------------------------
# stock backends
# ---------------------------------------------------------------------------


def oracle_backends(
    records: list[AnnotationRecord],
    crop_target: int = 512,
    segment=None,
) -> StageBackends:
    """Backends that replay annotation records.

    The segmenter rasterizes the frame's polygons and resizes the box
    region into crop space; pass `segment` to swap in a different
    segmenter (e.g. a loaded model) while keeping the annotated labels
    and boxes.
    """
    by_frame = {r.frame: r for r in records}

    def lookup(t: int) -> AnnotationRecord:
        rec = by_frame.get(t)
        if rec is None:
            raise DataError(f"no annotation record for frame {t}")
        return rec

    def classify(frame, t):
        return FrameLabel(lookup(t).label)

    def detect(frame, t):
        rec = lookup(t)
        if "outside" not in rec.boxes:
            raise DataError(f"frame {t} has no outside box annotation")
        return RingBoxes(
            outside=rec.boxes["outside"],
            middle=rec.boxes.get("middle"),
            inside=rec.boxes.get("inside"),
        )

    def replay_segment(crop_img, t, transform: CropTransform):
        rec = lookup(t)
        fh, fw = transform.frame_size
        full = rasterize_polygons(rec.polygons, fh, fw)
        x0, y0, bw, bh = transform.box
        region = full[y0 : y0 + bh, x0 : x0 + bw]
        ch, cw = transform.crop_size
        rows = _nn_indices(ch, bh)
        cols = _nn_indices(cw, bw)
        return region[np.ix_(rows, cols)]

    return StageBackends(
        classify=classify,
        detect=detect,
        segment=segment if segment is not None else replay_segment,
        crop_target=crop_target,
    )


def fixed_box_detector(fraction: float = 0.8):
    """Detector fallback: a centered box covering `fraction` of the frame.

    A convenience for runs without ring detections; it looks at frame
    geometry only, never at content.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")

    def detect(frame, t):
        fh, fw = frame.shape[1], frame.shape[2]
        bw = max(1, round(fw * fraction))
        bh = max(1, round(fh * fraction))
        return RingBoxes(outside=((fw - bw) // 2, (fh - bh) // 2, bw, bh))

    return detect


def model_segmenter(model):
    """Wrap a segmentation model as a crop-space segmenter backend."""
    from .model import predict_mask

    def segment(crop_img, t, transform):
        return predict_mask(model, crop_img[None].astype(np.float32))

    return segment
