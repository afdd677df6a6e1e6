"""Command-line surface: fuse, infer, eval, pipeline, train-toy, bench.

Exit codes: 0 success, 1 usage error, 2 data error (files, formats),
3 numeric error (non-finite values).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import container as containerio
from . import imageio
from .annotations import ingest_annotations
from .errors import DataError, NumericError
from .metrics import evaluate_dataset
from .model import (
    build,
    forward,
    fuse_model,
    param_count,
    predict_mask,
    variant_config,
)
from .ops import bilinear_resize
from .pipeline import (
    CropTransform,
    StageBackends,
    fixed_box_detector,
    map_back,
    model_segmenter,
    oracle_backends,
    oracle_but,
    run_video,
)
from .train import OptimState, run_toy_overfit

FRAME_EXTENSIONS = (".ppm", ".pgm", ".png")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must be a JSON object")
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fuse(args) -> int:
    model = containerio.load_model(args.weights)
    before = param_count(model)
    fused = fuse_model(model)
    after = param_count(fused)
    containerio.write_weights(fused, args.out)
    print(f"params train={before} fused={after}")
    print(f"wrote {args.out}")
    return 0


def _nn_mask_resize(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    transform = CropTransform(
        box=(0, 0, out_w, out_h),
        crop_size=mask.shape,
        frame_size=(out_h, out_w),
    )
    return map_back(mask, transform, (out_h, out_w))


def cmd_infer(args) -> int:
    model = containerio.load_model(args.weights)
    if args.fused and model.mode != "fused":
        model = fuse_model(model)
    image = imageio.read_image(args.image)
    h, w = image.shape[1], image.shape[2]
    size = args.size or model.config.input_size
    resized = bilinear_resize(image[None], size, size)
    mask = predict_mask(model, resized.astype(np.float32))
    full = _nn_mask_resize(mask, h, w)
    imageio.write_mask(args.out, full)
    print(f"wrote {args.out} ({int(full.sum())} positive pixels)")
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred_dir)
    gt_dir = Path(args.gt_dir)
    names = sorted(
        p.name for p in pred_dir.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS
    )
    if not names:
        raise DataError(f"no mask files in {pred_dir}")
    pairs = []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise DataError(f"missing ground-truth mask {gt_path}")
        pairs.append((imageio.read_mask(pred_dir / name), imageio.read_mask(gt_path)))
    report = evaluate_dataset(pairs)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    print(text, end="")
    return 0


def _parse_backend_arg(value: str, allowed: tuple[str, ...], flag: str):
    kind, _, arg = value.partition(":")
    if kind not in allowed or not arg:
        raise DataError(
            f"{flag} must be one of {', '.join(a + ':<arg>' for a in allowed)}"
        )
    return kind, arg


def _build_backends(args):
    cls_kind, cls_arg = _parse_backend_arg(args.cls, ("oracle", "model"), "--cls")
    if cls_kind == "model":
        raise DataError(
            "--cls model:<path> is not supported: no classifier network ships "
            "with this engine; use --cls oracle:<file>"
        )
    records = ingest_annotations(cls_arg)
    backends = oracle_backends(records, crop_target=args.size)

    det_kind, det_arg = _parse_backend_arg(args.det, ("oracle", "fixed"), "--det")
    if det_kind == "fixed":
        try:
            fraction = float(det_arg)
        except ValueError:
            raise DataError(f"--det fixed:<fraction>: bad fraction {det_arg!r}") from None
        detect = fixed_box_detector(fraction)
    else:
        detect = oracle_backends(
            ingest_annotations(det_arg), crop_target=args.size
        ).detect

    seg_kind, seg_arg = _parse_backend_arg(args.seg, ("model", "oracle"), "--seg")
    if seg_kind == "model":
        segment = model_segmenter(containerio.load_model(seg_arg))
    else:
        segment = oracle_backends(
            ingest_annotations(seg_arg), crop_target=args.size
        ).segment

    return StageBackends(
        classify=backends.classify,
        detect=detect,
        segment=segment,
        crop_target=args.size,
    )


def _merge_run_config(args) -> None:
    """Fill unset pipeline flags from --config; flags win over the file."""
    cfg = _load_config_file(args.config)
    for key in ("frames", "fps", "cls", "det", "seg", "out", "size", "workers"):
        if getattr(args, key) is None and key in cfg:
            setattr(args, key, cfg[key])
    if args.size is None:
        args.size = 512
    if args.workers is None:
        args.workers = 1
    missing = [
        k for k in ("frames", "fps", "cls", "det", "seg", "out")
        if getattr(args, k) is None
    ]
    if missing:
        flags = ", ".join("--" + m for m in missing)
        print(f"pipeline: missing {flags} (set via flags or --config)", file=sys.stderr)
        raise SystemExit(1)
    args.fps = float(args.fps)
    args.size = int(args.size)
    args.workers = int(args.workers)


def cmd_pipeline(args) -> int:
    _merge_run_config(args)
    frame_dir = Path(args.frames)
    frame_paths = sorted(
        p for p in frame_dir.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS
    )
    if not frame_paths:
        raise DataError(f"no frames in {frame_dir}")
    frames = [imageio.read_image(p) for p in frame_paths]

    backends = _build_backends(args)
    result = run_video(frames, backends, fps=args.fps, workers=args.workers)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_files = {}
    for i, mask in enumerate(result.masks, start=1):
        if mask is None:
            continue
        name = f"mask_{i:06d}.pgm"
        imageio.write_mask(out_dir / name, mask)
        mask_files[str(i)] = name

    labels = [l.value for l in result.labels]
    scan_but = oracle_but(labels)
    report = {
        "t_but_frames": result.t_but_frames,
        "t_but_seconds": result.t_but_seconds,
        "t_but_two_pass_check": scan_but,
        "fps": args.fps,
        "labels": labels,
        "masks": mask_files,
    }
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")

    if result.t_but_frames is None:
        print("t_BUT: not observed")
    else:
        print(f"t_BUT: {result.t_but_frames} frames = {result.t_but_seconds:.3f} s")
    print(f"wrote {out_dir}/report.json and {len(mask_files)} masks")
    return 0


def cmd_train_toy(args) -> int:
    cfg = _load_config_file(args.config)
    steps = args.steps if args.steps is not None else int(cfg.get("steps", 200))
    size = args.size or int(cfg.get("size", 64))
    model_seed = args.seed if args.seed is not None else int(cfg.get("seed", 1))
    sample_seed = int(cfg.get("sample_seed", 1))

    state = OptimState(
        lr=float(cfg.get("lr", 1e-2)),
        momentum=float(cfg.get("momentum", 0.937)),
        weight_decay=float(cfg.get("weight_decay", 5e-4)),
    )
    model, history, iou = run_toy_overfit(
        steps=steps,
        model_seed=model_seed,
        sample_seed=sample_seed,
        size=size,
        state=state,
    )
    print(f"steps={len(history)} loss_first={history[0]:.5f} loss_last={history[-1]:.5f}")
    print(f"tfbu_iou={iou:.4f}")
    if args.out:
        containerio.write_weights(model, args.out)
        print(f"wrote {args.out}")
    return 0


def _time_forward(model, x, iters: int) -> float:
    forward(model, x)  # warmup
    best = float("inf")
    for _ in range(iters):
        t0 = time.perf_counter()
        forward(model, x)
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    config = variant_config(args.variant, num_branches=args.k, input_size=args.size)
    model = build(config, seed=args.seed or 0)
    fused = fuse_model(model)
    rng = np.random.default_rng(args.seed or 0)
    x = rng.uniform(-1, 1, (1, 3, args.size, args.size)).astype(np.float32)

    t_train = _time_forward(model, x, args.iters)
    t_fused = _time_forward(fused, x, args.iters)
    ratio = t_train / t_fused
    print(f"variant={args.variant} k={args.k} size={args.size}")
    print(f"params train={param_count(model)} fused={param_count(fused)}")
    print(f"train_forward_s={t_train:.4f} fused_forward_s={t_fused:.4f}")
    print(f"speedup_ratio={ratio:.3f}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def make_parser() -> _Parser:
    parser = _Parser(prog="tearflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="rewrite a train-form container as fused")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("infer", help="segment a single image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--fused", action="store_true", help="fuse before running")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="compare predicted masks against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="run the full video analysis")
    p.add_argument("--frames", default=None)
    p.add_argument("--fps", type=float, default=None)
    p.add_argument("--cls", default=None, help="oracle:<file> | model:<path>")
    p.add_argument("--det", default=None, help="oracle:<file> | fixed:<fraction>")
    p.add_argument("--seg", default=None, help="model:<path> | oracle:<file>")
    p.add_argument("--out", default=None)
    p.add_argument("--size", type=int, default=None, help="crop size fed to the segmenter")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with run settings")
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("train-toy", help="overfit the micro model on a synthetic sample")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with run settings")
    p.add_argument("--out", default=None, help="write trained weights here")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("bench", help="train-form vs fused forward throughput")
    p.add_argument("--variant", default="mini0")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
