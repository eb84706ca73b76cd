"""Command-line front end: run a bundle, evaluate predictions, generate
synthetic bundles, benchmark the attention kernels, inspect bundles.

Exit codes: 0 success, 2 validation error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .attention import QKVGlobal, global_attention, streaming_attention
from .errors import NumericalError, ValidationError
from .evaluator import accumulate, eval_to_csv, miou, new_confusion
from .pipeline import PipelineConfig, run_bundle, validate_bundle_geometry
from .seg_head import read_label_pgm, write_label_pgm
from .synth import gen_scene, write_scene_bundle
from .tensor_store import load_bundle, read_tensor, write_tensor
from .window_planner import plan_windows

REPORT_SCHEMA_VERSION = 1


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float, default=None,
                   help="attention temperature (default: sqrt(d))")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="affinity sharpening factor")
    p.add_argument("--block", type=int, default=128,
                   help="streaming attention tile size")
    p.add_argument("--no-streaming", action="store_true",
                   help="use the naive attention path")
    p.add_argument("--affinity-source", choices=("stitch", "features"),
                   default="stitch",
                   help="build the affinity map from stitched-attention output "
                        "or directly from the bundle's affinity source features")


def cmd_run(args) -> int:
    bundle = load_bundle(args.bundle)
    for w in bundle.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.shorter_side is not None:
        short = min(bundle.manifest.image_h, bundle.manifest.image_w)
        if short != args.shorter_side:
            raise ValidationError(
                f"--shorter-side {args.shorter_side} does not match bundle "
                f"shorter side {short}")
    validate_bundle_geometry(bundle, window=args.window, stride=args.stride)
    config = PipelineConfig(
        tau=args.tau, lam=args.lam, block=args.block,
        streaming=not args.no_streaming,
        postprocess=not args.no_postprocess,
        affinity_source=args.affinity_source,
    )
    t0 = time.perf_counter()
    result = run_bundle(bundle, config)
    total_ms = round((time.perf_counter() - t0) * 1e3, 3)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = bundle.manifest.class_names
    write_label_pgm(result.labels, out / "pred.pgm", names)
    write_label_pgm(result.raw_labels, out / "pred_raw.pgm", names)
    if args.save_logits:
        write_tensor(result.logits_pixels, out / "logits.stsr")
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "engine_version": __version__,
        "bundle": str(args.bundle),
        "image": {"h": bundle.manifest.image_h, "w": bundle.manifest.image_w,
                  "patch": bundle.manifest.patch},
        "crop_count": result.crop_count,
        "token_count": result.token_count,
        "num_classes": len(names),
        "config": {
            "tau": config.tau, "lambda": config.lam, "block": config.block,
            "streaming": config.streaming, "postprocess": config.postprocess,
            "affinity_source": config.affinity_source,
        },
        "timings_ms": {**result.timings_ms, "total": total_ms},
        "outputs": {
            "pred": "pred.pgm", "pred_raw": "pred_raw.pgm",
            "logits": "logits.stsr" if args.save_logits else None,
        },
    }
    (out / "run_report.json").write_text(json.dumps(report, indent=2) + "\n",
                                         encoding="utf-8")
    print(json.dumps({"crop_count": result.crop_count,
                      "token_count": result.token_count,
                      "out": str(out)}))
    return 0


def cmd_eval(args) -> int:
    pred_path = Path(args.pred)
    if pred_path.is_dir():
        pred_path = pred_path / "pred.pgm"
    pred = read_label_pgm(pred_path)
    gt = read_tensor(args.gt).astype(np.int64)
    if gt.ndim != 2 or gt.shape != pred.shape:
        raise ValidationError(
            f"prediction {pred.shape} and ground truth {gt.shape} differ")
    names = None
    legend = pred_path.with_suffix(".json")
    if legend.is_file():
        classes = json.loads(legend.read_text(encoding="utf-8")).get("classes", {})
        if classes:
            names = [classes[str(i)] for i in range(len(classes))]
    num_classes = len(names) if names else int(max(pred.max(), gt[gt != 255].max())) + 1
    cm = accumulate(new_confusion(num_classes), pred, gt)
    result = miou(cm)
    text = (eval_to_csv(result, names) if args.csv
            else json.dumps(result.to_json(names), indent=2) + "\n")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_synth(args) -> int:
    scene = gen_scene(
        seed=args.seed, h=args.size, w=args.size, patch=args.patch,
        num_classes=args.classes, noise_sigma=args.sigma, d=args.dim,
    )
    out = write_scene_bundle(scene, args.out, window=args.window,
                             stride=args.stride,
                             prompts_per_class=args.prompts_per_class)
    print(json.dumps({"out": str(out), "regions": len(scene.regions),
                      "tokens": scene.token_hw[0] * scene.token_hw[1]}))
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    rng = np.random.default_rng(args.seed)
    rows = []
    for size in sizes:
        if size % args.patch:
            raise ValidationError(f"size {size} not a multiple of patch {args.patch}")
        n = (size // args.patch) ** 2
        d = args.dim
        qkv = QKVGlobal(
            q=rng.standard_normal((n, d)).astype(np.float32),
            k=rng.standard_normal((n, d)).astype(np.float32),
            v=rng.standard_normal((n, d)).astype(np.float32),
        )
        naive_ms, stream_ms = [], []
        stats = None
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            ref = global_attention(qkv)
            naive_ms.append((time.perf_counter() - t0) * 1e3)
            t0 = time.perf_counter()
            out, stats = streaming_attention(qkv, block=args.block, return_stats=True)
            stream_ms.append((time.perf_counter() - t0) * 1e3)
        max_abs = float(np.abs(ref - out).max())
        if not np.isfinite(max_abs) or max_abs > 1e-4:
            raise NumericalError(
                f"streaming/naive divergence {max_abs} at size {size}")
        naive_bytes = stats.naive_score_buffer_bytes
        if n > args.block and not stats.peak_score_buffer_bytes < naive_bytes:
            raise NumericalError(
                f"streaming score buffer {stats.peak_score_buffer_bytes} not "
                f"below naive {naive_bytes} at N={n}")
        rows.append({
            "size": size, "tokens": n,
            "naive_ms_median": round(float(np.median(naive_ms)), 3),
            "streaming_ms_median": round(float(np.median(stream_ms)), 3),
            "naive_score_bytes": naive_bytes,
            "streaming_score_bytes": stats.peak_score_buffer_bytes,
            "score_bytes_ratio": stats.peak_score_buffer_bytes / naive_bytes,
            "max_abs_diff": max_abs,
        })
    report = {"schema_version": REPORT_SCHEMA_VERSION, "block": args.block,
              "dim": args.dim, "repeats": args.repeats, "rows": rows}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_inspect(args) -> int:
    bundle = load_bundle(args.bundle)
    m = bundle.manifest
    plan = plan_windows(m.image_h, m.image_w, m.window, m.stride)
    info = {
        "image": {"h": m.image_h, "w": m.image_w, "patch": m.patch},
        "window": m.window, "stride": m.stride, "d": m.d,
        "classes": m.class_names,
        "crop_count": len(m.crops),
        "crop_offsets": [[c.y, c.x] for c in m.crops],
        "planned_offsets": [list(o) for o in plan.offsets],
        "plan_matches": sorted((c.y, c.x) for c in m.crops) == sorted(plan.offsets),
        "tokens_per_crop": bundle.crop_tokens,
        "token_count": bundle.token_hw[0] * bundle.token_hw[1],
        "num_masks": int(bundle.masks.shape[0]),
        "has_gt": bundle.gt is not None,
        "d_text": int(bundle.text_per_class[0].shape[1]),
        "prompts_per_class": [int(t.shape[0]) for t in bundle.text_per_class],
        "warnings": bundle.warnings,
        "valid": True,
    }
    print(json.dumps(info, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stitchseg",
        description="Training-free sliding-window segmentation engine "
                    "with cross-crop stitched attention",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the pipeline on a bundle")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_pipeline_flags(p)
    p.add_argument("--no-postprocess", action="store_true",
                   help="skip segment-majority post-processing")
    p.add_argument("--save-logits", action="store_true",
                   help="also write pixel logits as logits.stsr")
    p.add_argument("--shorter-side", type=int, default=None,
                   help="validate the bundle's shorter side against this value")
    p.add_argument("--window", type=int, default=None,
                   help="validate crops against this window size")
    p.add_argument("--stride", type=int, default=None,
                   help="validate crops against this stride")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a prediction against ground truth")
    p.add_argument("--pred", required=True,
                   help="prediction .pgm file or a run output directory")
    p.add_argument("--gt", required=True, help="ground-truth label .stsr file")
    p.add_argument("--csv", action="store_true", help="emit CSV instead of JSON")
    p.add_argument("--out", default=None, help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic bundle")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, required=True,
                   help="square image side in pixels")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--sigma", type=float, default=0.0, help="feature noise level")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--window", type=int, default=336)
    p.add_argument("--stride", type=int, default=112)
    p.add_argument("--dim", type=int, default=64, help="feature channels")
    p.add_argument("--prompts-per-class", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="benchmark naive vs streaming attention")
    p.add_argument("--sizes", default="336,448,560,672",
                   help="comma-separated square input sizes")
    p.add_argument("--block", type=int, default=128)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="validate a bundle and print a summary")
    p.add_argument("--bundle", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
