"""End-to-end inference over precomputed crop features.

The core runner is input-agnostic: it takes per-crop feature grids (however
they were produced), the shared projections, segment masks, and a class
embedding bank, and produces token logits, pixel logits, and raw plus
post-processed label maps with per-stage timings. The bundle runner adapts a
loaded bundle to it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    ProjectionSet,
    QKVGlobal,
    affinity_attention,
    affinity_map,
    global_attention,
    segment_bias,
    stitch_qkv,
    streaming_attention,
)
from .errors import ValidationError
from .seg_head import (
    SegmentBank,
    compute_logits,
    mask_vote_postprocess,
    predict_argmax,
    token_masks_from_pixel,
    upsample_bilinear,
)
from .stitcher import stitch_grids
from .tensor_store import Bundle
from .text_bank import build_bank
from .window_planner import plan_windows

CropList = list[tuple[tuple[int, int], np.ndarray]]


@dataclass
class PipelineConfig:
    tau: float | None = None  # None: sqrt(d)
    lam: float = 1.0
    block: int = 128
    streaming: bool = True
    postprocess: bool = True
    affinity_source: str = "stitch"  # "stitch" | "features"

    def __post_init__(self):
        if self.affinity_source not in ("stitch", "features"):
            raise ValidationError(
                f"affinity_source must be 'stitch' or 'features', "
                f"got '{self.affinity_source}'")
        if self.tau is not None and self.tau <= 0:
            raise ValidationError("tau must be positive")


@dataclass
class PipelineResult:
    raw_labels: np.ndarray  # (H, W) before post-processing
    labels: np.ndarray  # (H, W) final prediction
    logits_tokens: np.ndarray  # (C, hp, wp)
    logits_pixels: np.ndarray  # (C, H, W)
    qkv: QKVGlobal
    attended: np.ndarray  # (N, d)
    final_feats: np.ndarray  # (N, d_v)
    crop_count: int
    token_count: int
    timings_ms: dict[str, float] = field(default_factory=dict)


class _StageClock:
    def __init__(self):
        self.timings: dict[str, float] = {}
        self._t = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.timings[stage] = round((now - self._t) * 1e3, 3)
        self._t = now


def run_core(
    q_crops: CropList,
    value_crops: CropList,
    proj: ProjectionSet,
    pixel_masks: np.ndarray,
    bank: np.ndarray,
    image_h: int,
    image_w: int,
    patch: int,
    config: PipelineConfig | None = None,
    k_crops: CropList | None = None,
    v_crops: CropList | None = None,
    affinity_crops: CropList | None = None,
) -> PipelineResult:
    """Run the full pipeline on in-memory crop inputs."""
    config = config or PipelineConfig()
    hp, wp = image_h // patch, image_w // patch
    clock = _StageClock()

    qkv = stitch_qkv(q_crops, proj, hp, wp, k_feats=k_crops, v_feats=v_crops)
    clock.lap("stitch_qkv")

    if config.streaming:
        attended = streaming_attention(qkv, tau=config.tau, block=config.block)
    else:
        attended = global_attention(qkv, tau=config.tau)
    clock.lap("global_attention")

    if config.affinity_source == "features":
        if affinity_crops is None:
            raise ValidationError(
                "affinity_source 'features' needs affinity source crops")
        sim_input = stitch_grids(affinity_crops, hp, wp).tokens
    else:
        sim_input = attended
    sim, _ = affinity_map(sim_input)
    bias = segment_bias(token_masks_from_pixel(pixel_masks, patch), hp * wp)
    value_global = stitch_grids(value_crops, hp, wp).tokens
    final = affinity_attention(sim, bias, value_global, lam=config.lam)
    clock.lap("affinity_attention")

    d_v = final.shape[1]
    logits_tok = compute_logits(final, np.eye(d_v, dtype=np.float32), bank, hp, wp)
    clock.lap("logits")

    logits_px = upsample_bilinear(logits_tok, image_h, image_w)
    clock.lap("upsample")

    raw = predict_argmax(logits_px)
    clock.lap("argmax")

    if config.postprocess and pixel_masks.shape[0]:
        labels = mask_vote_postprocess(raw, SegmentBank(pixel_masks))
    else:
        labels = raw.copy()
    clock.lap("postprocess")

    return PipelineResult(
        raw_labels=raw, labels=labels,
        logits_tokens=logits_tok, logits_pixels=logits_px,
        qkv=qkv, attended=attended, final_feats=final,
        crop_count=len(q_crops), token_count=hp * wp,
        timings_ms=clock.timings,
    )


def validate_bundle_geometry(
    bundle: Bundle,
    window: int | None = None,
    stride: int | None = None,
) -> None:
    """Check the bundle's crop set equals the planner's output exactly."""
    m = bundle.manifest
    window = window if window is not None else m.window
    stride = stride if stride is not None else m.stride
    plan = plan_windows(m.image_h, m.image_w, window, stride)
    declared = sorted((c.y, c.x) for c in m.crops)
    planned = sorted(plan.offsets)
    if declared != planned:
        raise ValidationError(
            f"bundle crops {declared} do not match the sliding-window plan "
            f"{planned} for window={window}, stride={stride}")


def run_bundle(bundle: Bundle, config: PipelineConfig | None = None) -> PipelineResult:
    """Run the pipeline on a loaded bundle."""
    m = bundle.manifest
    offs = bundle.crop_offsets
    bank = build_bank(bundle.text_per_class, expected_classes=len(m.class_names))
    return run_core(
        q_crops=list(zip(offs, bundle.q_feats)),
        value_crops=list(zip(offs, bundle.value_feats)),
        proj=ProjectionSet.from_stack(bundle.projection),
        pixel_masks=bundle.masks,
        bank=bank,
        image_h=m.image_h, image_w=m.image_w, patch=m.patch,
        config=config,
        k_crops=list(zip(offs, bundle.k_feats)),
        v_crops=list(zip(offs, bundle.v_feats)),
        affinity_crops=list(zip(offs, bundle.affinity_feats)),
    )
