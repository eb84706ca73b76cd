"""Training-free sliding-window segmentation engine with cross-crop
stitched attention.

The package operates on precomputed feature bundles: per-crop token grids
are projected to Q/K/V, scatter-meaned into one global token field, and
attended in a single softmax pass; the attended features drive a
segment-biased cosine-affinity attention over stitched value features,
which are scored against aggregated class text embeddings.
"""

__version__ = "0.1.0"

from .attention import (
    NEG_LARGE,
    AttentionStats,
    ProjectionSet,
    QKVGlobal,
    affinity_attention,
    affinity_map,
    crop_local_attention,
    default_tau,
    forward_stitch,
    global_attention,
    segment_bias,
    stitch_qkv,
    streaming_attention,
)
from .errors import NumericalError, StitchSegError, TensorFormatError, ValidationError
from .evaluator import EvalResult, accumulate, merge, miou, new_confusion
from .pipeline import PipelineConfig, PipelineResult, run_bundle, run_core
from .seg_head import (
    IGNORE_LABEL,
    SegmentBank,
    compute_logits,
    mask_vote_postprocess,
    predict_argmax,
    read_label_pgm,
    token_masks_from_pixel,
    upsample_bilinear,
    write_label_pgm,
)
from .stitcher import GlobalGrid, crop_slice, stitch_grids, stitch_logits
from .synth import (
    SyntheticScene,
    encode_leaky,
    encode_patch_local,
    gen_scene,
    oracle_full_pipeline,
    windowed_pipeline,
    write_scene_bundle,
)
from .tensor_store import (
    Bundle,
    BundleManifest,
    Dtype,
    load_bundle,
    read_tensor,
    write_tensor,
)
from .text_bank import (
    aggregate_class_embedding,
    build_bank,
    build_prompt_set,
    imagenet_templates,
    read_biased_prompts,
)
from .window_planner import CropPlan, ResizeSpec, plan_windows, resize_dims
