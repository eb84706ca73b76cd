"""Deterministic synthetic scenes and a patch-local encoder.

Every token's feature depends only on its own patch (class prototype plus a
per-token seeded noise draw), so encoding a crop and slicing the full-image
encoding are bit-identical. That makes full-image attention an exact oracle
for the sliding-window path. A second, "leaky" encoder mode adds a small
window-keyed bias to every token of a crop, reproducing the fragmented
features that independent per-crop encoding causes in real backbones (the
bias vanishes for the full-image window).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensor_store import BundleManifest, CropFiles, write_manifest, write_tensor
from .window_planner import CropPlan, plan_windows

_TEXT_TAG = 0x7E57
_PROJ_TAG = 0x9801
_LEAK_TAG = 0x1EAC


@dataclass
class SyntheticScene:
    seed: int
    h: int
    w: int
    patch: int
    num_classes: int
    noise_sigma: float
    label_field: np.ndarray  # (H, W) int64 pixel labels
    token_labels: np.ndarray  # (hp, wp) int64
    prototypes: np.ndarray  # (num_classes, d) unit rows, f32
    regions: list[tuple[int, int, int, int]]  # token rects (y0, x0, y1, x1)

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    @property
    def token_hw(self) -> tuple[int, int]:
        return self.h // self.patch, self.w // self.patch

    def region_masks(self) -> np.ndarray:
        """One binary pixel mask per rectangular region, (R, H, W) u8."""
        masks = np.zeros((len(self.regions), self.h, self.w), dtype=np.uint8)
        p = self.patch
        for i, (y0, x0, y1, x1) in enumerate(self.regions):
            masks[i, y0 * p:y1 * p, x0 * p:x1 * p] = 1
        return masks


def _make_prototypes(
    rng: np.random.Generator, num_classes: int, d: int, similarity: float
) -> np.ndarray:
    """Unit prototypes sharing a common direction so pairwise cosine sits
    near ``similarity`` (always verified <= 0.9 by rejection)."""
    alpha, beta = np.sqrt(similarity), np.sqrt(1.0 - similarity)
    for _ in range(64):
        shared = rng.standard_normal(d)
        shared /= np.linalg.norm(shared)
        protos = []
        for _ in range(num_classes):
            unique = rng.standard_normal(d)
            unique -= (unique @ shared) * shared  # keep the unique part orthogonal
            unique /= np.linalg.norm(unique)
            v = alpha * shared + beta * unique
            protos.append(v / np.linalg.norm(v))
        protos = np.stack(protos)
        gram = protos @ protos.T
        off_diag = gram[~np.eye(num_classes, dtype=bool)]
        if off_diag.size == 0 or off_diag.max() <= 0.9:
            return protos.astype(np.float32)
    raise ValidationError("could not sample separable prototypes (cos <= 0.9)")


def _split_regions(
    rng: np.random.Generator, hp: int, wp: int, min_leaf: int, max_leaf: int
) -> list[tuple[int, int, int, int]]:
    leaves: list[tuple[int, int, int, int]] = []
    stack = [(0, 0, hp, wp)]
    while stack:
        y0, x0, y1, x1 = stack.pop()
        sh, sw = y1 - y0, x1 - x0
        longer = max(sh, sw)
        can_split = longer >= 2 * min_leaf
        must_split = longer > max_leaf
        if can_split and (must_split or rng.random() < 0.5):
            if sh >= sw:
                cut = int(rng.integers(min_leaf, sh - min_leaf + 1))
                stack.append((y0, x0, y0 + cut, x1))
                stack.append((y0 + cut, x0, y1, x1))
            else:
                cut = int(rng.integers(min_leaf, sw - min_leaf + 1))
                stack.append((y0, x0, y1, x0 + cut))
                stack.append((y0, x0 + cut, y1, x1))
        else:
            leaves.append((y0, x0, y1, x1))
    if len(leaves) < 2:  # degenerate tiny grid: force one cut
        y0, x0, y1, x1 = leaves.pop()
        if y1 - y0 >= 2:
            leaves += [(y0, x0, (y0 + y1) // 2, x1), ((y0 + y1) // 2, x0, y1, x1)]
        elif x1 - x0 >= 2:
            leaves += [(y0, x0, y1, (x0 + x1) // 2), (y0, (x0 + x1) // 2, y1, x1)]
        else:
            raise ValidationError("grid too small to split into two regions")
    return leaves


def gen_scene(
    seed: int,
    h: int,
    w: int,
    patch: int,
    num_classes: int,
    noise_sigma: float,
    d: int = 64,
    proto_similarity: float = 0.75,
    min_leaf: int = 2,
    max_leaf: int = 7,
) -> SyntheticScene:
    """Generate a deterministic piecewise-rectangular labeled scene."""
    if h % patch or w % patch:
        raise ValidationError(f"scene dims {h}x{w} must be multiples of patch {patch}")
    if num_classes < 2:
        raise ValidationError("need at least two classes")
    hp, wp = h // patch, w // patch
    rng = np.random.default_rng(seed)
    regions = _split_regions(rng, hp, wp, min_leaf, max_leaf)
    token_labels = np.zeros((hp, wp), dtype=np.int64)
    for y0, x0, y1, x1 in regions:
        token_labels[y0:y1, x0:x1] = int(rng.integers(num_classes))
    label_field = np.repeat(np.repeat(token_labels, patch, axis=0), patch, axis=1)
    prototypes = _make_prototypes(rng, num_classes, d, proto_similarity)
    return SyntheticScene(
        seed=seed, h=h, w=w, patch=patch, num_classes=num_classes,
        noise_sigma=noise_sigma, label_field=label_field,
        token_labels=token_labels, prototypes=prototypes, regions=regions,
    )


def _noise_field(scene: SyntheticScene) -> np.ndarray:
    # Counter-based generator keyed only by the scene seed: the draw for a
    # token is fixed by its global grid position, never by the window being
    # encoded.
    hp, wp = scene.token_hw
    gen = np.random.Generator(np.random.Philox(key=scene.seed))
    return gen.standard_normal((hp, wp, scene.d), dtype=np.float32)


def encode_patch_local(
    scene: SyntheticScene,
    offset: tuple[int, int] = (0, 0),
    hp: int | None = None,
    wp: int | None = None,
) -> np.ndarray:
    """Encode a token window: prototype of the token's class plus seeded
    per-token noise. Strictly patch-local, so slicing commutes with encoding
    bit-exactly."""
    full_hp, full_wp = scene.token_hw
    hp = full_hp if hp is None else hp
    wp = full_wp if wp is None else wp
    oy, ox = offset
    if oy < 0 or ox < 0 or oy + hp > full_hp or ox + wp > full_wp:
        raise ValidationError(f"window ({oy},{ox})+({hp},{wp}) outside token grid")
    feats = scene.prototypes[scene.token_labels].astype(np.float32)
    if scene.noise_sigma:
        feats = feats + np.float32(scene.noise_sigma) * _noise_field(scene)
    return feats[oy:oy + hp, ox:ox + wp].copy()


def encode_leaky(
    scene: SyntheticScene,
    offset: tuple[int, int] = (0, 0),
    hp: int | None = None,
    wp: int | None = None,
    leak: float = 0.25,
) -> np.ndarray:
    """Patch-local encoding plus a window-keyed bias on every token.

    Models per-crop context truncation: every proper sub-window picks up its
    own constant bias direction; the full-image window is bias-free.
    """
    full_hp, full_wp = scene.token_hw
    hp = full_hp if hp is None else hp
    wp = full_wp if wp is None else wp
    feats = encode_patch_local(scene, offset, hp, wp)
    if (offset, hp, wp) == ((0, 0), full_hp, full_wp):
        return feats
    rng = np.random.default_rng((scene.seed, _LEAK_TAG, offset[0], offset[1], hp, wp))
    direction = rng.standard_normal(scene.d)
    direction /= np.linalg.norm(direction)
    return feats + np.float32(leak) * direction.astype(np.float32)


def text_matrices(
    scene: SyntheticScene,
    prompts_per_class: int = 8,
    spread: float = 0.05,
) -> list[np.ndarray]:
    """Per-class prompt embedding matrices: the prototype plus perturbed
    copies, mimicking a template ensemble."""
    rng = np.random.default_rng((scene.seed, _TEXT_TAG))
    mats = []
    for c in range(scene.num_classes):
        proto = scene.prototypes[c]
        rows = [proto]
        for _ in range(prompts_per_class - 1):
            rows.append(proto + spread * rng.standard_normal(scene.d).astype(np.float32))
        mats.append(np.stack(rows).astype(np.float32))
    return mats


def projection_set_stack(scene: SyntheticScene, scale: float = 1.0) -> np.ndarray:
    """Seeded random (3, d+1, d) projection stack for the scene."""
    rng = np.random.default_rng((scene.seed, _PROJ_TAG))
    d = scene.d
    stack = np.zeros((3, d + 1, d), dtype=np.float32)
    for i in range(3):
        stack[i, :-1] = (scale / np.sqrt(d)) * rng.standard_normal((d, d))
        stack[i, -1] = 0.05 * rng.standard_normal(d)
    return stack


def scene_crop_inputs(
    scene: SyntheticScene,
    plan: CropPlan,
    encoder: str = "patch_local",
    leak: float = 0.25,
) -> list[tuple[tuple[int, int], np.ndarray]]:
    """Encode every crop of the plan; returns (token offset, grid) pairs."""
    wtok = plan.window // scene.patch
    out = []
    for toff in plan.token_offsets(scene.patch):
        if encoder == "patch_local":
            grid = encode_patch_local(scene, toff, wtok, wtok)
        elif encoder == "leaky":
            grid = encode_leaky(scene, toff, wtok, wtok, leak=leak)
        else:
            raise ValidationError(f"unknown encoder mode '{encoder}'")
        out.append((toff, grid))
    return out


def _scene_run(
    scene: SyntheticScene,
    crop_feats: list[tuple[tuple[int, int], np.ndarray]],
    config=None,
):
    from .attention import ProjectionSet
    from .pipeline import run_core
    from .text_bank import build_bank

    bank = build_bank(text_matrices(scene), expected_classes=scene.num_classes)
    return run_core(
        q_crops=crop_feats,
        value_crops=crop_feats,
        proj=ProjectionSet.from_stack(projection_set_stack(scene)),
        pixel_masks=scene.region_masks(),
        bank=bank,
        image_h=scene.h, image_w=scene.w, patch=scene.patch,
        config=config,
    )


def oracle_full_pipeline(scene: SyntheticScene, config=None):
    """Reference path: encode the whole image once and attend globally with a
    single-crop plan. Returns (PipelineResult, EvalResult vs the scene)."""
    from .evaluator import accumulate, miou, new_confusion

    result = _scene_run(scene, [((0, 0), encode_patch_local(scene))], config)
    cm = accumulate(new_confusion(scene.num_classes), result.labels, scene.label_field)
    return result, miou(cm)


def windowed_pipeline(
    scene: SyntheticScene,
    window: int,
    stride: int,
    config=None,
    encoder: str = "patch_local",
    leak: float = 0.25,
):
    """Sliding-window path: encode each planned crop, stitch, attend globally."""
    plan = plan_windows(scene.h, scene.w, window, stride)
    crop_feats = scene_crop_inputs(scene, plan, encoder=encoder, leak=leak)
    return _scene_run(scene, crop_feats, config)


def write_scene_bundle(
    scene: SyntheticScene,
    out_dir: str | Path,
    window: int,
    stride: int,
    prompts_per_class: int = 8,
) -> Path:
    """Materialize a complete loadable bundle for the scene."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = plan_windows(scene.h, scene.w, window, stride)
    wtok = window // scene.patch
    crops = []
    for i, toff in enumerate(plan.token_offsets(scene.patch)):
        name = f"feat_{i}.stsr"
        write_tensor(encode_patch_local(scene, toff, wtok, wtok), out_dir / name)
        crops.append(CropFiles(
            y=toff[0] * scene.patch, x=toff[1] * scene.patch,
            q=name, k=name, v=name, value=name, affinity_src=name,
        ))
    write_tensor(projection_set_stack(scene), out_dir / "projection.stsr")
    text_files = []
    for c, mat in enumerate(text_matrices(scene, prompts_per_class)):
        name = f"text_{c}.stsr"
        write_tensor(mat, out_dir / name)
        text_files.append(name)
    write_tensor(scene.region_masks(), out_dir / "masks.stsr")
    write_tensor(scene.label_field.astype(np.uint8), out_dir / "gt.stsr")
    manifest = BundleManifest(
        image_h=scene.h, image_w=scene.w, patch=scene.patch,
        window=window, stride=stride, d=scene.d,
        class_names=[f"class_{c}" for c in range(scene.num_classes)],
        crops=crops, projection_file="projection.stsr",
        text_per_class=text_files, masks_file="masks.stsr", gt_file="gt.stsr",
    )
    write_manifest(manifest, out_dir)
    return out_dir
