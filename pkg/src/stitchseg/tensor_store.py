"""Minimal binary tensor container (.stsr) and the bundle directory format.

A .stsr file is: magic ``STSR``, version u16, dtype u8, ndim u8, then ndim
extents as u64, then the raw row-major payload. Everything is little-endian,
so files written on any platform load identically. Payload dtypes are f32,
u8 and i32 only.

A *bundle* is a directory holding ``manifest.json`` plus the .stsr files it
references: per-crop feature grids, a projection stack, per-class prompt
embeddings, segment masks, and an optional ground-truth label map.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TensorFormatError, ValidationError

MAGIC = b"STSR"
VERSION = 1
MAX_NDIM = 4


class Dtype(enum.IntEnum):
    f32 = 0
    u8 = 1
    i32 = 2


_NP_DTYPES = {
    Dtype.f32: np.dtype("<f4"),
    Dtype.u8: np.dtype("u1"),
    Dtype.i32: np.dtype("<i4"),
}
_DTYPE_OF_KIND = {"f": Dtype.f32, "u": Dtype.u8, "i": Dtype.i32}


def _dtype_for_array(arr: np.ndarray) -> Dtype:
    code = _DTYPE_OF_KIND.get(arr.dtype.kind)
    if code is None or arr.dtype.itemsize != _NP_DTYPES[code].itemsize:
        raise TensorFormatError(
            f"unsupported array dtype {arr.dtype}; use f32, u8 or i32"
        )
    return code


def _check_dims(dims: tuple[int, ...]) -> None:
    if not 1 <= len(dims) <= MAX_NDIM:
        raise TensorFormatError(f"dims must have 1-{MAX_NDIM} entries, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"all dims must be >= 1, got {dims}")


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    """Write ``arr`` to ``path`` in the .stsr container format."""
    arr = np.ascontiguousarray(arr)
    code = _dtype_for_array(arr)
    _check_dims(arr.shape)
    header = MAGIC + struct.pack("<HBB", VERSION, int(code), arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype(_NP_DTYPES[code], copy=False).tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(dims)
            fh.write(payload)
    except OSError as exc:
        raise TensorFormatError(f"cannot write tensor file {path}: {exc}") from exc


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a .stsr file back into a numpy array (bit-exact round trip)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise TensorFormatError(f"cannot read tensor file {path}: {exc}") from exc

    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: not a tensor file")
    version, dtype_code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    try:
        code = Dtype(dtype_code)
    except ValueError:
        raise TensorFormatError(f"{path}: unknown dtype code {dtype_code}") from None
    if not 1 <= ndim <= MAX_NDIM:
        raise TensorFormatError(f"{path}: ndim {ndim} outside 1-{MAX_NDIM}")
    dims_end = 8 + 8 * ndim
    if len(blob) < dims_end:
        raise TensorFormatError(f"{path}: truncated payload")
    dims = struct.unpack(f"<{ndim}Q", blob[8:dims_end])
    _check_dims(dims)
    np_dtype = _NP_DTYPES[code]
    expected = int(np.prod(dims)) * np_dtype.itemsize
    if len(blob) - dims_end != expected:
        raise TensorFormatError(
            f"{path}: truncated payload ({len(blob) - dims_end} bytes, "
            f"expected {expected})"
        )
    return np.frombuffer(blob[dims_end:], dtype=np_dtype).reshape(dims).copy()


# ---------------------------------------------------------------------------
# Bundle manifest
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"


@dataclass
class CropFiles:
    y: int
    x: int
    q: str
    k: str
    v: str
    value: str
    affinity_src: str


@dataclass
class BundleManifest:
    image_h: int
    image_w: int
    patch: int
    window: int
    stride: int
    d: int
    class_names: list[str]
    crops: list[CropFiles]
    projection_file: str
    text_per_class: list[str]
    masks_file: str | None
    gt_file: str | None = None

    def to_json(self) -> dict:
        return {
            "image_h": self.image_h,
            "image_w": self.image_w,
            "patch": self.patch,
            "window": self.window,
            "stride": self.stride,
            "d": self.d,
            "class_names": list(self.class_names),
            "crops": [
                {
                    "y": c.y,
                    "x": c.x,
                    "files": {
                        "q": c.q,
                        "k": c.k,
                        "v": c.v,
                        "value": c.value,
                        "affinity_src": c.affinity_src,
                    },
                }
                for c in self.crops
            ],
            "projection_file": self.projection_file,
            "text": {"per_class": list(self.text_per_class)},
            "masks_file": self.masks_file,
            "gt_file": self.gt_file,
        }


@dataclass
class Bundle:
    """A fully loaded, validated bundle."""

    manifest: BundleManifest
    # per-crop token offsets (y, x) in tokens, row-major crop order
    crop_offsets: list[tuple[int, int]]
    # per-crop grids, each (hp_c, wp_c, channels) f32
    q_feats: list[np.ndarray]
    k_feats: list[np.ndarray]
    v_feats: list[np.ndarray]
    value_feats: list[np.ndarray]
    affinity_feats: list[np.ndarray]
    projection: np.ndarray  # (3, d + 1, d): weight rows then bias row, order Q,K,V
    text_per_class: list[np.ndarray]  # per class: (P_c, d_text) f32
    masks: np.ndarray  # (M, H, W) u8, possibly M == 0
    gt: np.ndarray | None = None  # (H, W) u8, 255 = ignore
    warnings: list[str] = field(default_factory=list)

    @property
    def token_hw(self) -> tuple[int, int]:
        m = self.manifest
        return m.image_h // m.patch, m.image_w // m.patch

    @property
    def crop_tokens(self) -> int:
        m = self.manifest
        return (m.window // m.patch) ** 2


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValidationError(message)


def _get(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ValidationError(f"manifest missing required key '{key}' in {where}")
    return mapping[key]


def parse_manifest(raw: dict) -> BundleManifest:
    """Parse and structurally validate a manifest.json dict."""
    ints = {}
    for key in ("image_h", "image_w", "patch", "window", "stride", "d"):
        value = _get(raw, key, "manifest")
        if not isinstance(value, int) or value < 1:
            raise ValidationError(f"manifest key '{key}' must be a positive integer")
        ints[key] = value

    class_names = _get(raw, "class_names", "manifest")
    _require(isinstance(class_names, list) and len(class_names) > 0,
             "class_names must be a non-empty list")
    _require(all(isinstance(n, str) and n for n in class_names),
             "class_names entries must be non-empty strings")
    _require(len(set(class_names)) == len(class_names),
             "class_names contains duplicates")

    _require(ints["window"] % ints["patch"] == 0,
             f"window {ints['window']} is not a multiple of patch {ints['patch']}")
    _require(ints["stride"] % ints["patch"] == 0,
             f"stride {ints['stride']} is not a multiple of patch {ints['patch']}")
    _require(ints["image_h"] % ints["patch"] == 0,
             f"image_h {ints['image_h']} is not a multiple of patch {ints['patch']}")
    _require(ints["image_w"] % ints["patch"] == 0,
             f"image_w {ints['image_w']} is not a multiple of patch {ints['patch']}")
    _require(ints["window"] <= min(ints["image_h"], ints["image_w"]),
             "window exceeds image")

    crops_raw = _get(raw, "crops", "manifest")
    _require(isinstance(crops_raw, list) and len(crops_raw) > 0,
             "crops must be a non-empty list")
    crops = []
    for i, crop in enumerate(crops_raw):
        files = _get(crop, "files", f"crops[{i}]")
        y, x = _get(crop, "y", f"crops[{i}]"), _get(crop, "x", f"crops[{i}]")
        _require(isinstance(y, int) and isinstance(x, int) and y >= 0 and x >= 0,
                 f"crops[{i}] offsets must be non-negative integers")
        _require(y % ints["patch"] == 0 and x % ints["patch"] == 0,
                 f"crops[{i}] offset ({y},{x}) not aligned to patch {ints['patch']}")
        _require(y + ints["window"] <= ints["image_h"]
                 and x + ints["window"] <= ints["image_w"],
                 f"crops[{i}] at ({y},{x}) exceeds image extent")
        crops.append(CropFiles(
            y=y, x=x,
            q=_get(files, "q", f"crops[{i}].files"),
            k=_get(files, "k", f"crops[{i}].files"),
            v=_get(files, "v", f"crops[{i}].files"),
            value=_get(files, "value", f"crops[{i}].files"),
            affinity_src=_get(files, "affinity_src", f"crops[{i}].files"),
        ))

    text = _get(raw, "text", "manifest")
    per_class = _get(text, "per_class", "manifest.text")
    _require(isinstance(per_class, list) and len(per_class) == len(class_names),
             f"text.per_class must list one file per class "
             f"({len(per_class) if isinstance(per_class, list) else 'bad type'} "
             f"given, {len(class_names)} classes)")

    masks_file = _get(raw, "masks_file", "manifest")
    _require(masks_file is None or isinstance(masks_file, str),
             "masks_file must be a path or null")

    return BundleManifest(
        image_h=ints["image_h"], image_w=ints["image_w"], patch=ints["patch"],
        window=ints["window"], stride=ints["stride"], d=ints["d"],
        class_names=list(class_names), crops=crops,
        projection_file=_get(raw, "projection_file", "manifest"),
        text_per_class=list(per_class),
        masks_file=masks_file,
        gt_file=raw.get("gt_file"),
    )


def _load_ref(directory: Path, name: str, field_name: str) -> np.ndarray:
    path = directory / name
    if not path.is_file():
        raise ValidationError(f"{field_name}: referenced file '{name}' is missing")
    return read_tensor(path)


def load_bundle(directory: str | Path) -> Bundle:
    """Load and eagerly validate a bundle directory.

    Every manifest invariant is checked up front; failures name the
    offending field.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ValidationError(f"no {MANIFEST_NAME} in {directory}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{MANIFEST_NAME} is not valid JSON: {exc}") from exc
    manifest = parse_manifest(raw)

    wp_crop = manifest.window // manifest.patch
    n_crop_tokens = wp_crop * wp_crop
    warnings: list[str] = []

    def load_grid(name: str, field_name: str, channels: int | None) -> np.ndarray:
        arr = _load_ref(directory, name, field_name)
        if arr.ndim == 2 and arr.shape[0] == n_crop_tokens:
            arr = arr.reshape(wp_crop, wp_crop, arr.shape[1])
        if arr.ndim != 3 or arr.shape[:2] != (wp_crop, wp_crop):
            raise ValidationError(
                f"{field_name}: '{name}' has dims {arr.shape}, expected "
                f"({wp_crop}, {wp_crop}, channels) = {n_crop_tokens} tokens"
            )
        if channels is not None and arr.shape[2] != channels:
            raise ValidationError(
                f"{field_name}: '{name}' has {arr.shape[2]} channels, expected {channels}"
            )
        return np.asarray(arr, dtype=np.float32)

    q_feats, k_feats, v_feats, value_feats, affinity_feats = [], [], [], [], []
    for i, crop in enumerate(manifest.crops):
        q_feats.append(load_grid(crop.q, f"crops[{i}].files.q", manifest.d))
        k_feats.append(load_grid(crop.k, f"crops[{i}].files.k", manifest.d))
        v_feats.append(load_grid(crop.v, f"crops[{i}].files.v", manifest.d))
        value_feats.append(load_grid(crop.value, f"crops[{i}].files.value", None))
        affinity_feats.append(
            load_grid(crop.affinity_src, f"crops[{i}].files.affinity_src", None))

    for name, grids in (("value", value_feats), ("affinity_src", affinity_feats)):
        widths = {g.shape[2] for g in grids}
        _require(len(widths) == 1,
                 f"crop {name} files disagree on channel count: {sorted(widths)}")

    projection = _load_ref(directory, manifest.projection_file, "projection_file")
    if projection.shape != (3, manifest.d + 1, manifest.d):
        raise ValidationError(
            f"projection_file: dims {projection.shape}, expected "
            f"(3, {manifest.d + 1}, {manifest.d})"
        )
    projection = np.asarray(projection, dtype=np.float32)

    text_mats = []
    d_text = None
    for c, name in enumerate(manifest.text_per_class):
        mat = _load_ref(directory, name, f"text.per_class[{c}]")
        if mat.ndim == 1:
            mat = mat[None, :]
        if mat.ndim != 2:
            raise ValidationError(
                f"text.per_class[{c}]: '{name}' must be (prompts, d_text)")
        if d_text is None:
            d_text = mat.shape[1]
        elif mat.shape[1] != d_text:
            raise ValidationError(
                f"text.per_class[{c}]: d_text {mat.shape[1]} != {d_text}")
        text_mats.append(np.asarray(mat, dtype=np.float32))

    d_value = value_feats[0].shape[2]
    _require(d_value == d_text,
             f"value feature channels ({d_value}) must match text embedding "
             f"dimension ({d_text}); bundle value features carry the output "
             f"projection folded in")

    if manifest.masks_file is None:
        warnings.append("masks_file is null: empty segment bank, "
                        "self-only attention fallback applies")
        masks = np.zeros((0, manifest.image_h, manifest.image_w), dtype=np.uint8)
    else:
        masks = _load_ref(directory, manifest.masks_file, "masks_file")
        if masks.ndim == 2:
            masks = masks[None]
        if masks.ndim != 3 or masks.shape[1:] != (manifest.image_h, manifest.image_w):
            raise ValidationError(
                f"masks_file: dims {masks.shape}, expected "
                f"(num_masks, {manifest.image_h}, {manifest.image_w})"
            )
        if masks.dtype != np.uint8 or not np.isin(masks, (0, 1)).all():
            raise ValidationError("masks_file: masks must be binary u8")
        masks = np.asarray(masks, dtype=np.uint8)

    gt = None
    if manifest.gt_file is not None:
        gt = _load_ref(directory, manifest.gt_file, "gt_file")
        if gt.shape != (manifest.image_h, manifest.image_w):
            raise ValidationError(
                f"gt_file: dims {gt.shape}, expected "
                f"({manifest.image_h}, {manifest.image_w})"
            )
        valid = (gt == 255) | (gt < len(manifest.class_names))
        _require(bool(valid.all()),
                 "gt_file: labels must be < num_classes or the ignore value 255")

    # union of crops must cover the full token grid
    hp, wp = manifest.image_h // manifest.patch, manifest.image_w // manifest.patch
    covered = np.zeros((hp, wp), dtype=bool)
    offsets = []
    for crop in manifest.crops:
        ty, tx = crop.y // manifest.patch, crop.x // manifest.patch
        covered[ty:ty + wp_crop, tx:tx + wp_crop] = True
        offsets.append((ty, tx))
    _require(bool(covered.all()), "crops do not cover every token of the image")

    for grids in (q_feats, k_feats, v_feats, value_feats, affinity_feats):
        for i, g in enumerate(grids):
            if not np.isfinite(g).all():
                raise ValidationError(f"crop {i}: non-finite feature values")

    return Bundle(
        manifest=manifest, crop_offsets=offsets,
        q_feats=q_feats, k_feats=k_feats, v_feats=v_feats,
        value_feats=value_feats, affinity_feats=affinity_feats,
        projection=projection, text_per_class=text_mats,
        masks=masks, gt=gt, warnings=warnings,
    )


def write_manifest(manifest: BundleManifest, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")
    return path
