"""Similarity logits, upsampling, label prediction and the segment-majority
post-processing step.

Logits are cosine similarities between projected token features and the
class embedding bank, upsampled bilinearly (half-pixel centers) to pixel
resolution before the per-pixel argmax. Post-processing reassigns every
segment mask the most frequent raw predicted label inside it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError

IGNORE_LABEL = 255


@dataclass
class SegmentBank:
    """Class-agnostic binary segment masks at pixel resolution."""

    pixel_masks: np.ndarray  # (M, H, W) u8/bool, possibly overlapping
    _token_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        masks = np.asarray(self.pixel_masks)
        if masks.ndim != 3:
            raise ValidationError(f"masks must be (M, H, W), got {masks.shape}")
        if masks.shape[0] and not np.isin(masks, (0, 1)).all():
            raise ValidationError("masks must be binary")
        self.pixel_masks = masks.astype(np.uint8)

    def __len__(self) -> int:
        return self.pixel_masks.shape[0]

    def token_masks(self, patch: int) -> np.ndarray:
        """Downsample to the token grid: a token joins a segment when the
        segment covers at least half of its patch."""
        if patch in self._token_cache:
            return self._token_cache[patch]
        out = token_masks_from_pixel(self.pixel_masks, patch)
        self._token_cache[patch] = out
        return out


def token_masks_from_pixel(masks: np.ndarray, patch: int) -> np.ndarray:
    m, h, w = masks.shape
    if h % patch or w % patch:
        raise ValidationError(
            f"mask dims {h}x{w} are not multiples of patch {patch}")
    hp, wp = h // patch, w // patch
    if m == 0:
        return np.zeros((0, hp, wp), dtype=np.uint8)
    pooled = masks.reshape(m, hp, patch, wp, patch).mean(axis=(2, 4))
    return (pooled >= 0.5).astype(np.uint8)


def compute_logits(
    feats: np.ndarray,
    proj_out: np.ndarray,
    bank: np.ndarray,
    hp: int,
    wp: int,
) -> np.ndarray:
    """Cosine logits between projected token features and the class bank.

    Returns (num_classes, hp, wp). Tokens whose projection has zero norm get
    all-zero logits and trigger a warning.
    """
    if feats.ndim != 2 or proj_out.ndim != 2 or bank.ndim != 2:
        raise ValidationError("feats, proj_out and bank must all be 2-D")
    if feats.shape[1] != proj_out.shape[0]:
        raise ValidationError(
            f"feature dim {feats.shape[1]} != projection input {proj_out.shape[0]}")
    if proj_out.shape[1] != bank.shape[1]:
        raise ValidationError(
            f"projection output {proj_out.shape[1]} != bank dim {bank.shape[1]}")
    if feats.shape[0] != hp * wp:
        raise ValidationError(
            f"{feats.shape[0]} tokens do not fill a {hp}x{wp} grid")
    projected = feats.astype(np.float64) @ proj_out.astype(np.float64)
    norms = np.linalg.norm(projected, axis=1)
    zero = norms == 0.0
    if zero.any():
        warnings.warn(f"compute_logits: {int(zero.sum())} zero-projection tokens",
                      RuntimeWarning, stacklevel=2)
    unit = projected / np.where(zero, 1.0, norms)[:, None]
    bank64 = bank.astype(np.float64)
    bank_norms = np.linalg.norm(bank64, axis=1)
    if (bank_norms == 0.0).any():
        raise ValidationError("class bank contains a zero embedding")
    logits = unit @ (bank64 / bank_norms[:, None]).T  # (N, C)
    return logits.T.reshape(bank.shape[0], hp, wp).astype(np.float32)


def upsample_bilinear(logits: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-class bilinear upsampling with half-pixel centers and edge clamp."""
    if logits.ndim != 3:
        raise ValidationError(f"logits must be (C, hp, wp), got {logits.shape}")
    c, in_h, in_w = logits.shape
    if out_h < in_h or out_w < in_w:
        raise ValidationError("target dims must be >= source dims")
    if (out_h, out_w) == (in_h, in_w):
        return logits.copy()

    def axis_coords(out_n: int, in_n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(out_n, dtype=np.float64) + 0.5) * (in_n / out_n) - 0.5
        src = np.clip(src, 0.0, in_n - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, in_n - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_coords(out_h, in_h)
    x0, x1, fx = axis_coords(out_w, in_w)
    src = logits.astype(np.float64)
    rows0, rows1 = src[:, y0, :], src[:, y1, :]
    top = rows0[:, :, x0] * (1 - fx) + rows0[:, :, x1] * fx
    bot = rows1[:, :, x0] * (1 - fx) + rows1[:, :, x1] * fx
    out = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]
    return out.astype(np.float32)


def predict_argmax(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    if logits.ndim != 3 or logits.shape[0] < 1:
        raise ValidationError(f"logits must be (C>=1, H, W), got {logits.shape}")
    return np.argmax(logits, axis=0).astype(np.int64)


def mask_vote_postprocess(raw_labels: np.ndarray, bank: SegmentBank) -> np.ndarray:
    """Reassign each segment the modal raw label inside it.

    The mode is always counted over the raw labels, never over already
    rewritten values; overlapping segments are resolved by bank order (later
    masks win). Ties go to the lowest class index; empty masks are skipped
    with a warning.
    """
    if raw_labels.ndim != 2:
        raise ValidationError(f"label map must be (H, W), got {raw_labels.shape}")
    if len(bank) and bank.pixel_masks.shape[1:] != raw_labels.shape:
        raise ValidationError(
            f"mask dims {bank.pixel_masks.shape[1:]} != label dims {raw_labels.shape}")
    out = raw_labels.copy()
    for i in range(len(bank)):
        region = bank.pixel_masks[i].astype(bool)
        votes = raw_labels[region]
        if votes.size == 0:
            warnings.warn(f"mask_vote_postprocess: mask {i} is empty, skipped",
                          RuntimeWarning, stacklevel=2)
            continue
        out[region] = np.argmax(np.bincount(votes))  # argmax tie -> lowest label
    return out


# ---------------------------------------------------------------------------
# Label map export
# ---------------------------------------------------------------------------


def write_label_pgm(
    labels: np.ndarray,
    path: str | Path,
    class_names: list[str] | None = None,
) -> Path:
    """Write a label map as binary 8-bit PGM with a JSON legend sidecar."""
    if labels.ndim != 2:
        raise ValidationError(f"label map must be (H, W), got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise ValidationError("labels must fit 8-bit grayscale")
    path = Path(path)
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(labels.astype(np.uint8).tobytes(order="C"))
    if class_names is not None:
        legend = {"ignore": IGNORE_LABEL,
                  "classes": {str(i): name for i, name in enumerate(class_names)}}
        path.with_suffix(".json").write_text(json.dumps(legend, indent=2) + "\n",
                                             encoding="utf-8")
    return path


def read_label_pgm(path: str | Path) -> np.ndarray:
    """Read a binary 8-bit PGM label map."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValidationError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ValidationError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos)
    if data.size != h * w:
        raise ValidationError(f"{path}: truncated pixel data")
    return data.reshape(h, w).astype(np.int64)
