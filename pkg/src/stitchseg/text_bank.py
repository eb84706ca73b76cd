"""Per-class text embedding aggregation.

The engine never runs a text encoder: it receives one matrix of per-prompt
embeddings per class (standard templates instantiated with the class name,
plus a handful of short class-biased phrases) and reduces each matrix to a
single unit-norm class embedding: normalize each prompt, average, normalize
again.

Column sums use exactly-rounded accumulation, so the result is bit-identical
under any permutation of the prompts.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError

DEGENERATE_NORM = 1e-8


def aggregate_class_embedding(per_prompt: np.ndarray) -> np.ndarray:
    """Reduce a (P, d) per-prompt embedding matrix to one unit vector."""
    mat = np.asarray(per_prompt, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ValidationError(f"per-prompt matrix must be (P>=1, d), got {mat.shape}")
    norms = np.linalg.norm(mat, axis=1)
    if (norms == 0.0).any():
        raise ValidationError("per-prompt matrix contains a zero embedding row")
    unit = mat / norms[:, None]
    mean = np.array([math.fsum(col) for col in unit.T]) / mat.shape[0]
    mean_norm = math.sqrt(math.fsum(x * x for x in mean))
    if mean_norm < DEGENERATE_NORM:
        raise ValidationError(
            "degenerate prompt set: prompt embeddings cancel to a near-zero mean")
    return (mean / mean_norm).astype(np.float32)


def build_bank(
    per_class: list[np.ndarray],
    expected_classes: int | None = None,
) -> np.ndarray:
    """Stack aggregated class embeddings, one row per class in input order."""
    if expected_classes is not None and len(per_class) != expected_classes:
        raise ValidationError(
            f"class count mismatch: {len(per_class)} embedding matrices for "
            f"{expected_classes} classes")
    if not per_class:
        raise ValidationError("no classes to aggregate")
    return np.stack([aggregate_class_embedding(m) for m in per_class])


# ---------------------------------------------------------------------------
# Prompt text plumbing (consumed by extraction tooling, shipped here so the
# template list and the biased-phrase file format have one home)
# ---------------------------------------------------------------------------


def imagenet_templates() -> list[str]:
    """The standard 80 caption templates, each with one ``{}`` placeholder."""
    text = (resources.files("stitchseg") / "data" / "imagenet_templates.txt").read_text(
        encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def read_biased_prompts(path: str | Path) -> list[str]:
    """Read one phrase per line from a UTF-8 biased-prompt file."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line.strip() for line in lines if line.strip()]


def build_prompt_set(
    class_name: str,
    biased_dir: str | Path | None = None,
    templates: list[str] | None = None,
) -> list[str]:
    """Templates instantiated with the class name, then the class's biased
    phrases from ``<biased_dir>/<class>.txt`` when that file exists."""
    prompts = [t.format(class_name) for t in (templates or imagenet_templates())]
    if biased_dir is not None:
        biased_file = Path(biased_dir) / f"{class_name}.txt"
        if biased_file.is_file():
            prompts.extend(read_biased_prompts(biased_file))
    if not prompts:
        raise ValidationError(f"no prompts for class '{class_name}'")
    return prompts
