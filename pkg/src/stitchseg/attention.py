"""Cross-crop stitched attention, its streaming variant, and the
feature-affinity attention with segment-mask bias.

The global attention path projects every crop with shared Q/K/V weights,
scatter-means the projected grids into one global token field, and runs a
single softmax attention over all tokens. The streaming variant computes
the same result with an online softmax over block x block score tiles, so
the score buffer never holds the full token-by-token matrix.

Scores are held in float32 tiles (that is the quantity the memory
accounting tracks); softmax accumulators run in float64 so both paths agree
to well below output precision.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .stitcher import GlobalGrid, stitch_grids

NEG_LARGE = -1.0e4  # additive mask value; suppresses weight below 1e-4 without NaNs


@dataclass
class ProjectionSet:
    """Q/K/V projection weights (d_in, d) with optional bias vectors."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray | None = None
    bk: np.ndarray | None = None
    bv: np.ndarray | None = None

    def __post_init__(self):
        shapes = {self.wq.shape, self.wk.shape, self.wv.shape}
        if len(shapes) != 1 or self.wq.ndim != 2:
            raise ValidationError(f"projection weights disagree: {shapes}")
        d_out = self.wq.shape[1]
        for name, b in (("bq", self.bq), ("bk", self.bk), ("bv", self.bv)):
            if b is not None and b.shape != (d_out,):
                raise ValidationError(f"{name} has shape {b.shape}, expected ({d_out},)")

    @property
    def d_in(self) -> int:
        return self.wq.shape[0]

    @property
    def d_out(self) -> int:
        return self.wq.shape[1]

    @classmethod
    def identity(cls, d: int) -> "ProjectionSet":
        eye = np.eye(d, dtype=np.float32)
        return cls(wq=eye, wk=eye.copy(), wv=eye.copy())

    @classmethod
    def from_stack(cls, stack: np.ndarray) -> "ProjectionSet":
        """Unpack a (3, d+1, d) stack: weight rows then a bias row; order Q,K,V."""
        if stack.ndim != 3 or stack.shape[0] != 3 or stack.shape[1] != stack.shape[2] + 1:
            raise ValidationError(
                f"projection stack has dims {stack.shape}, expected (3, d+1, d)")
        w = stack[:, :-1, :].astype(np.float32)
        b = stack[:, -1, :].astype(np.float32)
        return cls(wq=w[0], wk=w[1], wv=w[2], bq=b[0], bk=b[1], bv=b[2])

    def to_stack(self) -> np.ndarray:
        d_in, d = self.wq.shape
        if d_in != d:
            raise ValidationError("only square projections can be stacked")
        stack = np.zeros((3, d + 1, d), dtype=np.float32)
        for i, (w, b) in enumerate(
            ((self.wq, self.bq), (self.wk, self.bk), (self.wv, self.bv))
        ):
            stack[i, :-1] = w
            if b is not None:
                stack[i, -1] = b
        return stack


@dataclass
class QKVGlobal:
    """Stitched global query/key/value token matrices, each (N, d)."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape) or self.q.ndim != 2:
            raise ValidationError(
                f"Q/K/V shapes disagree: {self.q.shape}, {self.k.shape}, {self.v.shape}")

    @property
    def n_tokens(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]


@dataclass
class AttentionStats:
    """Score-buffer accounting for one attention call."""

    n_tokens: int
    block: int
    peak_score_buffer_bytes: int

    @property
    def naive_score_buffer_bytes(self) -> int:
        return self.n_tokens * self.n_tokens * 4


def default_tau(d: int) -> float:
    """Standard scaled-dot-product temperature."""
    return math.sqrt(d)


def _project(grid: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    hp, wp, d_in = grid.shape
    out = grid.reshape(hp * wp, d_in) @ w
    if b is not None:
        out = out + b
    return out.reshape(hp, wp, w.shape[1]).astype(np.float32, copy=False)


def stitch_qkv(
    crop_feats: list[tuple[tuple[int, int], np.ndarray]],
    proj: ProjectionSet,
    global_hp: int,
    global_wp: int,
    k_feats: list[tuple[tuple[int, int], np.ndarray]] | None = None,
    v_feats: list[tuple[tuple[int, int], np.ndarray]] | None = None,
) -> QKVGlobal:
    """Project every crop with the shared Q/K/V weights, then stitch each
    stream into a global token matrix.

    ``crop_feats`` feeds all three projections unless separate key/value
    source grids are given.
    """
    for _, grid in crop_feats:
        if grid.shape[2] != proj.d_in:
            raise ValidationError(
                f"crop feature channels {grid.shape[2]} != projection d_in {proj.d_in}")

    def run(feats, w, b):
        projected = [(off, _project(grid, w, b)) for off, grid in feats]
        return stitch_grids(projected, global_hp, global_wp).tokens

    q = run(crop_feats, proj.wq, proj.bq)
    k = run(k_feats if k_feats is not None else crop_feats, proj.wk, proj.bk)
    v = run(v_feats if v_feats is not None else crop_feats, proj.wv, proj.bv)
    return QKVGlobal(q=q, k=k, v=v)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{name} contains non-finite values")


def global_attention(qkv: QKVGlobal, tau: float | None = None) -> np.ndarray:
    """softmax(Q K^T / tau) V over all stitched tokens, row-stabilized."""
    if tau is None:
        tau = default_tau(qkv.d)
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    for name, arr in (("Q", qkv.q), ("K", qkv.k), ("V", qkv.v)):
        _check_finite(name, arr)
    q32 = np.asarray(qkv.q, dtype=np.float32)
    k32 = np.asarray(qkv.k, dtype=np.float32)
    scores = (q32 @ k32.T) / np.float32(tau)
    m = scores.max(axis=1, keepdims=True)
    p = np.exp(scores.astype(np.float64) - m.astype(np.float64))
    denom = p.sum(axis=1, keepdims=True)
    out = (p @ qkv.v.astype(np.float64)) / denom
    return out.astype(np.float32)


def streaming_attention(
    qkv: QKVGlobal,
    tau: float | None = None,
    block: int = 128,
    return_stats: bool = False,
) -> np.ndarray | tuple[np.ndarray, AttentionStats]:
    """Online-softmax attention over block x block score tiles.

    Mathematically identical to :func:`global_attention`; keeps a running
    max and denominator per query and never materializes the full score
    matrix.
    """
    if tau is None:
        tau = default_tau(qkv.d)
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    if block < 1:
        raise ValidationError(f"block must be >= 1, got {block}")
    for name, arr in (("Q", qkv.q), ("K", qkv.k), ("V", qkv.v)):
        _check_finite(name, arr)

    n, d = qkv.q.shape
    q32 = np.asarray(qkv.q, dtype=np.float32)
    k32 = np.asarray(qkv.k, dtype=np.float32)
    v64 = qkv.v.astype(np.float64)
    tau32 = np.float32(tau)
    out = np.empty((n, d), dtype=np.float32)
    peak_score_bytes = 0

    for qs in range(0, n, block):
        qe = min(qs + block, n)
        q_tile = q32[qs:qe]
        m = np.full(qe - qs, -np.inf)
        denom = np.zeros(qe - qs)
        acc = np.zeros((qe - qs, d))
        for ks in range(0, n, block):
            ke = min(ks + block, n)
            scores = (q_tile @ k32[ks:ke].T) / tau32  # (bq, bk) f32 tile
            peak_score_bytes = max(peak_score_bytes, scores.nbytes)
            m_new = np.maximum(m, scores.max(axis=1))
            rescale = np.exp(m - m_new)
            p = np.exp(scores.astype(np.float64) - m_new[:, None])
            denom = denom * rescale + p.sum(axis=1)
            acc = acc * rescale[:, None] + p @ v64[ks:ke]
            m = m_new
        out[qs:qe] = (acc / denom[:, None]).astype(np.float32)

    if return_stats:
        return out, AttentionStats(n_tokens=n, block=block,
                                   peak_score_buffer_bytes=peak_score_bytes)
    return out


def affinity_map(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cosine self-similarity of token features.

    Returns the symmetric (N, N) similarity matrix and the indices of any
    zero-norm rows, which are decoupled (off-diagonal zero, diagonal one)
    and flagged with a warning.
    """
    if feats.ndim != 2:
        raise ValidationError(f"feats must be (N, d), got {feats.shape}")
    _check_finite("affinity features", feats)
    f = feats.astype(np.float64)
    norms = np.linalg.norm(f, axis=1)
    zero_rows = np.flatnonzero(norms == 0.0)
    safe = np.where(norms == 0.0, 1.0, norms)
    unit = f / safe[:, None]
    sim = unit @ unit.T
    sim = (sim + sim.T) * 0.5
    if zero_rows.size:
        warnings.warn(f"affinity_map: {zero_rows.size} zero-norm feature rows",
                      RuntimeWarning, stacklevel=2)
        sim[zero_rows, :] = 0.0
        sim[:, zero_rows] = 0.0
        sim[zero_rows, zero_rows] = 1.0
    return sim.astype(np.float32), zero_rows


def segment_bias(token_masks: np.ndarray, n_tokens: int | None = None) -> np.ndarray:
    """Additive attention bias from token-resolution segment masks.

    Tokens sharing at least one segment see each other (bias 0); all other
    pairs get NEG_LARGE. Tokens belonging to no segment attend only to
    themselves.
    """
    masks = np.asarray(token_masks)
    if masks.ndim != 3:
        raise ValidationError(f"token masks must be (M, hp, wp), got {masks.shape}")
    m_count, hp, wp = masks.shape
    n = hp * wp
    if n_tokens is not None and n_tokens != n:
        raise ValidationError(
            f"mask token grid {hp}x{wp} = {n} does not match N = {n_tokens}")
    if m_count and not np.isin(masks, (0, 1)).all():
        raise ValidationError("token masks must be binary")
    flat = masks.reshape(m_count, n).astype(np.float32)
    shared = (flat.T @ flat) > 0 if m_count else np.zeros((n, n), dtype=bool)
    bias = np.where(shared, 0.0, NEG_LARGE).astype(np.float32)
    np.fill_diagonal(bias, 0.0)
    return bias


def affinity_attention(
    sim: np.ndarray,
    bias: np.ndarray,
    v_clip: np.ndarray,
    lam: float = 1.0,
) -> np.ndarray:
    """softmax(lam * S + M) applied to the stitched value features."""
    if sim.shape != bias.shape or sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValidationError(
            f"similarity {sim.shape} and bias {bias.shape} must be equal square")
    if v_clip.ndim != 2 or v_clip.shape[0] != sim.shape[0]:
        raise ValidationError(
            f"value features {v_clip.shape} do not match N = {sim.shape[0]}")
    _check_finite("value features", v_clip)
    scores = lam * sim.astype(np.float64) + bias.astype(np.float64)
    m = scores.max(axis=1, keepdims=True)
    p = np.exp(scores - m)
    out = (p @ v_clip.astype(np.float64)) / p.sum(axis=1, keepdims=True)
    return out.astype(np.float32)


@dataclass
class StitchForwardResult:
    qkv: QKVGlobal
    attended: np.ndarray  # (N, d) stitched-attention output
    value_global: np.ndarray  # (N, d_v) stitched value features
    final: np.ndarray  # (N, d_v) affinity-attended output
    affinity_zero_rows: np.ndarray


def forward_stitch(
    crop_feats: list[tuple[tuple[int, int], np.ndarray]],
    proj: ProjectionSet,
    value_crops: list[tuple[tuple[int, int], np.ndarray]],
    token_masks: np.ndarray,
    global_hp: int,
    global_wp: int,
    tau: float | None = None,
    lam: float = 1.0,
    block: int = 128,
    streaming: bool = True,
    affinity_feats: np.ndarray | None = None,
) -> StitchForwardResult:
    """The composed pipeline: stitch Q/K/V, attend globally, build the
    affinity map from the attended features (or from ``affinity_feats`` when
    given), bias it with the segment masks, and re-weight the stitched value
    features.
    """
    qkv = stitch_qkv(crop_feats, proj, global_hp, global_wp)
    if streaming:
        attended = streaming_attention(qkv, tau=tau, block=block)
    else:
        attended = global_attention(qkv, tau=tau)
    sim_source = attended if affinity_feats is None else affinity_feats
    sim, zero_rows = affinity_map(sim_source)
    bias = segment_bias(token_masks, n_tokens=qkv.n_tokens)
    value_global = stitch_grids(value_crops, global_hp, global_wp).tokens
    final = affinity_attention(sim, bias, value_global, lam=lam)
    return StitchForwardResult(qkv=qkv, attended=attended,
                               value_global=value_global, final=final,
                               affinity_zero_rows=zero_rows)


def crop_local_attention(
    crop_feats: list[tuple[tuple[int, int], np.ndarray]],
    proj: ProjectionSet,
    global_hp: int,
    global_wp: int,
    tau: float | None = None,
) -> GlobalGrid:
    """Per-crop-independent attention baseline: softmax attention inside each
    crop only, outputs stitched afterwards. This is the fragmented pipeline
    that stitched attention replaces.
    """
    attended = []
    for offset, grid in crop_feats:
        hp_c, wp_c, _ = grid.shape
        q = _project(grid, proj.wq, proj.bq).reshape(hp_c * wp_c, -1)
        k = _project(grid, proj.wk, proj.bk).reshape(hp_c * wp_c, -1)
        v = _project(grid, proj.wv, proj.bv).reshape(hp_c * wp_c, -1)
        out = global_attention(QKVGlobal(q=q, k=k, v=v), tau=tau)
        attended.append((offset, out.reshape(hp_c, wp_c, -1)))
    return stitch_grids(attended, global_hp, global_wp)
