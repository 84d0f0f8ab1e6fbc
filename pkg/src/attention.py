"""Compositional cross-attention and reference frame attention."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from einops import rearrange

from .config import config
from .encoders import RefContext, TextEmbedding, encode_text
from .numerics import DimensionError, Tensor, as_tensor, matmul, softmax_rows
from .plan import PromptPlan, RegionMask, masks_for_segment, segment_for_frame

logger = logging.getLogger(__name__)

BLEND_MODES = ("literal", "renormalized")


@dataclass(frozen=True, eq=False)
class AttentionLayer:
    """Query projection (d_model -> d) and key/value projections (d_context -> d)."""
    w_q: Tensor = field(repr=False)
    w_k: Tensor = field(repr=False)
    w_v: Tensor = field(repr=False)
    heads: int = 1

    def __post_init__(self):
        if self.w_k.shape != self.w_v.shape:
            raise DimensionError(f"W_K {self.w_k.shape} and W_V {self.w_v.shape} differ")
        if self.w_q.shape[1] != self.w_k.shape[1]:
            raise DimensionError(f"W_Q {self.w_q.shape} and W_K {self.w_k.shape} disagree on d")
        if self.d < 1 or self.d % self.heads:
            raise DimensionError(f"head dimension {self.d} not divisible into {self.heads} heads")

    @property
    def d(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_context(self) -> int:
        return self.w_k.shape[0]

    @classmethod
    def from_seed(
        cls,
        seed: int,
        d_model: int,
        d_context: int,
        d: int,
        heads: int = 1
    ) -> "AttentionLayer":
        """Seeded projections scaled by 1/sqrt(fan_in)."""
        rng = np.random.Generator(np.random.Philox(key=seed))
        return cls(
            w_q=as_tensor(rng.standard_normal((d_model, d)) / math.sqrt(d_model)),
            w_k=as_tensor(rng.standard_normal((d_context, d)) / math.sqrt(d_context)),
            w_v=as_tensor(rng.standard_normal((d_context, d)) / math.sqrt(d_context)),
            heads=heads,
        )


@dataclass(frozen=True, eq=False)
class FrameQuery:
    """Projected queries of one latent frame."""
    q: Tensor = field(repr=False)
    resolution: Tuple[int, int]

    def __post_init__(self):
        h, w = self.resolution
        if self.q.ndim != 2 or self.q.shape[0] != h * w:
            raise DimensionError(f"query shape {self.q.shape} does not match resolution {h}x{w}")

    @property
    def positions(self) -> int:
        return self.q.shape[0]


def make_query(features: Tensor, layer: AttentionLayer) -> FrameQuery:
    """Project a [d_model, h, w] feature map into a FrameQuery."""
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[0] != layer.d_model:
        raise DimensionError(
            f"features must be [{layer.d_model}, h, w], got {tuple(features.shape)}"
        )
    _, h, w = features.shape
    return FrameQuery(q=matmul(rearrange(features, "c h w -> (h w) c"), layer.w_q), resolution=(h, w))


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Softmax(q k^T / sqrt(d_head)) v, split over heads and concatenated."""
    d_head = q.shape[1] // heads
    outs = []
    for hd in range(heads):
        sl = slice(hd * d_head, (hd + 1) * d_head)
        logits = matmul(q[:, sl], k[:, sl].T) / np.float32(math.sqrt(d_head))
        outs.append(matmul(softmax_rows(logits), v[:, sl]))
    return outs[0] if heads == 1 else as_tensor(np.concatenate(outs, axis=1))


def _check_mask(mask: RegionMask, q: FrameQuery) -> None:
    if (mask.height, mask.width) != q.resolution:
        raise DimensionError(
            f"mask {mask.height}x{mask.width} does not match query resolution {q.resolution}"
        )


# ==================== Compositional cross-attention ====================

def cross_attention(q: FrameQuery, emb: TextEmbedding, layer: AttentionLayer) -> Tensor:
    """
    Plain cross-attention of frame queries against a prompt embedding.

    Returns:
        Tensor of shape [h*w, d]
    """
    if emb.dim != layer.d_context:
        raise DimensionError(f"embedding dim {emb.dim} does not match layer key input {layer.d_context}")
    if q.q.shape[1] != layer.d:
        raise DimensionError(f"query width {q.q.shape[1]} does not match layer d {layer.d}")
    k = matmul(emb.values, layer.w_k)
    v = matmul(emb.values, layer.w_v)
    return _attend(q.q, k, v, layer.heads)


def masked_subobject_attention(
    q: FrameQuery,
    sub_emb: TextEmbedding,
    mask: RegionMask,
    layer: AttentionLayer
) -> Tensor:
    """Cross-attention for one sub-object, with rows outside its mask zeroed."""
    _check_mask(mask, q)
    out = cross_attention(q, sub_emb, layer)
    return as_tensor(out * mask.flat()[:, None])


def compose_regions(parts: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of the per-sub-object attention outputs."""
    if not parts:
        raise ValueError("compose_regions needs at least one part")
    shape = parts[0].shape
    total = np.zeros(shape, dtype=np.float64)
    for i, part in enumerate(parts):
        if part.shape != shape:
            raise DimensionError(f"part {i} has shape {part.shape}, expected {shape}")
        total += part
    return as_tensor(total)


def blend_global(
    original: Tensor,
    region: Tensor,
    alpha: float,
    mode: str = "literal",
    coverage: Optional[RegionMask] = None
) -> Tensor:
    """
    Weighted sum ``alpha * original + (1 - alpha) * region``.

    In "renormalized" mode, positions no sub-object covers take the original
    attention unchanged instead of being dimmed by alpha.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if mode not in BLEND_MODES:
        raise ValueError(f"unknown blend mode '{mode}', expected one of {BLEND_MODES}")
    if original.shape != region.shape:
        raise DimensionError(f"original {original.shape} and region {region.shape} differ")
    if alpha == 1.0:
        return as_tensor(original)
    if alpha == 0.0 and mode == "literal":
        return as_tensor(region)

    blended = as_tensor(np.float32(alpha) * original + np.float32(1.0 - alpha) * region)
    if mode == "renormalized":
        if coverage is None:
            raise ValueError("renormalized blending needs a coverage mask")
        uncovered = coverage.flat() == 0
        blended[uncovered] = original[uncovered]
    return blended


def temporal_concat(frames: Sequence[Tensor]) -> Tensor:
    """Stack per-frame attention outputs into [t, h*w, d], preserving order."""
    if not frames:
        raise DimensionError("temporal_concat needs at least one frame")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise DimensionError(f"frame {i} has shape {f.shape}, expected {shape}")
    return as_tensor(np.stack(frames, axis=0))


def frame_cross_attention(
    q: FrameQuery,
    plan: PromptPlan,
    frame: int,
    layer: AttentionLayer,
    mode: str = None,
    trace: Optional[Dict[str, Tensor]] = None
) -> Tensor:
    """Global, per-region and blended attention for one frame of the plan."""
    mode = mode or config.attention.blend_mode
    segment = segment_for_frame(plan, frame)
    h, w = q.resolution

    original = cross_attention(q, encode_text(segment.global_prompt, layer.d_context), layer)
    masks, coverage = masks_for_segment(segment, h, w)
    parts = [
        masked_subobject_attention(q, encode_text(obj.prompt, layer.d_context), mask, layer)
        for obj, mask in zip(segment.sub_objects, masks)
    ]
    region = compose_regions(parts)
    blended = blend_global(original, region, plan.alpha, mode=mode, coverage=coverage)

    if trace is not None:
        trace[f"frame{frame:04d}_original"] = original
        for j, part in enumerate(parts):
            trace[f"frame{frame:04d}_object{j:02d}"] = part
        trace[f"frame{frame:04d}_region"] = region
        trace[f"frame{frame:04d}_blended"] = blended
    return blended


def map_frames(fn: Callable, items: Sequence, workers: int = 1) -> List:
    """Apply ``fn`` to every item, in order, optionally on a thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def spatio_temporal_cross_attention(
    queries: Sequence[FrameQuery],
    plan: PromptPlan,
    layer: AttentionLayer,
    frame_offset: int = 0,
    mode: str = None,
    workers: int = None,
    trace: Optional[Dict[str, Tensor]] = None
) -> Tensor:
    """
    Compose sub-object attention spatially per frame, then concatenate over time.

    For every frame: pick its segment, attend to the global prompt, attend to
    each sub-object inside its mask, sum the regions, blend with ``plan.alpha``.

    Args:
        queries: One FrameQuery per frame
        plan: Validated prompt plan
        layer: Attention projections
        frame_offset: Plan frame index of ``queries[0]``
        mode: Blend mode (default from config)
        workers: Thread count for per-frame work (default from config)
        trace: Optional dict receiving every intermediate tensor

    Returns:
        Tensor of shape [t, h*w, d]
    """
    workers = workers or config.runtime.workers
    frames = list(range(frame_offset, frame_offset + len(queries)))
    # Per-frame traces are merged afterwards so the dict is only touched by one thread
    traces = [dict() if trace is not None else None for _ in frames]

    def run(i: int) -> Tensor:
        return frame_cross_attention(queries[i], plan, frames[i], layer, mode=mode, trace=traces[i])

    outputs = map_frames(run, list(range(len(queries))), workers)
    if trace is not None:
        for t in traces:
            trace.update(t)
    return temporal_concat(outputs)


# ==================== Reference frame attention ====================

def project_reference(ctx: RefContext, layer: AttentionLayer) -> Tuple[Tensor, Tensor]:
    """Keys and values of the reference tokens inside the object mask."""
    if ctx.x_ref.shape[1] != layer.d_context:
        raise DimensionError(
            f"x_ref width {ctx.x_ref.shape[1]} does not match layer key input {layer.d_context}"
        )
    masked = as_tensor(ctx.x_ref * ctx.token_mask()[:, None])
    return matmul(masked, layer.w_k), matmul(masked, layer.w_v)


def reference_frame_attention(
    q: FrameQuery,
    ctx: RefContext,
    current_mask: RegionMask,
    layer: AttentionLayer,
    kv: Optional[Tuple[Tensor, Tensor]] = None
) -> Tensor:
    """
    Attention of the current object's region against its reference tokens.

    Queries outside ``current_mask`` are zeroed after projection, reference
    rows outside ``ctx.object_mask`` are zeroed before the key/value
    projections, and output rows outside ``current_mask`` are zero.

    Args:
        q: Frame queries
        ctx: Encoded reference context
        current_mask: Region of the object in the current frame
        layer: Attention projections with d_context matching x_ref
        kv: Precomputed ``project_reference(ctx, layer)``

    Returns:
        Tensor of shape [h*w, d]
    """
    _check_mask(current_mask, q)
    k, v = kv if kv is not None else project_reference(ctx, layer)
    rows = current_mask.flat()[:, None]
    out = _attend(as_tensor(q.q * rows), k, v, layer.heads)
    return as_tensor(out * rows)
