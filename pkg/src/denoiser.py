"""Seeded toy noise-prediction network hosting the compositional attention blocks."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from einops import rearrange

from .attention import (
    AttentionLayer,
    FrameQuery,
    cross_attention,
    map_frames,
    project_reference,
    reference_frame_attention,
    spatio_temporal_cross_attention,
    temporal_concat,
)
from .config import config
from .encoders import RefContext, ReferenceEncoder, encode_reference, null_embedding
from .numerics import (
    DimensionError,
    Tensor,
    as_tensor,
    avg_pool2d,
    conv2d,
    group_norm,
    layer_norm,
    matmul,
    silu,
    upsample_nearest,
)
from .plan import PromptPlan, RegionMask, full_mask, interior_mask, rasterize_mask
from .schedule import TimestepRangeError

logger = logging.getLogger(__name__)

GN_GROUPS = 8
CALIBRATION_SIZE = 8


def timestep_table(steps: int, channels: int) -> Tensor:
    """Sinusoidal timestep embeddings, one row per timestep."""
    half = channels // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = np.arange(steps, dtype=np.float64)[:, None] * freqs[None, :]
    return as_tensor(np.concatenate([np.sin(angles), np.cos(angles)], axis=1))


@dataclass(frozen=True, eq=False)
class AttentionBlock:
    """Cross-attention and reference attention with their residual read-outs."""
    name: str
    cross: AttentionLayer
    w_out: Tensor = field(repr=False)
    ref: AttentionLayer = None
    w_ref_out: Tensor = field(default=None, repr=False)


@dataclass(frozen=True, eq=False)
class _PreparedRef:
    ctx: RefContext
    mask: RegionMask
    kv: Tuple[Tensor, Tensor]


class ToyDenoiser:
    """
    Two-resolution conv-residual network with one attention block per resolution.

    Frames are processed independently. All spatial mixing (convolutions,
    pooling) happens before the first reference attention; everything after it
    acts per position, so reference conditioning only changes the masked region.
    """

    def __init__(
        self,
        seed: int = None,
        ref_gain: float = None,
        refattn_position: str = None,
        latent_size: Optional[Tuple[int, int]] = None
    ):
        cfg = config.model
        self.seed = cfg.seed if seed is None else seed
        self.ref_gain = cfg.ref_gain if ref_gain is None else ref_gain
        self.refattn_position = refattn_position or cfg.refattn_position
        if self.refattn_position not in ("after", "before"):
            raise ValueError(f"refattn_position must be 'after' or 'before', got '{self.refattn_position}'")

        self.latent_channels = cfg.latent_channels
        self.latent_height, self.latent_width = latent_size or (cfg.latent_height, cfg.latent_width)
        c = cfg.hidden_channels
        d = cfg.attention_dim
        text_dim = config.text.dim

        rng = np.random.Generator(np.random.Philox(key=self.seed))

        def init(shape, fan_in):
            return as_tensor(rng.standard_normal(shape) / math.sqrt(fan_in))

        self.time_table = timestep_table(config.schedule.steps, c)
        self.conv_in = init((c, self.latent_channels, 3, 3), self.latent_channels * 9)
        self.conv_in_bias = init((c,), self.latent_channels * 9)
        self.res_full = init((c, c, 3, 3), c * 9)
        self.res_full_bias = init((c,), c * 9)
        self.res_half = init((c, c, 3, 3), c * 9)
        self.res_half_bias = init((c,), c * 9)
        self.w_final = init((c, self.latent_channels), c)

        self.reference_encoder = ReferenceEncoder.from_seed(self.seed)
        ref_dim = self.reference_encoder.out_dim

        blocks = []
        for name in ("half", "full"):
            layer_seed = int(rng.integers(0, 2**63))
            cross = AttentionLayer.from_seed(layer_seed, c, text_dim, d, cfg.heads)
            ref = AttentionLayer.from_seed(layer_seed + 1, c, ref_dim, d, cfg.heads)
            blocks.append(AttentionBlock(
                name=name,
                cross=cross,
                w_out=init((d, c), d),
                ref=ref,
                w_ref_out=self._calibrate_readout(ref, rng, self.ref_gain / 2.0),
            ))
        self.half_block, self.full_block = blocks

        logger.info(f"ToyDenoiser ready (seed={self.seed}, hidden={c}, d={d}, ref_gain={self.ref_gain})")

    @property
    def latent_shape(self) -> Tuple[int, int, int]:
        return self.latent_channels, self.latent_height, self.latent_width

    def _calibrate_readout(self, layer: AttentionLayer, rng: np.random.Generator, gain: float) -> Tensor:
        """
        Least-squares read-out from reference values back to latent space.

        Fits G with ``values @ G ~ latents`` on random calibration frames, then maps
        the block output so that its contribution to the noise prediction is
        ``-gain * (attention output @ G)``. Lower predicted noise moves the
        clean-sample estimate toward the attended reference content.
        """
        size = (config.reference.frames, self.latent_channels, CALIBRATION_SIZE, CALIBRATION_SIZE)
        calibration = rng.standard_normal(size)
        ctx = encode_reference(calibration, self.reference_encoder)
        values = matmul(ctx.x_ref, layer.w_v).astype(np.float64)
        targets = rearrange(calibration, "l c h w -> (l h w) c")
        g, *_ = np.linalg.lstsq(values, targets, rcond=None)
        return as_tensor(-gain * g @ np.linalg.pinv(self.w_final.astype(np.float64)))

    # ==================== Stages ====================

    def _encode_frame(self, x: Tensor, t: int) -> Tuple[Tensor, Tensor]:
        """Conv stack of one frame; returns (full-res tokens, half-res tokens)."""
        h = conv2d(group_norm(x, 1), self.conv_in, padding=1, bias=self.conv_in_bias)
        h = h + self.time_table[t][:, None, None]
        h = h + conv2d(silu(group_norm(h, GN_GROUPS)), self.res_full, padding=1, bias=self.res_full_bias)
        half = avg_pool2d(h, 2)
        half = half + conv2d(silu(group_norm(half, GN_GROUPS)), self.res_half, padding=1, bias=self.res_half_bias)
        return rearrange(h, "c h w -> (h w) c"), rearrange(half, "c h w -> (h w) c")

    def _prepare_refs(
        self,
        refs: Sequence[RefContext],
        block: AttentionBlock,
        resolution: Tuple[int, int],
        full_resolution: Tuple[int, int]
    ) -> List[_PreparedRef]:
        h, w = resolution
        factor = full_resolution[0] // h
        prepared = []
        for ctx in refs:
            if ctx.box is None:
                mask = full_mask(h, w)
            else:
                # coarse masks must stay inside the full-resolution box after upsampling
                mask = interior_mask(rasterize_mask(ctx.box, *full_resolution), factor)
            prepared.append(_PreparedRef(ctx=ctx, mask=mask, kv=project_reference(ctx, block.ref)))
        return prepared

    def _cross_step(
        self,
        tokens: List[Tensor],
        resolution: Tuple[int, int],
        block: AttentionBlock,
        plan: PromptPlan,
        conditional: bool,
        frame_offset: int,
        workers: int,
        trace: Optional[Dict[str, Tensor]]
    ) -> List[Tensor]:
        queries = [FrameQuery(matmul(layer_norm(tk), block.cross.w_q), resolution) for tk in tokens]
        if conditional:
            local = {} if trace is not None else None
            attn = spatio_temporal_cross_attention(
                queries, plan, block.cross, frame_offset=frame_offset, workers=workers, trace=local
            )
            if trace is not None:
                trace.update({f"{block.name}/{k}": v for k, v in local.items()})
        else:
            null = null_embedding(block.cross.d_context)
            attn = temporal_concat(map_frames(lambda q: cross_attention(q, null, block.cross), queries, workers))
        return [as_tensor(tk + matmul(attn[i], block.w_out)) for i, tk in enumerate(tokens)]

    def _ref_step(
        self,
        tokens: List[Tensor],
        resolution: Tuple[int, int],
        block: AttentionBlock,
        prepared: List[_PreparedRef],
        workers: int
    ) -> List[Tensor]:
        if not prepared:
            return tokens

        def run(tk: Tensor) -> Tensor:
            q = FrameQuery(matmul(layer_norm(tk), block.ref.w_q), resolution)
            total = np.zeros((tk.shape[0], block.ref.d), dtype=np.float64)
            for p in prepared:
                total += reference_frame_attention(q, p.ctx, p.mask, block.ref, kv=p.kv)
            return as_tensor(tk + matmul(total, block.w_ref_out))

        return map_frames(run, tokens, workers)

    def _attention_block(self, tokens, resolution, full_resolution, block, plan, refs, conditional,
                         frame_offset, workers, trace):
        prepared = self._prepare_refs(refs, block, resolution, full_resolution)
        if self.refattn_position == "before":
            tokens = self._ref_step(tokens, resolution, block, prepared, workers)
        tokens = self._cross_step(tokens, resolution, block, plan, conditional, frame_offset, workers, trace)
        if self.refattn_position == "after":
            tokens = self._ref_step(tokens, resolution, block, prepared, workers)
        return tokens

    # ==================== Public API ====================

    def predict_noise(
        self,
        x_t: Tensor,
        t: int,
        plan: PromptPlan,
        refs: Optional[Sequence[RefContext]] = None,
        conditional: bool = True,
        frame_offset: Optional[int] = None,
        workers: int = None,
        trace: Optional[Dict[str, Tensor]] = None
    ) -> Tensor:
        """
        Predict the noise in ``x_t``.

        Args:
            x_t: Noisy latents of shape [frames, 4, h, w]
            t: Diffusion timestep
            plan: Validated prompt plan
            refs: Reference contexts applied in both guidance branches
            conditional: Use the plan prompts (True) or the empty-prompt embedding
            frame_offset: Plan frame of ``x_t[0]``; None requires the full plan length
            workers: Thread count for per-frame work (default from config)
            trace: Optional dict receiving the cross-attention intermediates

        Returns:
            Noise prediction with the shape of ``x_t``

        Raises:
            DimensionError: If the latents do not fit the model or the plan
            TimestepRangeError: If ``t`` is outside the schedule
        """
        x_t = np.asarray(x_t)
        if x_t.ndim != 4 or x_t.shape[1] != self.latent_channels:
            raise DimensionError(f"latents must be [frames, {self.latent_channels}, h, w], got {x_t.shape}")
        frames, _, height, width = x_t.shape
        if height % 2 or width % 2:
            raise DimensionError(f"latent size {height}x{width} must be even")
        if frame_offset is None:
            if frames != plan.total_frames:
                raise DimensionError(f"latents hold {frames} frames, plan has {plan.total_frames}")
            frame_offset = 0
        elif frame_offset < 0 or frame_offset + frames > plan.total_frames:
            raise DimensionError(
                f"frames [{frame_offset}, {frame_offset + frames}) exceed plan length {plan.total_frames}"
            )
        if not 0 <= t < self.time_table.shape[0]:
            raise TimestepRangeError(f"timestep {t} outside [0, {self.time_table.shape[0]})")

        workers = workers or config.runtime.workers
        refs = list(refs or [])

        encoded = map_frames(lambda x: self._encode_frame(x, t), list(x_t), workers)
        skips = [e[0] for e in encoded]
        half_res = (height // 2, width // 2)
        halves = self._attention_block(
            [e[1] for e in encoded], half_res, (height, width), self.half_block,
            plan, refs, conditional, frame_offset, workers, trace
        )

        full = []
        for skip, hf in zip(skips, halves):
            up = upsample_nearest(rearrange(hf, "(h w) c -> c h w", h=half_res[0]))
            full.append(as_tensor(skip + rearrange(up, "c h w -> (h w) c")))
        full = self._attention_block(
            full, (height, width), (height, width), self.full_block,
            plan, refs, conditional, frame_offset, workers, trace
        )

        eps = [rearrange(matmul(tk, self.w_final), "(h w) c -> c h w", h=height) for tk in full]
        return as_tensor(np.stack(eps, axis=0))


_model: Optional[ToyDenoiser] = None


def get_model() -> ToyDenoiser:
    """Get the default denoiser instance."""
    global _model
    if _model is None:
        _model = ToyDenoiser()
    return _model


def denoise(
    x_t: Tensor,
    t: int,
    plan: PromptPlan,
    refs: Optional[Sequence[RefContext]] = None,
    model: ToyDenoiser = None,
    conditional: bool = True,
    frame_offset: Optional[int] = None
) -> Tensor:
    """Noise prediction of ``model`` (default instance when omitted)."""
    model = model or get_model()
    return model.predict_noise(x_t, t, plan, refs, conditional=conditional, frame_offset=frame_offset)
