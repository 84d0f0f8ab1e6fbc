"""DDIM sampling with classifier-free guidance, single-shot and auto-regressive."""

import logging
from typing import List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .config import SamplerConfig, config
from .denoiser import get_model
from .encoders import RefContext, encode_reference
from .numerics import DimensionError, NumericalDomainError, Tensor, as_tensor, cosine_similarity, group_norm
from .plan import FRAME_MULTIPLE, PromptPlan, rasterize_mask, segment_for_frame
from .schedule import NoiseSchedule, linear_beta_schedule

logger = logging.getLogger(__name__)

INIT_TAG = 0
STEP_TAG = 1
RADICAND_TOLERANCE = 1e-12


class SamplingError(RuntimeError):
    """Raised when the sampling loop cannot continue."""
    pass


def noise_stream(seed: int, chunk: int, tag: int, timestep: int) -> np.random.Generator:
    """Counter-based random stream keyed by (seed, chunk, purpose, timestep)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chunk, tag, timestep])))


def ddim_timesteps(sched: NoiseSchedule, n: int) -> List[int]:
    """Descending, uniformly spaced timesteps from ``steps - 1`` down to 0."""
    if not 1 <= n <= sched.steps:
        raise ValueError(f"ddim_steps must lie in [1, {sched.steps}], got {n}")
    if n == 1:
        return [sched.steps - 1]
    return [int(v) for v in np.round(np.linspace(sched.steps - 1, 0, n))]


def ddim_step(
    x_t: Tensor,
    eps_hat: Tensor,
    t: int,
    t_prev: int,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    z: Optional[Tensor] = None
) -> Tensor:
    """
    One DDIM update from ``t`` to ``t_prev``.

    ``t_prev = -1`` targets the clean sample (abar = 1); no noise is added
    on that step or when eta is zero.

    Args:
        x_t: Current latents
        eps_hat: Predicted noise, same shape as ``x_t``
        t: Current timestep
        t_prev: Next timestep, strictly smaller than ``t``
        cfg: Sampler settings (eta)
        sched: Noise schedule
        rng: Stream the fresh noise is drawn from
        z: Explicit fresh noise, overriding ``rng``

    Returns:
        Latents at ``t_prev``

    Raises:
        NumericalDomainError: If sigma^2 exceeds 1 - abar_prev
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise DimensionError(f"x_t {x_t.shape} and eps_hat {eps_hat.shape} differ")
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be smaller than t ({t})")

    abar_t = sched.alpha_bar(t)
    abar_prev = sched.alpha_bar(t_prev)

    x0_pred = (x_t - np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(abar_t)
    sigma = cfg.eta * np.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * np.sqrt(1.0 - abar_t / abar_prev)
    radicand = 1.0 - abar_prev - sigma ** 2
    if radicand < -RADICAND_TOLERANCE:
        raise NumericalDomainError(f"negative radicand {radicand:.3e} in DDIM step {t} -> {t_prev}")
    radicand = max(radicand, 0.0)

    x_prev = np.sqrt(abar_prev) * x0_pred + np.sqrt(radicand) * eps_hat
    if sigma > 0.0 and t_prev >= 0:
        if z is None:
            if rng is None:
                raise SamplingError("stochastic DDIM step needs a random stream")
            z = rng.standard_normal(x_t.shape)
        x_prev = x_prev + sigma * np.asarray(z, dtype=np.float64)

    if not np.all(np.isfinite(x_prev)):
        raise NumericalDomainError(f"DDIM step {t} -> {t_prev} produced non-finite latents")
    return as_tensor(x_prev)


def cfg_combine(eps_cond: Tensor, eps_uncond: Tensor, scale: float) -> Tensor:
    """Classifier-free guidance: ``uncond + scale * (cond - uncond)``."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise DimensionError(f"eps_cond {eps_cond.shape} and eps_uncond {eps_uncond.shape} differ")
    cond = eps_cond.astype(np.float64)
    uncond = eps_uncond.astype(np.float64)
    return as_tensor(uncond + scale * (cond - uncond))


def generate(
    plan: PromptPlan,
    cfg: SamplerConfig = None,
    sched: NoiseSchedule = None,
    model=None,
    refs: Optional[Sequence[RefContext]] = None,
    chunk_index: int = 0,
    frame_offset: int = 0,
    frames: int = None,
    show_progress: bool = None
) -> Tensor:
    """
    Sample a latent video for ``plan``.

    Starts from seeded Gaussian latents and runs ``cfg.ddim_steps`` steps of
    conditional + unconditional prediction, guidance and a DDIM update.

    Args:
        plan: Validated prompt plan
        cfg: Sampler settings (default from config)
        sched: Noise schedule (default from config)
        model: Noise predictor exposing ``latent_shape`` and ``predict_noise``
        refs: Reference contexts for reference frame attention
        chunk_index: Chunk number mixed into the random streams
        frame_offset: Plan frame of the first generated frame
        frames: Number of frames (default: the rest of the plan)
        show_progress: Show a progress bar (default from config)

    Returns:
        Latents of shape [frames, 4, h, w]
    """
    cfg = cfg or config.sampler
    sched = sched or linear_beta_schedule()
    model = model or get_model()
    show_progress = config.runtime.show_progress if show_progress is None else show_progress
    frames = plan.total_frames - frame_offset if frames is None else frames
    if frames < 1 or frame_offset < 0 or frame_offset + frames > plan.total_frames:
        raise ValueError(f"frames [{frame_offset}, {frame_offset + frames}) outside plan of {plan.total_frames}")

    whole_plan = frame_offset == 0 and frames == plan.total_frames
    offset_arg = None if whole_plan else frame_offset
    timesteps = ddim_timesteps(sched, cfg.ddim_steps)

    shape = (frames,) + tuple(model.latent_shape)
    x = as_tensor(noise_stream(cfg.seed, chunk_index, INIT_TAG, 0).standard_normal(shape))

    logger.info(
        f"Sampling chunk {chunk_index}: {frames} frames from frame {frame_offset}, "
        f"{len(timesteps)} steps, seed {cfg.seed}, refs {len(refs or [])}"
    )
    iterator = tqdm(timesteps, desc=f"chunk {chunk_index}", disable=not show_progress, leave=False)
    for i, t in enumerate(iterator):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else -1
        eps_cond = model.predict_noise(x, t, plan, refs, conditional=True, frame_offset=offset_arg)
        if cfg.guidance_scale == 1.0:
            eps = eps_cond
        else:
            eps_uncond = model.predict_noise(x, t, plan, refs, conditional=False, frame_offset=offset_arg)
            eps = cfg_combine(eps_cond, eps_uncond, cfg.guidance_scale)
        x = ddim_step(x, eps, t, t_prev, cfg, sched, rng=noise_stream(cfg.seed, chunk_index, STEP_TAG, t))
        logger.debug(f"step {i}: t={t} -> {t_prev}, |x|max={float(np.abs(x).max()):.4g}")
    return x


def build_chunk_references(
    prev_chunk: Tensor,
    plan: PromptPlan,
    next_start: int,
    model
) -> List[RefContext]:
    """
    Encode the tail of a finished chunk as reference contexts for the next one.

    The last ``l`` frames are standardized per frame and encoded once per
    sub-object of the segment they belong to. Each context keeps the object's
    region in the reference frames and carries the region of the same-prompt
    object in the next frames (the previous region when the prompt is gone).
    """
    l = config.reference.frames
    prev_chunk = np.asarray(prev_chunk)
    if prev_chunk.shape[0] < l:
        raise ValueError(f"previous chunk holds {prev_chunk.shape[0]} frames, need {l}")
    _, _, height, width = prev_chunk.shape
    tail = as_tensor(np.stack([group_norm(f, 1) for f in prev_chunk[-l:]]))

    prev_segment = segment_for_frame(plan, next_start - 1)
    next_segment = segment_for_frame(plan, next_start)
    next_boxes = {obj.prompt: obj.box for obj in next_segment.sub_objects}

    refs = []
    for obj in prev_segment.sub_objects:
        refs.append(encode_reference(
            tail,
            model.reference_encoder,
            object_mask=rasterize_mask(obj.box, height, width),
            frame_start=next_start - l,
            box=next_boxes.get(obj.prompt, obj.box),
            prompt=obj.prompt,
        ))
    return refs


def check_chunking(plan: PromptPlan, chunk_frames: int) -> None:
    """Raise ValueError unless chunk_frames is a multiple of 8 dividing the plan length."""
    if chunk_frames < FRAME_MULTIPLE or chunk_frames % FRAME_MULTIPLE:
        raise ValueError(f"chunk_frames must be a positive multiple of {FRAME_MULTIPLE}, got {chunk_frames}")
    if plan.total_frames % chunk_frames:
        raise ValueError(f"total_frames {plan.total_frames} is not a multiple of chunk_frames {chunk_frames}")


def generate_autoregressive(
    plan: PromptPlan,
    chunk_frames: int,
    cfg: SamplerConfig = None,
    sched: NoiseSchedule = None,
    model=None,
    use_refs: bool = True,
    show_progress: bool = None
) -> Tensor:
    """
    Generate a long video chunk by chunk.

    Chunks do not overlap. Every chunk after the first is conditioned, through
    reference frame attention, on the last frames of the chunk before it.

    Raises:
        ValueError: If ``chunk_frames`` is not a multiple of 8 dividing the plan length
    """
    check_chunking(plan, chunk_frames)

    model = model or get_model()
    chunks = []
    for c in range(plan.total_frames // chunk_frames):
        start = c * chunk_frames
        refs = None
        if c > 0 and use_refs:
            refs = build_chunk_references(chunks[-1], plan, start, model)
            logger.info(f"Chunk {c}: {len(refs)} reference contexts from frames {start - config.reference.frames}..{start - 1}")
        chunks.append(generate(
            plan, cfg, sched, model,
            refs=refs, chunk_index=c, frame_offset=start, frames=chunk_frames,
            show_progress=show_progress,
        ))
    return as_tensor(np.concatenate(chunks, axis=0))


def boundary_similarity(video: Tensor, chunk_frames: int) -> float:
    """Mean cosine similarity between the last and first frames across chunk boundaries."""
    video = np.asarray(video)
    if chunk_frames < 1 or video.shape[0] <= chunk_frames:
        raise ValueError(f"video of {video.shape[0]} frames has no chunk boundary at stride {chunk_frames}")
    return float(np.mean([cosine_similarity(video[b - 1], video[b]) for b in range(chunk_frames, video.shape[0], chunk_frames)]))
