"""Command bodies behind the CLI; each returns a process exit code."""

import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Union

from .config import SamplerConfig, config
from .dataprep import (
    FilterError,
    ManifestError,
    build_recaption_request,
    recaption_kept,
    score_manifest,
    summarize,
    write_verdicts,
)
from .decomposer import DecomposeError, decompose_story
from .denoiser import ToyDenoiser, get_model
from .llm_client import ClientError, make_client, request_with_retry
from .media import write_preview_sheet
from .numerics import Tensor, as_tensor, save_tensor
from .plan import PlanError, PromptPlan, load_plan, serialize_plan, validate_plan
from .sampler import SamplingError, check_chunking, generate, generate_autoregressive, noise_stream
from .schedule import linear_beta_schedule

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_GENERATION = 4
EXIT_CLIENT = 5

DUMP_TAG = 2


def _fail(message: str, code: int) -> int:
    print(f"✗ {message}", file=sys.stderr)
    return code


def plan_summary(plan: PromptPlan) -> str:
    """One header line plus one line per segment."""
    lines = [f"{len(plan.segments)} segments, {plan.total_frames} frames (alpha={plan.alpha})"]
    for seg in plan.segments:
        names = ", ".join(obj.prompt for obj in seg.sub_objects)
        lines.append(f"  frame {seg.start_frame:>4}: {seg.global_prompt!r} [{names}]")
    return "\n".join(lines)


# ==================== plan validate ====================

def cmd_plan_validate(path: Union[str, Path]) -> int:
    try:
        plan = load_plan(path)
    except OSError as e:
        return _fail(f"Cannot read plan: {e}", EXIT_IO)
    except PlanError as e:
        return _fail(f"Invalid plan: {e}", EXIT_VALIDATION)
    print(f"✓ {plan_summary(plan)}")
    return EXIT_OK


# ==================== generate ====================

def render_video(
    plan: PromptPlan,
    sampler_cfg: SamplerConfig,
    chunk_frames: Optional[int] = None,
    model: ToyDenoiser = None
) -> Tensor:
    """Library call behind ``generate``: single-shot, or auto-regressive when chunked."""
    sched = linear_beta_schedule()
    if chunk_frames:
        return generate_autoregressive(plan, chunk_frames, sampler_cfg, sched, model)
    return generate(plan, sampler_cfg, sched, model)


def cmd_generate(
    plan_path: Union[str, Path],
    out: Union[str, Path],
    seed: Optional[int] = None,
    ddim_steps: Optional[int] = None,
    eta: Optional[float] = None,
    guidance_scale: Optional[float] = None,
    alpha: Optional[float] = None,
    chunk_frames: Optional[int] = None,
    preview: Optional[Union[str, Path]] = None
) -> int:
    try:
        plan = load_plan(plan_path)
        if chunk_frames:
            check_chunking(plan, chunk_frames)
        if alpha is not None:
            plan = validate_plan(dataclasses.replace(plan, alpha=alpha))
        base = config.sampler
        sampler_cfg = SamplerConfig(
            ddim_steps=base.ddim_steps if ddim_steps is None else ddim_steps,
            eta=base.eta if eta is None else eta,
            guidance_scale=base.guidance_scale if guidance_scale is None else guidance_scale,
            seed=base.seed if seed is None else seed,
        )
    except OSError as e:
        return _fail(f"Cannot read plan: {e}", EXIT_IO)
    except (PlanError, ValueError) as e:
        return _fail(f"Invalid input: {e}", EXIT_VALIDATION)

    try:
        video = render_video(plan, sampler_cfg, chunk_frames)
    except (SamplingError, ArithmeticError, ValueError, IndexError) as e:
        return _fail(f"Generation failed: {e}", EXIT_GENERATION)

    out = Path(out)
    preview = Path(preview) if preview else out.with_suffix(".pgm")
    try:
        save_tensor(video, out)
        write_preview_sheet(video, preview)
    except OSError as e:
        return _fail(f"Cannot write output: {e}", EXIT_IO)
    print(f"✓ Generated {video.shape[0]} frames {tuple(video.shape[1:])} -> {out} (preview {preview})")
    return EXIT_OK


# ==================== filter ====================

def cmd_filter(
    manifest: Union[str, Path],
    out: Union[str, Path],
    s1: Optional[float] = None,
    s2: Optional[float] = None,
    normalize: Optional[bool] = None,
    workers: Optional[int] = None,
    recaption: bool = False,
    client_kind: str = "http",
    client_url: Optional[str] = None,
    fixture: Optional[Union[str, Path]] = None
) -> int:
    base = config.flow
    try:
        cfg = dataclasses.replace(
            base,
            s1=base.s1 if s1 is None else s1,
            s2=base.s2 if s2 is None else s2,
            normalize=base.normalize if normalize is None else normalize,
        )
    except ValueError as e:
        return _fail(f"Invalid thresholds: {e}", EXIT_VALIDATION)

    try:
        entries, verdicts = score_manifest(manifest, cfg, workers=workers)
    except ManifestError as e:
        return _fail(str(e), EXIT_VALIDATION)
    except OSError as e:
        return _fail(f"I/O error: {e}", EXIT_IO)
    except (FilterError, ValueError) as e:
        return _fail(f"Invalid clip: {e}", EXIT_VALIDATION)

    recaptions = None
    if recaption:
        try:
            client = make_client(client_kind, base_url=client_url, fixture=fixture)
            recaptions = recaption_kept(entries, verdicts, client)
        except (ClientError, ValueError) as e:
            return _fail(f"Recaption client failed: {e}", EXIT_CLIENT)

    try:
        write_verdicts(out, entries, verdicts, recaptions)
    except OSError as e:
        return _fail(f"I/O error: {e}", EXIT_IO)

    counts = summarize(verdicts)
    detail = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()) if k not in ("total", "kept"))
    print(f"kept {counts['kept']}/{counts['total']} ({detail})", file=sys.stderr)
    return EXIT_OK


# ==================== decompose ====================

def cmd_decompose(
    story: str,
    total_frames: int,
    out: Union[str, Path],
    client_kind: str = "http",
    client_url: Optional[str] = None,
    fixture: Optional[Union[str, Path]] = None,
    alpha: Optional[float] = None
) -> int:
    try:
        client = make_client(client_kind, base_url=client_url, fixture=fixture)
    except (ClientError, ValueError) as e:
        return _fail(f"Cannot create planner client: {e}", EXIT_CLIENT)
    try:
        plan = decompose_story(story, total_frames, client, alpha=alpha)
    except (ClientError, DecomposeError) as e:
        return _fail(f"Planner client failed: {e}", EXIT_CLIENT)
    except PlanError as e:
        return _fail(f"Planned layout is invalid: {e}", EXIT_VALIDATION)
    except ValueError as e:
        return _fail(f"Invalid input: {e}", EXIT_VALIDATION)

    try:
        Path(out).write_text(serialize_plan(plan), encoding="utf-8")
    except OSError as e:
        return _fail(f"Cannot write plan: {e}", EXIT_IO)
    print(f"✓ {plan_summary(plan)}")
    return EXIT_OK


# ==================== attn-dump ====================

def dump_attention(
    plan: PromptPlan,
    timestep: int,
    seed: int,
    model: ToyDenoiser = None
) -> dict:
    """Cross-attention intermediates of one conditional prediction on seeded latents."""
    model = model or get_model()
    shape = (plan.total_frames,) + tuple(model.latent_shape)
    x_t = as_tensor(noise_stream(seed, 0, DUMP_TAG, timestep).standard_normal(shape))
    trace = {}
    model.predict_noise(x_t, timestep, plan, conditional=True, trace=trace)
    return trace


def cmd_attn_dump(
    plan_path: Union[str, Path],
    out_dir: Union[str, Path],
    timestep: int = 999,
    seed: Optional[int] = None
) -> int:
    try:
        plan = load_plan(plan_path)
    except OSError as e:
        return _fail(f"Cannot read plan: {e}", EXIT_IO)
    except PlanError as e:
        return _fail(f"Invalid plan: {e}", EXIT_VALIDATION)

    try:
        trace = dump_attention(plan, timestep, config.sampler.seed if seed is None else seed)
    except (IndexError, ValueError, ArithmeticError) as e:
        return _fail(f"Attention dump failed: {e}", EXIT_GENERATION)

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, tensor in sorted(trace.items()):
            save_tensor(tensor, out_dir / f"{name.replace('/', '_')}.bin")
    except OSError as e:
        return _fail(f"Cannot write dump: {e}", EXIT_IO)
    logger.debug(f"Dumped tensors: {sorted(trace)}")
    print(f"✓ Wrote {len(trace)} tensors to {out_dir}")
    return EXIT_OK


# ==================== recaption ====================

def cmd_recaption(
    caption: str,
    send: bool = False,
    client_kind: str = "http",
    client_url: Optional[str] = None,
    fixture: Optional[Union[str, Path]] = None
) -> int:
    try:
        request = build_recaption_request(caption)
    except ValueError as e:
        return _fail(f"Invalid caption: {e}", EXIT_VALIDATION)
    if not send:
        sys.stdout.write(request)
        return EXIT_OK
    try:
        client = make_client(client_kind, base_url=client_url, fixture=fixture)
        print(request_with_retry(client, request))
    except (ClientError, ValueError) as e:
        return _fail(f"Recaption client failed: {e}", EXIT_CLIENT)
    return EXIT_OK
