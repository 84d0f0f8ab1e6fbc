"""Motion-based clip filtering and caption preparation for training data."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from .config import FlowFilterConfig, config
from .llm_client import TextClient, request_with_retry
from .media import read_pgm_frames
from .templates import render_recaption_request

logger = logging.getLogger(__name__)

MIN_FRAME_SIZE = 8
POLY_N = 5
POLY_SIGMA = 1.1
PYR_SCALE = 0.5

CONSOLIDATION_HEADER = (
    "Consolidate the following captions of one video into a single caption of "
    "40 to 50 words. Keep the elements the captions share, resolve conflicts in "
    "favour of the original caption and add concrete details."
)


class FilterError(ValueError):
    """Raised on invalid flow or filter input."""
    pass


class ManifestError(FilterError):
    """Raised when a manifest line is malformed."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"manifest line {line_number}: {message}")


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-pixel displacement from one frame to the next, in pixels."""
    dx: np.ndarray = field(repr=False)
    dy: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx.astype(np.float64), self.dy.astype(np.float64))


@dataclass
class ClipVerdict:
    """Filtering decision for one clip."""
    clip_id: str
    score: float
    kept: bool
    reason: str  # 'below_s1' | 'above_s2' | 'in_range'


@dataclass
class ManifestEntry:
    """One clip listed in a manifest."""
    clip_id: str
    frames: List[str]
    caption: str = ""
    line_number: int = 0
    base_dir: str = "."

    def frame_paths(self) -> List[Path]:
        """Frame paths resolved against the manifest directory."""
        return [Path(self.base_dir) / p for p in self.frames]


# ==================== Optical flow ====================

def _as_gray_u8(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.dtype == np.uint8:
        return frame
    return np.clip(np.rint(frame), 0, 255).astype(np.uint8)


def optical_flow(
    a: np.ndarray,
    b: np.ndarray,
    levels: int = None,
    window: int = None,
    iterations: int = None
) -> FlowField:
    """
    Dense Farnebäck flow from ``a`` to ``b``.

    Args:
        a: Grayscale frame [h, w]
        b: Grayscale frame of the same size
        levels: Pyramid levels including full resolution (default from config)
        window: Averaging window size (default from config)
        iterations: Iterations per level (default from config)

    Returns:
        FlowField matching the frame shape

    Raises:
        FilterError: If frames differ in size or are smaller than 8x8
    """
    levels = config.flow.pyramid_levels if levels is None else levels
    window = config.flow.window if window is None else window
    iterations = config.flow.iterations if iterations is None else iterations
    if levels < 1 or window < 1 or iterations < 1:
        raise FilterError(f"levels, window and iterations must be >= 1, got {levels}, {window}, {iterations}")

    a = _as_gray_u8(a)
    b = _as_gray_u8(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise FilterError(f"frames must be equal-size grayscale images, got {a.shape} and {b.shape}")
    if a.shape[0] < MIN_FRAME_SIZE or a.shape[1] < MIN_FRAME_SIZE:
        raise FilterError(f"frames must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}, got {a.shape}")
    if np.array_equal(a, b):
        # Farneback leaves sub-pixel residue on identical input
        zero = np.zeros(a.shape, dtype=np.float32)
        return FlowField(dx=zero, dy=zero.copy())

    # OpenCV counts pyramid levels beyond the base image
    flow = cv2.calcOpticalFlowFarneback(
        a, b, None,
        pyr_scale=PYR_SCALE,
        levels=levels - 1,
        winsize=window,
        iterations=iterations,
        poly_n=POLY_N,
        poly_sigma=POLY_SIGMA,
        flags=0,
    )
    if not np.all(np.isfinite(flow)):
        raise FilterError("optical flow produced non-finite values")
    return FlowField(dx=flow[..., 0].copy(), dy=flow[..., 1].copy())


def flow_score(frames: Sequence[np.ndarray], cfg: FlowFilterConfig = None) -> float:
    """
    Motion score of a clip.

    Mean over consecutive frame pairs of the mean per-pixel flow magnitude,
    divided by the frame width when normalization is on.

    Raises:
        FilterError: If fewer than 2 frames are given
    """
    cfg = cfg or config.flow
    if len(frames) < 2:
        raise FilterError(f"flow_score needs at least 2 frames, got {len(frames)}")
    pair_means = [
        float(optical_flow(a, b, cfg.pyramid_levels, cfg.window, cfg.iterations).magnitude().mean())
        for a, b in zip(frames[:-1], frames[1:])
    ]
    score = float(np.mean(pair_means))
    if cfg.normalize:
        score /= np.asarray(frames[0]).shape[1]
    return score


def judge(clip_id: str, score: float, cfg: FlowFilterConfig = None) -> ClipVerdict:
    """Verdict for one score; both bounds are inclusive."""
    cfg = cfg or config.flow
    if score < cfg.s1:
        return ClipVerdict(clip_id, score, False, "below_s1")
    if score > cfg.s2:
        return ClipVerdict(clip_id, score, False, "above_s2")
    return ClipVerdict(clip_id, score, True, "in_range")


def filter_clips(scores: Sequence[Tuple[str, float]], cfg: FlowFilterConfig = None) -> List[ClipVerdict]:
    """Keep clips whose score lies in [s1, s2]; one verdict per input, in order."""
    return [judge(clip_id, score, cfg) for clip_id, score in scores]


# ==================== Manifests ====================

def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """
    Parse a JSON-lines manifest of ``{"id", "frames", "caption"}`` objects.

    Frame paths are resolved against the manifest's directory. Blank lines are
    skipped.

    Raises:
        ManifestError: On the first malformed line
    """
    path = Path(path)
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(line_number, f"invalid JSON ({e.msg})")
            if not isinstance(doc, dict):
                raise ManifestError(line_number, "expected a JSON object")
            clip_id = doc.get("id")
            frames = doc.get("frames")
            caption = doc.get("caption", "")
            if not isinstance(clip_id, str) or not clip_id:
                raise ManifestError(line_number, "'id' must be a nonempty string")
            if not isinstance(frames, list) or not all(isinstance(p, str) for p in frames):
                raise ManifestError(line_number, "'frames' must be a list of paths")
            if len(frames) < 2:
                raise ManifestError(line_number, f"clip '{clip_id}' needs at least 2 frames")
            if not isinstance(caption, str):
                raise ManifestError(line_number, "'caption' must be a string")
            entries.append(ManifestEntry(
                clip_id=clip_id,
                frames=frames,
                caption=caption,
                line_number=line_number,
                base_dir=str(path.parent),
            ))
    return entries


def _score_entry(entry: ManifestEntry, cfg: FlowFilterConfig) -> float:
    return flow_score(read_pgm_frames(entry.frame_paths()), cfg)


def score_manifest(
    path: Union[str, Path],
    cfg: FlowFilterConfig = None,
    workers: int = None,
    show_progress: bool = None
) -> Tuple[List[ManifestEntry], List[ClipVerdict]]:
    """
    Score and filter every clip of a manifest.

    Clips are scored in parallel threads; verdicts follow manifest order.

    Returns:
        Tuple of (entries, verdicts)
    """
    cfg = cfg or config.flow
    workers = workers or config.runtime.workers
    show_progress = config.runtime.show_progress if show_progress is None else show_progress

    entries = read_manifest(path)
    logger.info(f"Scoring {len(entries)} clips from {path} with {workers} worker(s)")
    scores = Parallel(n_jobs=workers, backend="threading")(
        delayed(_score_entry)(entry, cfg)
        for entry in tqdm(entries, desc="clips", disable=not show_progress)
    )
    verdicts = filter_clips([(e.clip_id, s) for e, s in zip(entries, scores)], cfg)
    kept = sum(v.kept for v in verdicts)
    logger.info(f"Kept {kept}/{len(verdicts)} clips (s1={cfg.s1}, s2={cfg.s2})")
    return entries, verdicts


def verdict_record(entry: ManifestEntry, verdict: ClipVerdict, recaption: Optional[str] = None) -> dict:
    """Manifest object extended with the verdict fields, plus ``recaption`` when given."""
    record = {
        "id": entry.clip_id,
        "frames": entry.frames,
        "caption": entry.caption,
        "score": verdict.score,
        "kept": verdict.kept,
        "reason": verdict.reason,
    }
    if recaption is not None:
        record["recaption"] = recaption
    return record


def write_verdicts(
    path: Union[str, Path],
    entries: Sequence[ManifestEntry],
    verdicts: Sequence[ClipVerdict],
    recaptions: Optional[Dict[str, str]] = None
) -> Path:
    """Write one verdict line per manifest entry."""
    path = Path(path)
    recaptions = recaptions or {}
    with open(path, "w", encoding="utf-8") as f:
        for entry, verdict in zip(entries, verdicts):
            record = verdict_record(entry, verdict, recaptions.get(entry.clip_id))
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


# ==================== Captions ====================

def build_recaption_request(original_caption: str) -> str:
    """
    Recaption request for one short caption.

    Raises:
        ValueError: If the caption is empty
    """
    if not original_caption or not original_caption.strip():
        raise ValueError("caption must be nonempty")
    return render_recaption_request(original_caption)


def build_consolidation_request(captions: Sequence[str], original: Optional[str] = None) -> str:
    """Numbered captions followed by the original caption, under one instruction."""
    if not captions:
        raise ValueError("at least one caption is required")
    lines = [CONSOLIDATION_HEADER, ""]
    lines += [f"Caption {i}: {c}" for i, c in enumerate(captions, start=1)]
    if original:
        lines.append(f"Original Caption: {original}")
    lines.append("Consolidated Caption: ")
    return "\n".join(lines)


def consolidate_captions(
    captions: Sequence[str],
    client: TextClient,
    original: Optional[str] = None,
    retries: int = None
) -> str:
    """
    Merge several captions of one clip through a text-generation client.

    Returns:
        The client's response, verbatim

    Raises:
        ClientError: When every attempt fails
    """
    return request_with_retry(client, build_consolidation_request(captions, original), retries)


def recaption_clip(caption: str, client: TextClient, retries: int = None) -> str:
    """
    Expand one short caption, then consolidate the expansion with the original.

    Returns:
        The consolidated caption, stripped

    Raises:
        ValueError: If the caption is empty
        ClientError: When every attempt of either request fails
    """
    detailed = request_with_retry(client, build_recaption_request(caption), retries).strip()
    return consolidate_captions([detailed], client, original=caption, retries=retries).strip()


def recaption_kept(
    entries: Sequence[ManifestEntry],
    verdicts: Sequence[ClipVerdict],
    client: TextClient,
    retries: int = None
) -> Dict[str, str]:
    """
    Recaption every kept clip, in manifest order.

    Clips without a caption are skipped.

    Returns:
        Mapping of clip id to its new caption
    """
    recaptions = {}
    for entry, verdict in zip(entries, verdicts):
        if not verdict.kept:
            continue
        if not entry.caption.strip():
            logger.warning(f"Clip '{entry.clip_id}' has no caption to recaption")
            continue
        recaptions[entry.clip_id] = recaption_clip(entry.caption, client, retries)
    logger.info(f"Recaptioned {len(recaptions)} kept clip(s)")
    return recaptions


def summarize(verdicts: Sequence[ClipVerdict]) -> dict:
    """Counts per reason plus kept/total."""
    counts = {"total": len(verdicts), "kept": sum(v.kept for v in verdicts)}
    for v in verdicts:
        counts[v.reason] = counts.get(v.reason, 0) + 1
    return counts

