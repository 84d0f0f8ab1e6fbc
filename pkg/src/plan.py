"""Spatio-temporal prompt plans: data model, parsing, validation and region masks."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .config import config

logger = logging.getLogger(__name__)

FRAME_MULTIPLE = 8
BOX_TOLERANCE = 1e-9


class PlanError(ValueError):
    """Base class for plan errors."""
    pass


class PlanParseError(PlanError):
    """Raised when a plan document is malformed."""

    def __init__(self, message: str, location: Optional[str] = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class PlanValidationError(PlanError):
    """Raised when a plan violates an invariant; names the offending field."""

    def __init__(self, field_path: str, message: str):
        self.field_path = field_path
        super().__init__(f"{field_path}: {message}")


class FrameRangeError(IndexError):
    """Raised when a frame index falls outside the plan."""
    pass


@dataclass(frozen=True)
class Box:
    """Normalized axis-aligned box: top-left (x, y), width, height."""
    x: float
    y: float
    width: float
    height: float

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.width, self.height]

    def area(self) -> float:
        return self.width * self.height

    def intersection_area(self, other: "Box") -> float:
        dx = min(self.x + self.width, other.x + other.width) - max(self.x, other.x)
        dy = min(self.y + self.height, other.y + other.height) - max(self.y, other.y)
        return max(dx, 0.0) * max(dy, 0.0)


@dataclass(frozen=True)
class SubObject:
    """One entity of a segment with its own prompt and region."""
    prompt: str
    box: Box


@dataclass(frozen=True)
class TemporalSegment:
    """Frames from ``start_frame`` onward share one global prompt and sub-object layout."""
    start_frame: int
    global_prompt: str
    sub_objects: Tuple[SubObject, ...]


@dataclass(frozen=True)
class PromptPlan:
    """Temporally segmented, spatially decomposed prompt."""
    total_frames: int
    segments: Tuple[TemporalSegment, ...]
    alpha: float = 0.5
    allow_overlap: bool = False


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Binary spatial mask at a fixed resolution."""
    height: int
    width: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.uint8)
        if values.shape != (self.height, self.width):
            raise PlanValidationError(
                "mask.values", f"shape {values.shape} does not match {self.height}x{self.width}"
            )
        if np.any(values > 1):
            raise PlanValidationError("mask.values", "mask values must be 0 or 1")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegionMask):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))

    def flat(self) -> np.ndarray:
        """Row-major flattened mask as float32 column weights."""
        return self.values.reshape(-1).astype(np.float32)

    def count(self) -> int:
        return int(self.values.sum())


# ==================== Validation ====================

def _validate_box(box: Box, where: str) -> None:
    for name in ("x", "y"):
        value = getattr(box, name)
        if not 0.0 <= value <= 1.0:
            raise PlanValidationError(f"{where}.{name}", f"must lie in [0, 1], got {value}")
    for name in ("width", "height"):
        value = getattr(box, name)
        if not 0.0 < value <= 1.0:
            raise PlanValidationError(f"{where}.{name}", f"must lie in (0, 1], got {value}")
    if box.x + box.width > 1.0 + BOX_TOLERANCE:
        raise PlanValidationError(f"{where}.width", "x + width exceeds 1")
    if box.y + box.height > 1.0 + BOX_TOLERANCE:
        raise PlanValidationError(f"{where}.height", "y + height exceeds 1")


def validate_plan(plan: PromptPlan) -> PromptPlan:
    """
    Check every plan invariant.

    Returns:
        The same plan, for chaining

    Raises:
        PlanValidationError: On the first violated invariant
    """
    if plan.total_frames < 1:
        raise PlanValidationError("total_frames", f"must be positive, got {plan.total_frames}")
    if not 0.0 <= plan.alpha <= 1.0:
        raise PlanValidationError("alpha", f"must lie in [0, 1], got {plan.alpha}")
    if not plan.segments:
        raise PlanValidationError("segments", "at least one segment is required")

    previous = -1
    for i, segment in enumerate(plan.segments):
        where = f"segments[{i}]"
        if segment.start_frame % FRAME_MULTIPLE != 0:
            raise PlanValidationError(
                f"{where}.start_frame",
                f"start_frame not multiple of {FRAME_MULTIPLE} (got {segment.start_frame})"
            )
        if i == 0 and segment.start_frame != 0:
            raise PlanValidationError(f"{where}.start_frame", "first segment must start at frame 0")
        if segment.start_frame <= previous:
            raise PlanValidationError(f"{where}.start_frame", "start frames must be strictly increasing")
        if segment.start_frame >= plan.total_frames:
            raise PlanValidationError(
                f"{where}.start_frame",
                f"start_frame {segment.start_frame} not below total_frames {plan.total_frames}"
            )
        previous = segment.start_frame

        if not segment.sub_objects:
            raise PlanValidationError(f"{where}.objects", "at least one sub-object is required")
        for j, obj in enumerate(segment.sub_objects):
            if not obj.prompt.strip():
                raise PlanValidationError(f"{where}.objects[{j}].prompt", "prompt must be nonempty")
            _validate_box(obj.box, f"{where}.objects[{j}].box")

        for j, a in enumerate(segment.sub_objects):
            for k in range(j + 1, len(segment.sub_objects)):
                b = segment.sub_objects[k]
                if a.box.intersection_area(b.box) > BOX_TOLERANCE:
                    message = f"boxes of objects {j} and {k} overlap"
                    if not plan.allow_overlap:
                        raise PlanValidationError(f"{where}.objects", message)
                    logger.warning(f"{where}: {message} (allowed by allow_overlap)")
    return plan


# ==================== Parsing & serialization ====================

def _expect(value, kind, location: str):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise PlanParseError(f"expected {kind.__name__}, got {type(value).__name__}", location)
    return value


def plan_from_dict(doc: dict) -> PromptPlan:
    """Build and validate a plan from a decoded plan document."""
    _expect(doc, dict, "$")
    if "total_frames" not in doc:
        raise PlanParseError("missing key 'total_frames'", "$")
    if "segments" not in doc:
        raise PlanParseError("missing key 'segments'", "$")

    total_frames = _expect(doc["total_frames"], int, "$.total_frames")
    alpha = float(_expect(doc.get("alpha", config.attention.default_alpha), float, "$.alpha"))
    allow_overlap = _expect(doc.get("allow_overlap", False), bool, "$.allow_overlap")

    segments = []
    for i, seg in enumerate(_expect(doc["segments"], list, "$.segments")):
        loc = f"$.segments[{i}]"
        _expect(seg, dict, loc)
        for key in ("start_frame", "prompt", "objects"):
            if key not in seg:
                raise PlanParseError(f"missing key '{key}'", loc)
        objects = []
        for j, obj in enumerate(_expect(seg["objects"], list, f"{loc}.objects")):
            oloc = f"{loc}.objects[{j}]"
            _expect(obj, dict, oloc)
            if "prompt" not in obj or "box" not in obj:
                raise PlanParseError("object needs 'prompt' and 'box'", oloc)
            box = _expect(obj["box"], list, f"{oloc}.box")
            if len(box) != 4:
                raise PlanParseError(f"box needs 4 numbers, got {len(box)}", f"{oloc}.box")
            coords = [float(_expect(v, float, f"{oloc}.box[{k}]")) for k, v in enumerate(box)]
            objects.append(SubObject(_expect(obj["prompt"], str, f"{oloc}.prompt"), Box(*coords)))
        segments.append(TemporalSegment(
            start_frame=_expect(seg["start_frame"], int, f"{loc}.start_frame"),
            global_prompt=_expect(seg["prompt"], str, f"{loc}.prompt"),
            sub_objects=tuple(objects),
        ))

    # Normalize segment order before validation
    segments.sort(key=lambda s: s.start_frame)
    plan = PromptPlan(
        total_frames=total_frames,
        segments=tuple(segments),
        alpha=alpha,
        allow_overlap=allow_overlap,
    )
    return validate_plan(plan)


def parse_plan(text: str) -> PromptPlan:
    """
    Parse a UTF-8 JSON plan document.

    Raises:
        PlanParseError: Malformed document (with line/column or field path)
        PlanValidationError: Invariant violation (naming the field)
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise PlanParseError(e.msg, f"line {e.lineno}, column {e.colno}") from e
    return plan_from_dict(doc)


def plan_to_dict(plan: PromptPlan) -> dict:
    """Plan document form of ``plan``."""
    return {
        "total_frames": plan.total_frames,
        "alpha": plan.alpha,
        "allow_overlap": plan.allow_overlap,
        "segments": [
            {
                "start_frame": seg.start_frame,
                "prompt": seg.global_prompt,
                "objects": [
                    {"prompt": obj.prompt, "box": obj.box.as_list()}
                    for obj in seg.sub_objects
                ],
            }
            for seg in plan.segments
        ],
    }


def serialize_plan(plan: PromptPlan) -> str:
    """Render ``plan`` as a plan document."""
    return json.dumps(plan_to_dict(plan), indent=2, ensure_ascii=False) + "\n"


def load_plan(path: Union[str, Path]) -> PromptPlan:
    """Read and validate a plan document from disk."""
    text = Path(path).read_text(encoding="utf-8")
    plan = parse_plan(text)
    logger.info(f"Loaded plan {path}: {len(plan.segments)} segments, {plan.total_frames} frames")
    return plan


# ==================== Queries ====================

def segment_for_frame(plan: PromptPlan, frame: int) -> TemporalSegment:
    """Segment with the greatest start_frame <= ``frame``."""
    if not 0 <= frame < plan.total_frames:
        raise FrameRangeError(f"frame {frame} outside [0, {plan.total_frames})")
    current = plan.segments[0]
    for segment in plan.segments:
        if segment.start_frame > frame:
            break
        current = segment
    return current


def rasterize_mask(box: Box, height: int, width: int) -> RegionMask:
    """
    Rasterize a box by pixel-center membership.

    Cell (r, c) is set iff its center ((c + 0.5) / width, (r + 0.5) / height)
    lies in [x, x + width) x [y, y + height).
    """
    if height < 1 or width < 1:
        raise PlanValidationError("mask", f"dimensions must be >= 1, got {height}x{width}")
    cx = (np.arange(width, dtype=np.float64) + 0.5) / width
    cy = (np.arange(height, dtype=np.float64) + 0.5) / height
    cols = (cx >= box.x) & (cx < box.x + box.width)
    rows = (cy >= box.y) & (cy < box.y + box.height)
    return RegionMask(height, width, np.outer(rows, cols).astype(np.uint8))


def downsample_mask(mask: RegionMask, height: int, width: int) -> RegionMask:
    """Nearest-center resampling of ``mask`` to ``height`` x ``width``."""
    if height < 1 or width < 1:
        raise PlanValidationError("mask", f"dimensions must be >= 1, got {height}x{width}")
    if (height, width) == (mask.height, mask.width):
        return mask
    rows = np.minimum(((np.arange(height) + 0.5) * mask.height / height).astype(np.int64), mask.height - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * mask.width / width).astype(np.int64), mask.width - 1)
    return RegionMask(height, width, mask.values[np.ix_(rows, cols)])


def interior_mask(mask: RegionMask, factor: int = 2) -> RegionMask:
    """
    Min-pool ``mask`` by ``factor``: a coarse cell is set iff all of its
    ``factor`` x ``factor`` children are set.

    Nearest upsampling of the result never reaches outside ``mask``.
    """
    if factor < 1 or mask.height % factor or mask.width % factor:
        raise PlanValidationError(
            "mask", f"{mask.height}x{mask.width} is not divisible by factor {factor}"
        )
    h, w = mask.height // factor, mask.width // factor
    blocks = mask.values.reshape(h, factor, w, factor)
    return RegionMask(h, w, blocks.min(axis=(1, 3)))


def masks_for_segment(
    segment: TemporalSegment,
    height: int,
    width: int
) -> Tuple[List[RegionMask], RegionMask]:
    """
    Rasterize every sub-object box of a segment.

    Returns:
        Tuple of (per-object masks, coverage mask of their union)
    """
    masks = [rasterize_mask(obj.box, height, width) for obj in segment.sub_objects]
    union = np.zeros((height, width), dtype=np.uint8)
    for m in masks:
        union |= m.values
    return masks, RegionMask(height, width, union)


def full_mask(height: int, width: int) -> RegionMask:
    """All-ones mask."""
    return RegionMask(height, width, np.ones((height, width), dtype=np.uint8))
