"""Verbatim planner and recaption request templates."""

from functools import lru_cache
from pathlib import Path

RESOURCE_DIR = Path(__file__).parent / "resources"

# Slot marker shared by every template
INPUT_SLOT = "{the input user prompt}"

STORY_PLANNER = "story_planner"
REGION_PLANNER = "region_planner"
RECAPTION = "recaption"


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """Template text exactly as stored."""
    path = RESOURCE_DIR / f"{name}.txt"
    if not path.is_file():
        raise FileNotFoundError(f"template not found: {path}")
    return path.read_text(encoding="utf-8")


def render_template(name: str, text: str) -> str:
    """Substitute ``text`` into the template's input slot, nothing else."""
    if not text or not text.strip():
        raise ValueError(f"{name} input must be nonempty")
    return load_template(name).replace(INPUT_SLOT, text)


def render_story_request(story: str, total_frames: int) -> str:
    """Temporal planner request for a story and its frame count."""
    if total_frames < 1:
        raise ValueError(f"total_frames must be positive, got {total_frames}")
    return render_template(STORY_PLANNER, f"{story} Total frames: {total_frames}")


def render_region_request(prompt: str) -> str:
    """Spatial planner request for one segment prompt."""
    return render_template(REGION_PLANNER, prompt)


def render_recaption_request(caption: str) -> str:
    """Recaption request for one short caption."""
    return render_template(RECAPTION, caption)
