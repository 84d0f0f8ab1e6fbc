"""Two-stage story decomposition into a prompt plan through a text-generation client."""

import logging
import re
from typing import List, Optional, Tuple

from .config import config
from .llm_client import TextClient, request_with_retry
from .plan import Box, PromptPlan, plan_from_dict
from .templates import render_region_request, render_story_request

logger = logging.getLogger(__name__)

OUTPUT_MARKER = "Output:"

# '0': "prompt"  or  "32": 'prompt'; both quote styles are accepted for keys and values.
# A single-quoted value ends at the first quote followed by ',' or ']', so apostrophes survive.
_STORY_ENTRY = re.compile(
    r"""['"](\d+)['"]\s*:\s*(?:"((?:[^"\\]|\\.)*)"|'((?:[^\\]|\\.)*?)'(?=\s*(?:[,\]]|$)))""",
    re.MULTILINE,
)
# "name": "[x, y, w, h]"
_REGION_ENTRY = re.compile(r"""['"]([^'"\[\]]+)['"]\s*:\s*['"]?\[([^\]]*)\]['"]?""")


class DecomposeError(Exception):
    """Raised when a planner response cannot be parsed; keeps the raw text."""

    def __init__(self, message: str, raw: str):
        self.raw = raw
        super().__init__(message)


def _output_section(text: str) -> str:
    """Text after the last output marker, or all of it."""
    idx = text.rfind(OUTPUT_MARKER)
    return text if idx < 0 else text[idx + len(OUTPUT_MARKER):]


def parse_story_response(text: str) -> List[Tuple[int, str]]:
    """
    Frame-indexed prompts from a story planner response.

    Returns:
        (start_frame, prompt) pairs sorted by start frame

    Raises:
        DecomposeError: If no entry can be read
    """
    entries = [
        (int(key), (double.replace('\\"', '"') if double else single.replace("\\'", "'")).strip())
        for key, double, single in _STORY_ENTRY.findall(_output_section(text))
    ]
    if not entries:
        logger.error(f"Unparseable story planner response:\n{text}")
        raise DecomposeError("no frame-indexed prompts found in story planner response", text)
    return sorted(entries, key=lambda e: e[0])


def parse_region_response(text: str) -> List[Tuple[str, Box]]:
    """
    Sub-object regions from a region planner response.

    Raises:
        DecomposeError: If no entry can be read or a box is malformed
    """
    objects = []
    for name, coords in _REGION_ENTRY.findall(_output_section(text)):
        try:
            values = [float(v) for v in coords.split(",")]
        except ValueError:
            logger.error(f"Malformed box in region planner response:\n{text}")
            raise DecomposeError(f"box of '{name}' is not numeric: [{coords}]", text)
        if len(values) != 4:
            raise DecomposeError(f"box of '{name}' needs 4 numbers, got {len(values)}", text)
        objects.append((name.strip(), Box(*values)))
    if not objects:
        logger.error(f"Unparseable region planner response:\n{text}")
        raise DecomposeError("no object regions found in region planner response", text)
    return objects


def decompose_story(
    story: str,
    total_frames: int,
    client: TextClient,
    alpha: Optional[float] = None,
    retries: int = None
) -> PromptPlan:
    """
    Plan a story: temporal split first, then one spatial layout per segment.

    Args:
        story: User story text
        total_frames: Video length in frames
        client: Text-generation client
        alpha: Global/regional blend weight stored in the plan (default from config)
        retries: Extra attempts per request (default from config)

    Returns:
        Validated PromptPlan

    Raises:
        DecomposeError: Unparseable response
        ClientError: Client failure after retries
        PlanValidationError: The planned layout breaks a plan invariant
    """
    alpha = config.attention.default_alpha if alpha is None else alpha
    segments = parse_story_response(request_with_retry(client, render_story_request(story, total_frames), retries))
    logger.info(f"Story planned into {len(segments)} segments: {[s for s, _ in segments]}")

    doc_segments = []
    for start_frame, prompt in segments:
        regions = parse_region_response(request_with_retry(client, render_region_request(prompt), retries))
        doc_segments.append({
            "start_frame": start_frame,
            "prompt": prompt,
            "objects": [{"prompt": name, "box": box.as_list()} for name, box in regions],
        })
    return plan_from_dict({"total_frames": total_frames, "alpha": alpha, "segments": doc_segments})
