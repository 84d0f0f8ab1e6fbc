"""FastAPI REST API for plan checking, clip filtering and recaption requests."""

import dataclasses
from typing import List, Optional

from fastapi import Body, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from .config import config
from .dataprep import build_recaption_request, filter_clips
from .plan import PlanError, PlanValidationError, plan_from_dict


app = FastAPI(
    title="Compositional Video Diffusion API",
    description="REST API for prompt plans, motion filtering and caption requests",
    version="1.0.0"
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# ==================== Request/Response Models ====================

class SegmentSummary(BaseModel):
    start_frame: int
    prompt: str
    objects: List[str]


class PlanSummary(BaseModel):
    total_frames: int
    alpha: float
    num_segments: int
    segments: List[SegmentSummary]


class ClipScore(BaseModel):
    id: str
    score: float


class FilterRequest(BaseModel):
    scores: List[ClipScore]
    s1: Optional[float] = None
    s2: Optional[float] = None


class VerdictResponse(BaseModel):
    id: str
    score: float
    kept: bool
    reason: str


class RecaptionRequest(BaseModel):
    caption: str


class RecaptionResponse(BaseModel):
    request: str


# ==================== Endpoints ====================

@app.post("/plan/validate", response_model=PlanSummary)
async def validate_plan_document(doc: dict = Body(...)):
    """
    Validate a plan document.

    Returns a per-segment summary, or 400 with the first violation.
    """
    try:
        plan = plan_from_dict(doc)
    except PlanValidationError as e:
        raise HTTPException(status_code=400, detail={"field": e.field_path, "message": str(e)})
    except PlanError as e:
        raise HTTPException(status_code=400, detail={"field": getattr(e, "location", None), "message": str(e)})
    return PlanSummary(
        total_frames=plan.total_frames,
        alpha=plan.alpha,
        num_segments=len(plan.segments),
        segments=[
            SegmentSummary(
                start_frame=seg.start_frame,
                prompt=seg.global_prompt,
                objects=[obj.prompt for obj in seg.sub_objects],
            )
            for seg in plan.segments
        ],
    )


@app.post("/filter", response_model=List[VerdictResponse])
async def filter_scores(request: FilterRequest):
    """Verdicts for precomputed motion scores, in request order."""
    base = config.flow
    try:
        cfg = dataclasses.replace(
            base,
            s1=base.s1 if request.s1 is None else request.s1,
            s2=base.s2 if request.s2 is None else request.s2,
        )
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    verdicts = filter_clips([(c.id, c.score) for c in request.scores], cfg)
    return [VerdictResponse(id=v.clip_id, score=v.score, kept=v.kept, reason=v.reason) for v in verdicts]


@app.post("/recaption/request", response_model=RecaptionResponse)
async def recaption_request(request: RecaptionRequest):
    """Render the recaption request for one caption."""
    try:
        return RecaptionResponse(request=build_recaption_request(request.caption))
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))


@app.get("/health")
async def health_check():
    """Health check endpoint."""
    return {"status": "healthy"}
