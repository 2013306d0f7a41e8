"""Pydantic request/response models for the detection service.

Boxes cross the wire in COCO (x, y, w, h) order. Images are given either as
a server-local path or as base64-encoded image bytes (exactly one of the
two).
"""

from __future__ import annotations

from pydantic import BaseModel, Field, model_validator


class HealthResponse(BaseModel):
    status: str
    model_loaded: bool
    support_categories: list[int]


class LoadModelRequest(BaseModel):
    checkpoint_path: str = Field(..., description="Server-local checkpoint file.")


class ModelInfo(BaseModel):
    checkpoint_path: str | None
    config: dict
    base_categories: list[int] | None
    parameter_hash: str


class ImagePayload(BaseModel):
    image_path: str | None = None
    image_b64: str | None = None

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.image_path is None) == (self.image_b64 is None):
            raise ValueError("provide exactly one of image_path or image_b64")
        return self


class SupportInstancePayload(ImagePayload):
    bbox: list[float] = Field(..., min_length=4, max_length=4,
                              description="COCO (x, y, w, h) box of the instance.")


class RegisterSupportsRequest(BaseModel):
    category_id: int
    instances: list[SupportInstancePayload] = Field(..., min_length=1)
    replace: bool = Field(default=True, description="Replace any existing prototype.")


class SupportSummary(BaseModel):
    category_id: int
    shots: int


class DetectRequest(ImagePayload):
    score_threshold: float | None = Field(default=None, ge=0.0, le=1.0)
    max_detections: int | None = Field(default=None, ge=1)


class DetectionPayload(BaseModel):
    category_id: int
    bbox: list[float]
    score: float


class DetectResponse(BaseModel):
    detections: list[DetectionPayload]
    seconds: float


class OneTimeEvalRequest(BaseModel):
    data_root: str
    k_shot: int = Field(default=10, ge=1)
    seed: int = 0


class MetaEvalRequest(BaseModel):
    data_root: str
    n_way: int = Field(default=2, ge=1)
    k_shot: int = Field(default=10, ge=1)
    episodes: int = Field(default=1000, ge=1)
    queries_per_category: int = Field(default=10, ge=1)
    seed: int = 0


class EvalResponse(BaseModel):
    metrics: dict[str, float]
    episodes: int | None = None
    seconds_per_episode: float | None = None
    ci95: dict[str, float] | None = None


class ShapesRequest(BaseModel):
    out_dir: str
    seed: int = 0
    images: int = Field(default=300, ge=1)
    image_size: int = Field(default=96, ge=16)
    classes: list[str] = ["circle", "square", "triangle", "star", "cross"]
    novel: list[str] = ["star", "cross"]
    min_instances: int = Field(default=1, ge=1)
    max_instances: int = Field(default=3, ge=1)
    color_mode: str = "category"


class ShapesResponse(BaseModel):
    out_dir: str
    images: int
    annotations: int
    base_categories: list[int]
    novel_categories: list[int]


class MessageResponse(BaseModel):
    message: str
