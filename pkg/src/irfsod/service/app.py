"""FastAPI application around the core detector.

The service owns one loaded model and a registry of support prototypes.
Registering supports computes the category prototype once; detection then
scores incoming images against all registered categories with no parameter
updates, which is what makes per-request latency flat.
"""

from __future__ import annotations

import base64
import io
import threading
import time

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image

from ..config import RunConfig, copy_config
from ..data import ShapesSpec, generate_shapes_dataset, load_coco_annotations, load_image
from ..detector import FewShotDetector, parameter_hash
from ..errors import CheckpointError, ConfigError, DataError
from ..evaluation import detect, meta_testing, one_time_protocol
from ..features import SupportFeature
from ..geometry import Box
from ..training import load_checkpoint
from . import schemas


class ServiceState:
    """The loaded model plus registered support prototypes, lock-guarded."""

    def __init__(self):
        self.lock = threading.Lock()
        self.model: FewShotDetector | None = None
        self.checkpoint_path: str | None = None
        self.prototypes: dict[int, SupportFeature] = {}

    def require_model(self) -> FewShotDetector:
        if self.model is None:
            raise HTTPException(status_code=409, detail="no model loaded; POST /model/load first")
        return self.model

    def load(self, checkpoint_path: str):
        model = load_checkpoint(checkpoint_path)
        with self.lock:
            self.model = model
            self.checkpoint_path = checkpoint_path
            self.prototypes = {}


def _decode_image(payload: schemas.ImagePayload) -> np.ndarray:
    if payload.image_path is not None:
        return load_image(payload.image_path)
    try:
        raw = base64.b64decode(payload.image_b64)
        with Image.open(io.BytesIO(raw)) as img:
            return np.asarray(img.convert("RGB"))
    except Exception as exc:
        raise HTTPException(status_code=400, detail=f"undecodable image payload: {exc}") from exc


def _model_info(state: ServiceState) -> schemas.ModelInfo:
    model = state.require_model()
    return schemas.ModelInfo(
        checkpoint_path=state.checkpoint_path,
        config=model.run_config.to_flat_dict(),
        base_categories=list(model.base_categories) if model.base_categories else None,
        parameter_hash=parameter_hash(model))


def create_app(checkpoint: str | None = None) -> FastAPI:
    app = FastAPI(
        title="irfsod",
        description="Few-shot object detection with instant response: register "
                    "support boxes for a category, then detect it immediately.")
    state = ServiceState()
    app.state.service = state
    if checkpoint:
        state.load(checkpoint)

    @app.exception_handler(DataError)
    async def _data_error(_, exc: DataError):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(CheckpointError)
    async def _checkpoint_error(_, exc: CheckpointError):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(ConfigError)
    async def _config_error(_, exc: ConfigError):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(
            status="ok", model_loaded=state.model is not None,
            support_categories=sorted(state.prototypes))

    @app.post("/model/load", response_model=schemas.ModelInfo)
    def model_load(request: schemas.LoadModelRequest):
        state.load(request.checkpoint_path)
        return _model_info(state)

    @app.get("/model", response_model=schemas.ModelInfo)
    def model_get():
        return _model_info(state)

    @app.post("/supports", response_model=schemas.SupportSummary)
    def register_supports(request: schemas.RegisterSupportsRequest):
        model = state.require_model()
        items = []
        for inst in request.instances:
            image = _decode_image(inst)
            x, y, w, h = inst.bbox
            if w <= 0 or h <= 0:
                raise HTTPException(status_code=400, detail=f"degenerate bbox {inst.bbox}")
            items.append((image, Box.from_xywh(x, y, w, h)))
        if not request.replace and request.category_id in state.prototypes:
            raise HTTPException(status_code=409,
                                detail=f"category {request.category_id} already registered")
        with state.lock:
            import torch
            with torch.no_grad():
                proto = model.prototype_from_arrays(items, request.category_id)
            state.prototypes[request.category_id] = proto
        return schemas.SupportSummary(category_id=request.category_id, shots=proto.shots)

    @app.get("/supports", response_model=list[schemas.SupportSummary])
    def list_supports():
        return [schemas.SupportSummary(category_id=cat, shots=proto.shots)
                for cat, proto in sorted(state.prototypes.items())]

    @app.delete("/supports", response_model=schemas.MessageResponse)
    def clear_supports():
        with state.lock:
            n = len(state.prototypes)
            state.prototypes = {}
        return schemas.MessageResponse(message=f"cleared {n} support categories")

    @app.post("/detect", response_model=schemas.DetectResponse)
    def detect_image(request: schemas.DetectRequest):
        model = state.require_model()
        if not state.prototypes:
            raise HTTPException(status_code=409, detail="no support categories registered")
        image = _decode_image(request)
        cfg = copy_config(model.run_config)
        if request.score_threshold is not None:
            cfg.heads.score_threshold = request.score_threshold
        if request.max_detections is not None:
            cfg.eval.max_detections = request.max_detections
        started = time.perf_counter()
        detections = detect(image, list(state.prototypes.values()), model, cfg.resolve())
        elapsed = time.perf_counter() - started
        payload = [schemas.DetectionPayload(category_id=d.category,
                                            bbox=list(d.box.to_xywh()),
                                            score=d.score)
                   for d in detections]
        return schemas.DetectResponse(detections=payload, seconds=elapsed)

    def _eval_response(result_dict: dict) -> schemas.EvalResponse:
        metrics = {k: v for k, v in result_dict.items()
                   if isinstance(v, float) and k not in ("seconds_per_episode",)}
        return schemas.EvalResponse(
            metrics=metrics,
            episodes=result_dict.get("episodes"),
            seconds_per_episode=result_dict.get("seconds_per_episode"),
            ci95=result_dict.get("ci95"))

    @app.post("/eval/onetime", response_model=schemas.EvalResponse)
    def eval_onetime(request: schemas.OneTimeEvalRequest):
        from ..data import sample_support_sets

        model = state.require_model()
        split = load_coco_annotations(_annotations_path(request.data_root), visible="novel")
        rng = np.random.default_rng(request.seed)
        supports = sample_support_sets(split, sorted(split.novel_categories),
                                       request.k_shot, rng)
        result = one_time_protocol(model, supports, split)
        return _eval_response(result.to_dict())

    @app.post("/eval/meta", response_model=schemas.EvalResponse)
    def eval_meta(request: schemas.MetaEvalRequest):
        model = state.require_model()
        split = load_coco_annotations(_annotations_path(request.data_root), visible="novel")
        meta = meta_testing(model, split, n_way=request.n_way, k_shot=request.k_shot,
                            episodes=request.episodes,
                            queries_per_category=request.queries_per_category,
                            seed=request.seed)
        return _eval_response(meta.to_dict())

    @app.post("/datasets/shapes", response_model=schemas.ShapesResponse)
    def make_shapes(request: schemas.ShapesRequest):
        spec = ShapesSpec(classes=tuple(request.classes),
                          novel_classes=tuple(request.novel),
                          images=request.images, image_size=request.image_size,
                          min_instances=request.min_instances,
                          max_instances=request.max_instances,
                          color_mode=request.color_mode)
        split = generate_shapes_dataset(spec, request.out_dir, seed=request.seed)
        return schemas.ShapesResponse(
            out_dir=request.out_dir, images=len(split.records),
            annotations=sum(len(r.annotations) for r in split.records),
            base_categories=sorted(split.base_categories),
            novel_categories=sorted(split.novel_categories))

    return app


def _annotations_path(root: str):
    from pathlib import Path

    path = Path(root)
    return path / "annotations.json" if path.is_dir() else path
