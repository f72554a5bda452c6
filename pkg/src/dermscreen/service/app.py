"""FastAPI application: inference endpoints plus annotation review.

Error mapping: request bodies that fail validation come back 400 (the
framework default of 422 is reserved for image payloads we cannot
decode); inference endpoints whose model slot is empty return 503.
Models are loaded once at startup and never mutated, so concurrent
requests are safe; annotation writes serialize inside the store.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from ..data import Roi
from ..errors import DermscreenError
from ..scoring import (
    AGGREGATORS,
    STRATEGIES,
    ImageScore,
    aggregate,
    malignancy_from_class_probs,
)
from .schemas import (
    AnnotationAccepted,
    AnnotationHistory,
    AnnotationIn,
    DetectionBody,
    ImageScoreBody,
    ModelInfoResponse,
    ModelSlotInfo,
    PredictResponse,
    RoiBody,
    RoiScoreBody,
)
from .store import AnnotationStore

MODEL_SLOTS = (
    "detector",
    "classifier",
    "malignancy_detector",
    "subtype_detector",
    "direct_model",
    "clinical",
    "combined",
)


def _decode_image(data: bytes) -> np.ndarray:
    import cv2

    if not data:
        raise HTTPException(status_code=422, detail="empty image payload")
    image = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_COLOR)
    if image is None:
        raise HTTPException(status_code=422, detail="cannot decode image payload")
    return image


def _need(models: dict, slot: str):
    model = models.get(slot)
    if model is None:
        raise HTTPException(status_code=503, detail=f"model slot {slot!r} is not loaded")
    return model


def _slot_info(model) -> ModelSlotInfo:
    if model is None:
        return ModelSlotInfo(loaded=False)
    granularity = getattr(model, "granularity", None)
    return ModelSlotInfo(
        loaded=True,
        kind=type(model).__name__,
        granularity=granularity.kind if granularity else None,
        class_names=list(granularity.class_names) if granularity else None,
    )


def _roi_body(roi: Roi) -> RoiBody:
    return RoiBody(
        x_center=roi.x_center,
        y_center=roi.y_center,
        width=roi.width,
        height=roi.height,
        label=roi.label.value if roi.label else None,
    )


def create_app(
    models: dict | None = None,
    store_dir: str | Path = "annotations",
    static_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="dermscreen", version="0.1.0")
    app.state.models = {slot: (models or {}).get(slot) for slot in MODEL_SLOTS}
    app.state.store = AnnotationStore(store_dir)
    app.state.ready = False

    @app.exception_handler(RequestValidationError)
    async def validation_as_400(request, exc):
        return JSONResponse(status_code=400, content={"detail": exc.errors()})

    @app.exception_handler(DermscreenError)
    async def domain_error_as_400(request, exc):
        return JSONResponse(
            status_code=400, content={"detail": f"{type(exc).__name__}: {exc}"}
        )

    @app.get("/health")
    def health():
        if not app.state.ready:
            return JSONResponse(status_code=503, content={"status": "loading"})
        return {"status": "ok"}

    @app.get("/model-info")
    def model_info() -> ModelInfoResponse:
        return ModelInfoResponse(
            slots={slot: _slot_info(app.state.models[slot]) for slot in MODEL_SLOTS},
            strategies=list(STRATEGIES),
            aggregators=list(AGGREGATORS),
        )

    @app.post("/predict")
    async def predict(
        image: UploadFile = File(...),
        strategy: str = Form("two_stage"),
        aggregator: str = Form("average"),
        covariates: str | None = Form(None),
        image_id: str = Form("upload"),
    ) -> PredictResponse:
        if strategy not in STRATEGIES:
            raise HTTPException(status_code=400, detail=f"unknown strategy {strategy!r}")
        if aggregator not in AGGREGATORS:
            raise HTTPException(status_code=400, detail=f"unknown aggregator {aggregator!r}")
        row = None
        if covariates:
            try:
                row = json.loads(covariates)
            except json.JSONDecodeError as e:
                raise HTTPException(status_code=400, detail=f"covariates is not JSON: {e}")
            if not isinstance(row, dict):
                raise HTTPException(status_code=400, detail="covariates must be a JSON object")
        img = _decode_image(await image.read())
        m = app.state.models

        detections: list = []
        pairs: list[tuple[Roi, float]] = []
        if strategy == "two_stage":
            det, cls = _need(m, "detector"), _need(m, "classifier")
            detections = det.detect(img)
            pairs = [
                (d.box, cls.predict_roi(img, d.box).probability) for d in detections
            ]
        elif strategy == "one_step_malignancy":
            det = _need(m, "malignancy_detector")
            detections = det.detect(img)
            pairs = [
                (d.box, malignancy_from_class_probs(d.class_probs, det.granularity))
                for d in detections
            ]
        elif strategy == "one_step_subtype":
            det = _need(m, "subtype_detector")
            detections = det.detect(img)
            pairs = [
                (d.box, malignancy_from_class_probs(d.class_probs, det.granularity))
                for d in detections
            ]

        if strategy == "direct":
            direct = _need(m, "direct_model")
            score = ImageScore(
                image_id=image_id,
                probability=float(direct.predict_image(img)),
                strategy="direct",
                aggregator=None,
            )
        else:
            probability = aggregate([p for _, p in pairs], aggregator) if pairs else 0.0
            score = ImageScore(
                image_id=image_id,
                probability=probability,
                strategy=strategy,
                aggregator=aggregator,
                contributing=tuple(pairs),
            )

        clinical_p = None
        combined_p = None
        if row is not None:
            if m["clinical"] is not None:
                clinical_p = float(m["clinical"].predict_row(row))
            if m["combined"] is not None:
                combined_p = float(m["combined"].predict(img, row))

        return PredictResponse(
            detections=[
                DetectionBody(
                    box=_roi_body(d.box), score=d.score, class_probs=list(d.class_probs)
                )
                for d in detections
            ],
            roi_scores=[
                RoiScoreBody(box=_roi_body(box), probability=p) for box, p in pairs
            ],
            image_score=ImageScoreBody(
                image_id=score.image_id,
                probability=score.probability,
                strategy=score.strategy,
                aggregator=score.aggregator,
            ),
            clinical_probability=clinical_p,
            combined_probability=combined_p,
        )

    @app.post("/score-roi")
    async def score_roi(
        image: UploadFile = File(...),
        x_center: float = Form(...),
        y_center: float = Form(...),
        width: float = Form(..., gt=0),
        height: float = Form(..., gt=0),
        image_id: str = Form("upload"),
    ) -> RoiScoreBody:
        cls = _need(app.state.models, "classifier")
        img = _decode_image(await image.read())
        roi = Roi(x_center=x_center, y_center=y_center, width=width, height=height)
        score = cls.predict_roi(img, roi, image_id=image_id)
        return RoiScoreBody(box=_roi_body(roi), probability=score.probability)

    @app.post("/annotations", status_code=201)
    def post_annotation(body: AnnotationIn) -> AnnotationAccepted:
        try:
            body.check_vocab()
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        record_json = body.model_dump(exclude={"annotator"})
        record_json["rois"] = [
            {k: v for k, v in r.items() if v is not None} for r in record_json["rois"]
        ]
        revision = app.state.store.append(record_json, annotator=body.annotator)
        return AnnotationAccepted(image_id=body.image_id, revision=revision)

    @app.get("/annotations/{image_id}")
    def get_annotation(image_id: str) -> AnnotationHistory:
        record = app.state.store.current(image_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"no annotations for {image_id!r}")
        return AnnotationHistory(
            image_id=image_id,
            current=[_roi_body(r) for r in record.rois],
            revisions=app.state.store.history(image_id),
        )

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")

    app.state.ready = True
    return app
