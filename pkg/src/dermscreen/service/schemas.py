"""Request/response bodies for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..data import CAPTURES, SKIN_TONES, LesionLabel

_LABELS = tuple(l.value for l in LesionLabel)


class RoiBody(BaseModel):
    x_center: float
    y_center: float
    width: float = Field(gt=0)
    height: float = Field(gt=0)
    label: str | None = None

    def check_label(self) -> "RoiBody":
        if self.label is not None and self.label not in _LABELS:
            raise ValueError(f"unknown lesion class {self.label!r}")
        return self


class DetectionBody(BaseModel):
    box: RoiBody
    score: float
    class_probs: list[float]


class RoiScoreBody(BaseModel):
    box: RoiBody
    probability: float


class ImageScoreBody(BaseModel):
    image_id: str
    probability: float
    strategy: str
    aggregator: str | None


class PredictResponse(BaseModel):
    detections: list[DetectionBody]
    roi_scores: list[RoiScoreBody]
    image_score: ImageScoreBody
    clinical_probability: float | None = None
    combined_probability: float | None = None


class ModelSlotInfo(BaseModel):
    loaded: bool
    kind: str | None = None
    granularity: str | None = None
    class_names: list[str] | None = None


class ModelInfoResponse(BaseModel):
    slots: dict[str, ModelSlotInfo]
    strategies: list[str]
    aggregators: list[str]


class AnnotationIn(BaseModel):
    image_id: str = Field(min_length=1)
    patient_id: str = Field(min_length=1)
    path: str = Field(min_length=1)
    capture: str
    skin_tone: str
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    rois: list[RoiBody]
    annotator: str | None = None

    def check_vocab(self) -> "AnnotationIn":
        if self.capture not in CAPTURES:
            raise ValueError(f"capture must be one of {CAPTURES}")
        if self.skin_tone not in SKIN_TONES:
            raise ValueError(f"skin_tone must be one of {SKIN_TONES}")
        for roi in self.rois:
            roi.check_label()
        return self


class AnnotationAccepted(BaseModel):
    image_id: str
    revision: int


class AnnotationHistory(BaseModel):
    image_id: str
    current: list[RoiBody]
    revisions: list[dict]
