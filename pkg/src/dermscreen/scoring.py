"""Image-level malignancy scoring.

Turns per-lesion probabilities into one probability per image.  Three
strategies produce the per-lesion numbers (two-stage detect+classify,
one-step heads at either malignancy or sub-type granularity) and a
fourth skips lesions entirely (direct whole-image model).  Three
aggregators combine them: average, maximum, and noisy-OR.

Noisy-OR defaults to 1 - prod(1 - p_i).  A verbatim mode computing
1 - prod(p_i) exists behind a flag for comparison runs; it rewards
confident-benign lesions and is not what you want for triage.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import MALIGNANT_LABELS, LesionLabel, Roi
from .detector import Detection, GranularityConfig
from .errors import ConfigError, GranularityError

AGGREGATORS = ("average", "maximum", "noisy_or")
STRATEGIES = ("direct", "two_stage", "one_step_malignancy", "one_step_subtype")

_MALIGNANT_INDICES = tuple(i for i, label in enumerate(LesionLabel) if label in MALIGNANT_LABELS)


def aggregate(probs: Sequence[float], kind: str, verbatim_noisy_or: bool = False) -> float:
    """Combine per-lesion malignancy probabilities into one value.

    Raises on an empty list; callers decide what an image with no
    lesions means before getting here.
    """
    if kind not in AGGREGATORS:
        raise ConfigError(f"unknown aggregator {kind!r}")
    values = [float(p) for p in probs]
    if not values:
        raise ConfigError("cannot aggregate an empty probability list")
    for p in values:
        if not (math.isfinite(p) and 0.0 <= p <= 1.0):
            raise ConfigError(f"probability out of [0,1]: {p}")
    if len(values) == 1:
        # all three aggregators are the identity on one element; the
        # explicit branch keeps noisy-OR bit-exact (1-(1-p) is not)
        return values[0]
    if kind == "average":
        return float(np.mean(values))
    if kind == "maximum":
        return float(max(values))
    prod = 1.0
    if verbatim_noisy_or:
        for p in values:
            prod *= p
    else:
        for p in values:
            prod *= 1.0 - p
    return 1.0 - prod


@dataclass(frozen=True)
class ImageScore:
    image_id: str
    probability: float
    strategy: str
    aggregator: str | None
    contributing: tuple[tuple[Roi, float], ...] = ()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "direct":
            if self.aggregator is not None:
                raise ConfigError("direct scores take no aggregator")
        elif self.aggregator not in AGGREGATORS:
            raise ConfigError(f"unknown aggregator {self.aggregator!r}")
        if not (math.isfinite(self.probability) and 0.0 <= self.probability <= 1.0):
            raise ConfigError(f"probability out of [0,1]: {self.probability}")
        object.__setattr__(self, "contributing", tuple(self.contributing))

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "probability": self.probability,
            "strategy": self.strategy,
            "aggregator": self.aggregator,
            "contributing": [
                {"box": roi.to_json(), "probability": p} for roi, p in self.contributing
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ImageScore":
        return cls(
            image_id=obj["image_id"],
            probability=float(obj["probability"]),
            strategy=obj["strategy"],
            aggregator=obj.get("aggregator"),
            contributing=tuple(
                (Roi.from_json(c["box"], "score.contributing"), float(c["probability"]))
                for c in obj.get("contributing", ())
            ),
        )


def malignancy_from_class_probs(class_probs: Sequence[float], granularity: GranularityConfig) -> float:
    """Per-lesion malignancy from a detection's class probabilities."""
    if granularity.kind == "malignancy":
        return float(class_probs[1])
    if granularity.kind == "sub_type":
        return float(sum(class_probs[i] for i in _MALIGNANT_INDICES))
    raise GranularityError("class-agnostic detections carry no malignancy signal")


def _roi_probability(value) -> float:
    """Accept either a bare float or a score object with .probability."""
    return float(getattr(value, "probability", value))


def _finish(image_id, strategy, aggregator, pairs, empty_probability, verbatim):
    if pairs:
        probability = aggregate([p for _, p in pairs], aggregator, verbatim)
    else:
        probability = empty_probability
    return ImageScore(
        image_id=image_id,
        probability=probability,
        strategy=strategy,
        aggregator=aggregator,
        contributing=tuple(pairs),
    )


def score_two_stage(
    det_model,
    cls_model,
    image: np.ndarray,
    aggregator: str,
    image_id: str = "",
    empty_probability: float = 0.0,
    verbatim_noisy_or: bool = False,
) -> ImageScore:
    """Detect class-agnostically, then classify each detected box."""
    if det_model.granularity.kind != "one_class":
        raise GranularityError(
            f"two-stage scoring needs a one_class detector, got {det_model.granularity.kind}"
        )
    detections: list[Detection] = det_model.detect(image)
    pairs = [
        (d.box, _roi_probability(cls_model.predict_roi(image, d.box))) for d in detections
    ]
    return _finish(image_id, "two_stage", aggregator, pairs, empty_probability, verbatim_noisy_or)


def score_one_step(
    det_model,
    image: np.ndarray,
    aggregator: str,
    image_id: str = "",
    empty_probability: float = 0.0,
    verbatim_noisy_or: bool = False,
) -> ImageScore:
    """Read malignancy straight off the detector's class probabilities."""
    kind = det_model.granularity.kind
    if kind == "one_class":
        raise GranularityError("one-step scoring needs a malignancy or sub_type detector")
    strategy = "one_step_malignancy" if kind == "malignancy" else "one_step_subtype"
    detections: list[Detection] = det_model.detect(image)
    pairs = [
        (d.box, malignancy_from_class_probs(d.class_probs, det_model.granularity))
        for d in detections
    ]
    return _finish(image_id, strategy, aggregator, pairs, empty_probability, verbatim_noisy_or)


def score_direct(direct_model, image: np.ndarray, image_id: str = "") -> ImageScore:
    """Whole image in, one probability out, no boxes involved."""
    probability = float(direct_model.predict_image(image))
    return ImageScore(
        image_id=image_id,
        probability=probability,
        strategy="direct",
        aggregator=None,
        contributing=(),
    )


def sweep_scores(
    images: Iterable[tuple[str, np.ndarray]],
    detector=None,
    classifier=None,
    malignancy_detector=None,
    subtype_detector=None,
    direct_model=None,
    empty_probability: float = 0.0,
    verbatim_noisy_or: bool = False,
) -> dict[tuple[str, str | None], list[ImageScore]]:
    """Score every image under every strategy/aggregator combination.

    Detection and per-lesion classification run once per image per
    strategy; only the final aggregation varies across a strategy's three
    cells.  Strategies whose models are absent are skipped.  Keys are
    (strategy, aggregator); the direct strategy has the single key
    ("direct", None) since no aggregation applies.
    """
    if (detector is None) != (classifier is None):
        raise ConfigError("two-stage scoring needs both a detector and a classifier")
    per_lesion = []
    if detector is not None:
        if detector.granularity.kind != "one_class":
            raise GranularityError(
                f"two-stage scoring needs a one_class detector, got {detector.granularity.kind}"
            )
        per_lesion.append(
            ("two_stage", lambda img: [
                (d.box, _roi_probability(classifier.predict_roi(img, d.box)))
                for d in detector.detect(img)
            ])
        )
    for model, expected in ((malignancy_detector, "malignancy"), (subtype_detector, "sub_type")):
        if model is None:
            continue
        if model.granularity.kind != expected:
            raise GranularityError(
                f"expected a {expected} detector, got {model.granularity.kind}"
            )
        name = "one_step_malignancy" if expected == "malignancy" else "one_step_subtype"
        per_lesion.append(
            (name, lambda img, m=model: [
                (d.box, malignancy_from_class_probs(d.class_probs, m.granularity))
                for d in m.detect(img)
            ])
        )

    cells: dict[tuple[str, str | None], list[ImageScore]] = {}
    for strategy, _ in per_lesion:
        for aggregator in AGGREGATORS:
            cells[(strategy, aggregator)] = []
    if direct_model is not None:
        cells[("direct", None)] = []

    for image_id, image in images:
        for strategy, pairs_fn in per_lesion:
            pairs = pairs_fn(image)
            for aggregator in AGGREGATORS:
                cells[(strategy, aggregator)].append(
                    _finish(image_id, strategy, aggregator, pairs, empty_probability, verbatim_noisy_or)
                )
        if direct_model is not None:
            cells[("direct", None)].append(score_direct(direct_model, image, image_id))
    return cells


def write_scores(path: str | Path, scores: Iterable[ImageScore]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for score in scores:
            f.write(json.dumps(score.to_json()) + "\n")


def read_scores(path: str | Path) -> list[ImageScore]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(ImageScore.from_json(json.loads(line)))
    return out
