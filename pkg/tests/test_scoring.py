import math

import pytest
from hypothesis import given, strategies as st

from dermscreen.data import Roi
from dermscreen.detector import Detection, GranularityConfig
from dermscreen.errors import ConfigError, GranularityError
from dermscreen.scoring import (
    AGGREGATORS,
    ImageScore,
    aggregate,
    malignancy_from_class_probs,
    read_scores,
    score_direct,
    score_one_step,
    score_two_stage,
    write_scores,
)

probs_lists = st.lists(st.floats(0.01, 0.99), min_size=1, max_size=12)


class StubDetector:
    def __init__(self, kind, detections):
        self.granularity = GranularityConfig.for_kind(kind)
        self._detections = list(detections)

    def detect(self, image):
        return list(self._detections)


class StubClassifier:
    def __init__(self, value_by_box):
        self._values = value_by_box

    def predict_roi(self, image, roi):
        return self._values[(roi.x_center, roi.y_center)]


class StubDirect:
    def __init__(self, value):
        self._value = value

    def predict_image(self, image):
        return self._value


def box(cx, cy, size=10.0):
    return Roi(x_center=cx, y_center=cy, width=size, height=size)


def det(cx, cy, probs):
    return Detection.make(box(cx, cy), probs)


def test_aggregate_worked_examples():
    assert aggregate([0.2, 0.4], "average") == pytest.approx(0.3, abs=1e-12)
    assert aggregate([0.2, 0.4], "maximum") == 0.4
    assert aggregate([0.5, 0.5], "noisy_or") == pytest.approx(0.75, abs=1e-12)


def test_aggregate_rejects_empty_and_unknown():
    with pytest.raises(ConfigError):
        aggregate([], "average")
    with pytest.raises(ConfigError):
        aggregate([0.5], "median")
    with pytest.raises(ConfigError):
        aggregate([1.5], "average")


def test_noisy_or_verbatim_mode():
    # standard form rises with lesion probability, verbatim form falls
    assert aggregate([0.2, 0.4], "noisy_or") == pytest.approx(1 - 0.8 * 0.6, abs=1e-12)
    assert aggregate([0.2, 0.4], "noisy_or", verbatim_noisy_or=True) == pytest.approx(
        1 - 0.2 * 0.4, abs=1e-12
    )
    assert aggregate([0.9, 0.9], "noisy_or", verbatim_noisy_or=True) == pytest.approx(0.19, abs=1e-12)


@given(probs_lists, st.randoms(use_true_random=False))
def test_aggregators_permutation_invariant(probs, rnd):
    shuffled = list(probs)
    rnd.shuffle(shuffled)
    for kind in AGGREGATORS:
        assert abs(aggregate(probs, kind) - aggregate(shuffled, kind)) <= 1e-12


@given(st.floats(0.01, 0.99))
def test_singleton_identity_exact(p):
    for kind in AGGREGATORS:
        assert aggregate([p], kind) == p


@given(probs_lists)
def test_aggregator_ordering(probs):
    avg = aggregate(probs, "average")
    mx = aggregate(probs, "maximum")
    nor = aggregate(probs, "noisy_or")
    assert mx >= avg - 1e-12
    assert nor >= mx - 1e-12


def test_malignancy_from_class_probs():
    two = GranularityConfig.for_kind("malignancy")
    assert malignancy_from_class_probs((0.3, 0.7), two) == 0.7

    eight = GranularityConfig.for_kind("sub_type")
    # order: MEL, NV, BCC, AKIEC, BKL, DF, VASC, OB
    probs = (0.2, 0.15, 0.1, 0.1, 0.15, 0.1, 0.1, 0.1)
    assert malignancy_from_class_probs(probs, eight) == pytest.approx(0.4, abs=1e-12)

    with pytest.raises(GranularityError):
        malignancy_from_class_probs((0.9,), GranularityConfig.for_kind("one_class"))


def test_two_stage_singleton_equals_roi_score():
    d = det(20.0, 20.0, [0.8])
    detector = StubDetector("one_class", [d])
    classifier = StubClassifier({(20.0, 20.0): 0.63})
    for kind in AGGREGATORS:
        score = score_two_stage(detector, classifier, None, kind, image_id="img1")
        assert score.probability == 0.63
        assert score.strategy == "two_stage"
        assert score.aggregator == kind
        assert len(score.contributing) == 1
        assert score.contributing[0][1] == 0.63


def test_two_stage_maximum_of_two():
    detections = [det(10.0, 10.0, [0.9]), det(40.0, 40.0, [0.7])]
    detector = StubDetector("one_class", detections)
    classifier = StubClassifier({(10.0, 10.0): 0.3, (40.0, 40.0): 0.9})
    score = score_two_stage(detector, classifier, None, "maximum")
    assert score.probability == 0.9


def test_two_stage_empty_policy():
    detector = StubDetector("one_class", [])
    classifier = StubClassifier({})
    score = score_two_stage(detector, classifier, None, "noisy_or", image_id="x")
    assert score.probability == 0.0
    assert score.contributing == ()
    pessimistic = score_two_stage(detector, classifier, None, "noisy_or", empty_probability=1.0)
    assert pessimistic.probability == 1.0


def test_two_stage_requires_one_class_detector():
    detector = StubDetector("malignancy", [])
    with pytest.raises(GranularityError):
        score_two_stage(detector, StubClassifier({}), None, "average")


def test_one_step_malignancy_reads_head():
    detector = StubDetector("malignancy", [det(10.0, 10.0, [0.3, 0.7])])
    score = score_one_step(detector, None, "average")
    assert score.strategy == "one_step_malignancy"
    assert score.probability == pytest.approx(0.7, abs=1e-12)


def test_one_step_subtype_sums_malignant_classes():
    probs = (0.2, 0.15, 0.1, 0.1, 0.15, 0.1, 0.1, 0.1)
    detector = StubDetector("sub_type", [det(10.0, 10.0, probs)])
    score = score_one_step(detector, None, "maximum")
    assert score.strategy == "one_step_subtype"
    assert score.probability == pytest.approx(0.4, abs=1e-12)


def test_one_step_rejects_one_class():
    detector = StubDetector("one_class", [])
    with pytest.raises(GranularityError):
        score_one_step(detector, None, "average")


def test_direct_score_has_no_boxes():
    score = score_direct(StubDirect(0.81), None, image_id="img9")
    assert score.strategy == "direct"
    assert score.aggregator is None
    assert score.contributing == ()
    assert score.probability == 0.81


def test_image_score_validation():
    with pytest.raises(ConfigError):
        ImageScore(image_id="a", probability=0.5, strategy="direct", aggregator="average")
    with pytest.raises(ConfigError):
        ImageScore(image_id="a", probability=0.5, strategy="two_stage", aggregator=None)
    with pytest.raises(ConfigError):
        ImageScore(image_id="a", probability=1.5, strategy="two_stage", aggregator="average")
    with pytest.raises(ConfigError):
        ImageScore(image_id="a", probability=0.5, strategy="detectish", aggregator="average")


def test_score_jsonl_round_trip(tmp_path):
    scores = [
        ImageScore(
            image_id="img1",
            probability=0.52,
            strategy="two_stage",
            aggregator="noisy_or",
            contributing=((box(10.0, 12.0), 0.2), (box(30.0, 9.0), 0.4)),
        ),
        ImageScore(image_id="img2", probability=0.9, strategy="direct", aggregator=None),
    ]
    path = tmp_path / "scores.jsonl"
    write_scores(path, scores)
    loaded = read_scores(path)
    assert loaded == scores
    assert math.isclose(loaded[0].contributing[1][1], 0.4)
