import filecmp
import json

import numpy as np
import pytest
from scipy import stats

from dermscreen.data import MALIGNANT_LABELS, LesionLabel, load_manifest
from dermscreen.errors import ConfigError
from dermscreen.synth import (
    DISCOVERY_PRIORS,
    SynthConfig,
    generate_dataset,
    render_background,
    sample_labels,
)


def small_config(**overrides):
    defaults = dict(
        n_images=12,
        size_range=(96, 112),
        lesions_range=(1, 3),
        lesion_size_range=(12, 24),
        seed=7,
    )
    defaults.update(overrides)
    return SynthConfig(**defaults)


def test_same_seed_is_byte_identical(tmp_path):
    cfg = small_config(seed=7)
    a = generate_dataset(cfg, tmp_path / "a")
    b = generate_dataset(cfg, tmp_path / "b")

    assert a.manifest_path.read_bytes() == b.manifest_path.read_bytes()
    assert a.covariates_path.read_bytes() == b.covariates_path.read_bytes()
    names = sorted(p.name for p in a.images_dir.iterdir())
    assert names == sorted(p.name for p in b.images_dir.iterdir())
    match, mismatch, errors = filecmp.cmpfiles(a.images_dir, b.images_dir, names, shallow=False)
    assert mismatch == [] and errors == []
    assert len(match) == cfg.n_images


def test_different_seed_differs(tmp_path):
    a = generate_dataset(small_config(seed=7), tmp_path / "a")
    b = generate_dataset(small_config(seed=8), tmp_path / "b")
    assert a.manifest_path.read_bytes() != b.manifest_path.read_bytes()


def test_rois_inside_bounds_and_sizes_match(tmp_path):
    import cv2

    out = generate_dataset(small_config(n_images=20, seed=3), tmp_path)
    manifest = load_manifest(out.manifest_path)
    assert len(manifest.records) == 20
    for rec in manifest.records:
        img = cv2.imread(str(manifest.resolve_path(rec)))
        assert img is not None
        assert img.shape[0] == rec.height and img.shape[1] == rec.width
        for roi in rec.rois:
            x0, y0, x1, y1 = roi.corners()
            assert 0 <= x0 < x1 <= rec.width
            assert 0 <= y0 < y1 <= rec.height
            assert roi.label is not None


def test_image_label_is_or_over_lesions(tmp_path):
    out = generate_dataset(small_config(n_images=40, seed=11), tmp_path)
    saw_positive = saw_negative = False
    for rec in out.manifest.records:
        expected = int(any(r.label in MALIGNANT_LABELS for r in rec.rois))
        assert rec.image_label == expected
        saw_positive |= expected == 1
        saw_negative |= expected == 0
    assert saw_positive and saw_negative


def test_dermoscopy_images_have_single_centered_lesion(tmp_path):
    cfg = small_config(n_images=30, dermoscopy_fraction=1.0, seed=5)
    out = generate_dataset(cfg, tmp_path)
    for rec in out.manifest.records:
        assert rec.capture == "dermoscopy"
        assert len(rec.rois) == 1
        roi = rec.rois[0]
        assert abs(roi.x_center - rec.width / 2) < 0.25 * rec.width
        assert abs(roi.y_center - rec.height / 2) < 0.25 * rec.height


def test_mel_fraction_tracks_prior(tmp_path):
    cfg = small_config(
        n_images=500,
        lesions_range=(2, 2),
        dermoscopy_fraction=0.0,
        lesion_size_range=(10, 18),
        seed=21,
    )
    out = generate_dataset(cfg, tmp_path)
    labels = [r.label for rec in out.manifest.records for r in rec.rois]
    assert len(labels) == 1000
    mel = sum(1 for l in labels if l is LesionLabel.MEL) / len(labels)
    assert abs(mel - 0.07) <= 0.03


def test_label_sampler_matches_priors_chi_square():
    rng = np.random.default_rng(123)
    n = 10_000
    labels = sample_labels(rng, DISCOVERY_PRIORS, n)
    observed = np.array([sum(1 for l in labels if l is code) for code in LesionLabel])
    expected = np.array(DISCOVERY_PRIORS) * n
    result = stats.chisquare(observed, expected)
    assert result.pvalue > 1e-3


def test_priors_must_sum_to_one():
    with pytest.raises(ConfigError):
        small_config(class_priors=(0.5,) * 8)
    with pytest.raises(ConfigError):
        small_config(class_priors=(1.0,))


def test_oversized_lesion_rejected():
    with pytest.raises(ConfigError):
        small_config(size_range=(48, 64), lesion_size_range=(40, 60))


def test_background_render_is_deterministic():
    a = render_background(64, 48, "medium", np.random.default_rng(9))
    b = render_background(64, 48, "medium", np.random.default_rng(9))
    assert a.shape == (48, 64, 3) and a.dtype == np.uint8
    assert np.array_equal(a, b)


def test_covariates_cover_every_image(tmp_path):
    import csv

    out = generate_dataset(small_config(seed=2), tmp_path)
    with open(out.covariates_path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert {r["image_id"] for r in rows} == {rec.image_id for rec in out.manifest.records}
    schema = json.loads(out.schema_path.read_text())
    assert set(schema["continuous"]) == {"age", "prior_visits"}
    for row in rows:
        assert row["sex"] in schema["categorical"]["sex"]
        assert row["lesion_location"] in schema["categorical"]["lesion_location"]
        float(row["age"])
        int(row["prior_visits"])


def test_covariates_correlate_with_label(tmp_path):
    cfg = small_config(n_images=300, covariate_strength=0.8, seed=13)
    out = generate_dataset(cfg, tmp_path)
    by_id = {rec.image_id: rec.image_label for rec in out.manifest.records}
    pos_ages = [float(r["age"]) for r in out.covariates if by_id[r["image_id"]] == 1]
    neg_ages = [float(r["age"]) for r in out.covariates if by_id[r["image_id"]] == 0]
    assert pos_ages and neg_ages
    assert np.mean(pos_ages) > np.mean(neg_ages) + 5.0
