"""Deterministic synthetic dermatology dataset generator.

Produces skin-toned textured backgrounds with elliptical lesions whose
appearance separates malignant from benign classes: malignant lesions get
irregular borders and a darker multi-tone fill, benign lesions stay
smooth and lighter.  Ground-truth boxes are the exact bounding boxes of
the rendered lesion masks.  Visual separability is deliberately strong so
that heavily scaled-down training runs still learn the task; realism is
not a goal.

Alongside the images the generator writes the annotation manifest, a
covariate CSV whose columns correlate with the image label at a
configurable strength, and the covariate schema JSON.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .data import DatasetManifest, ImageRecord, LesionLabel, Roi, is_malignant, save_manifest
from .errors import ConfigError

# Rounded discovery-population proportions for the 8 lesion codes, in
# LesionLabel order (MEL, NV, BCC, AKIEC, BKL, DF, VASC, OB).
DISCOVERY_PRIORS = (0.07, 0.16, 0.20, 0.30, 0.12, 0.01, 0.01, 0.13)

SKIN_BASE = {
    "light": (225, 195, 170),
    "medium": (195, 155, 125),
    "dark": (135, 100, 75),
}

LESION_BASE = {
    LesionLabel.MEL: (70, 45, 40),
    LesionLabel.NV: (150, 110, 90),
    LesionLabel.BCC: (115, 62, 55),
    LesionLabel.AKIEC: (100, 72, 52),
    LesionLabel.BKL: (170, 140, 100),
    LesionLabel.DF: (160, 120, 110),
    LesionLabel.VASC: (150, 90, 115),
    LesionLabel.OB: (170, 150, 130),
}


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 200
    size_range: tuple[int, int] = (112, 160)
    lesions_range: tuple[int, int] = (1, 3)
    lesion_size_range: tuple[int, int] = (14, 40)
    class_priors: tuple[float, ...] = DISCOVERY_PRIORS
    dermoscopy_fraction: float = 0.3
    malignant_irregularity: float = 0.16
    benign_irregularity: float = 0.04
    malignant_contrast: float = 0.55
    covariate_strength: float = 0.8
    images_per_patient: tuple[int, int] = (1, 2)
    seed: int = 0

    def __post_init__(self):
        if self.n_images <= 0:
            raise ConfigError("n_images must be positive")
        if len(self.class_priors) != len(LesionLabel):
            raise ConfigError(f"class_priors needs {len(LesionLabel)} entries")
        if abs(sum(self.class_priors) - 1.0) > 1e-9:
            raise ConfigError(f"class_priors must sum to 1, got {sum(self.class_priors):.6f}")
        if self.size_range[0] > self.size_range[1] or self.size_range[0] < 32:
            raise ConfigError(f"bad size_range {self.size_range}")
        if self.lesions_range[0] < 0 or self.lesions_range[0] > self.lesions_range[1]:
            raise ConfigError(f"bad lesions_range {self.lesions_range}")
        if self.lesion_size_range[0] < 6 or self.lesion_size_range[0] > self.lesion_size_range[1]:
            raise ConfigError(f"bad lesion_size_range {self.lesion_size_range}")
        # the widest possible lesion (border wobble included) must fit the smallest image
        max_extent = self.lesion_size_range[1] * (1.0 + 3.0 * self.malignant_irregularity) + 6
        if max_extent >= self.size_range[0]:
            raise ConfigError(
                f"lesions up to {max_extent:.0f}px cannot fit inside {self.size_range[0]}px images"
            )

    def to_json(self) -> dict:
        return {
            "n_images": self.n_images,
            "size_range": list(self.size_range),
            "lesions_range": list(self.lesions_range),
            "lesion_size_range": list(self.lesion_size_range),
            "class_priors": list(self.class_priors),
            "dermoscopy_fraction": self.dermoscopy_fraction,
            "malignant_irregularity": self.malignant_irregularity,
            "benign_irregularity": self.benign_irregularity,
            "malignant_contrast": self.malignant_contrast,
            "covariate_strength": self.covariate_strength,
            "images_per_patient": list(self.images_per_patient),
            "seed": self.seed,
        }


COVARIATE_SCHEMA = {
    "continuous": ["age", "prior_visits"],
    "categorical": {
        "sex": ["F", "M"],
        "race": ["white", "black", "asian", "other"],
        "lesion_location": ["head_neck", "trunk", "upper_limb", "lower_limb"],
        "immunosuppressed": ["no", "yes"],
        "high_risk_medication": ["no", "yes"],
    },
}


def sample_labels(rng: np.random.Generator, priors, n: int) -> list[LesionLabel]:
    codes = list(LesionLabel)
    idx = rng.choice(len(codes), size=n, p=np.asarray(priors, dtype=np.float64))
    return [codes[i] for i in idx]


def render_background(width: int, height: int, skin_tone: str, rng: np.random.Generator) -> np.ndarray:
    """Skin-toned background with smooth low-frequency texture, uint8 HxWx3."""
    base = np.array(SKIN_BASE[skin_tone], dtype=np.float64)
    base = base + rng.uniform(-10, 10, size=3)
    img = np.tile(base, (height, width, 1))
    low = rng.uniform(-9, 9, size=(max(2, height // 16), max(2, width // 16), 3))
    img += cv2.resize(low, (width, height), interpolation=cv2.INTER_LINEAR)
    img += rng.normal(0, 2.0, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def _render_lesion(
    img: np.ndarray,
    rng: np.random.Generator,
    cx: float,
    cy: float,
    radius: float,
    label: LesionLabel,
    irregularity: float,
    contrast: float,
) -> Roi:
    """Draw one lesion in place and return its exact bounding box."""
    height, width = img.shape[:2]
    malignant = is_malignant(label)

    amps = rng.uniform(0.2, 1.0, size=3) * irregularity
    phases = rng.uniform(0, 2 * math.pi, size=3)
    aspect = rng.uniform(0.72, 1.0)
    theta = rng.uniform(0, math.pi)

    reach = int(math.ceil(radius * (1.0 + amps.sum()) + 3))
    x0, x1 = max(0, int(cx) - reach), min(width, int(cx) + reach + 1)
    y0, y1 = max(0, int(cy) - reach), min(height, int(cy) + reach + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = xs - cx
    dy = ys - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / aspect
    dist = np.hypot(u, v)
    angle = np.arctan2(v, u)
    wobble = sum(a * np.sin((k + 2) * angle + p) for k, (a, p) in enumerate(zip(amps, phases)))
    limit = radius * (1.0 + wobble)
    alpha = np.clip((limit - dist) / 1.5, 0.0, 1.0)

    base = np.array(LESION_BASE[label], dtype=np.float64) + rng.uniform(-12, 12, size=3)
    patch = np.tile(base, (alpha.shape[0], alpha.shape[1], 1))
    if malignant:
        # darker interior spots give the multi-tone texture
        tone = np.zeros_like(dist)
        for _ in range(3):
            su = rng.uniform(-0.5, 0.5) * radius
            sv = rng.uniform(-0.5, 0.5) * radius
            sr = rng.uniform(0.25, 0.5) * radius
            tone += np.exp(-(((u - su) ** 2 + (v - sv) ** 2) / (2 * sr**2)))
        patch *= np.clip(1.0 - contrast * np.clip(tone, 0, 1.2), 0.25, 1.0)[..., None]
    else:
        patch *= (1.0 - 0.08 * np.clip(dist / max(limit.max(), 1e-6), 0, 1))[..., None]

    region = img[y0:y1, x0:x1].astype(np.float64)
    img[y0:y1, x0:x1] = np.clip(
        region * (1.0 - alpha[..., None]) + patch * alpha[..., None], 0, 255
    ).astype(np.uint8)

    solid = alpha > 0.5
    rows = np.any(solid, axis=1)
    cols = np.any(solid, axis=0)
    ry = np.nonzero(rows)[0]
    rx = np.nonzero(cols)[0]
    bx0, bx1 = x0 + rx[0], x0 + rx[-1] + 1
    by0, by1 = y0 + ry[0], y0 + ry[-1] + 1
    return Roi(
        x_center=(bx0 + bx1) / 2.0,
        y_center=(by0 + by1) / 2.0,
        width=float(bx1 - bx0),
        height=float(by1 - by0),
        label=label,
    )


def _place_centers(rng, n, width, height, radii, margin_scale):
    """Rejection-sample lesion centers, preferring non-overlapping placements."""
    centers = []
    for i in range(n):
        margin = radii[i] * margin_scale + 3
        for _ in range(60):
            cx = rng.uniform(margin, width - margin)
            cy = rng.uniform(margin, height - margin)
            if all(
                math.hypot(cx - px, cy - py) > (radii[i] + pr) * 1.15
                for (px, py), pr in zip(centers, radii[:i])
            ):
                break
        centers.append((cx, cy))
    return centers


@dataclass
class GeneratedDataset:
    manifest: DatasetManifest
    manifest_path: Path
    covariates_path: Path
    schema_path: Path
    images_dir: Path
    covariates: list[dict] = field(default_factory=list)


def generate_dataset(config: SynthConfig, out_dir: str | Path) -> GeneratedDataset:
    """Render the dataset into ``out_dir`` and return the loaded manifest.

    Fully reproducible: the same config (seed included) produces
    byte-identical images, manifest, and covariate files.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)

    # patient assignment: consecutive images grouped into small patients
    patient_of_image: list[str] = []
    patient_idx = 0
    while len(patient_of_image) < config.n_images:
        k = int(rng.integers(config.images_per_patient[0], config.images_per_patient[1] + 1))
        for _ in range(min(k, config.n_images - len(patient_of_image))):
            patient_of_image.append(f"P{patient_idx:05d}")
        patient_idx += 1

    tone_choices = list(SKIN_BASE)
    records = []
    cov_rows = []
    for i in range(config.n_images):
        image_id = f"synth{i:05d}"
        dermoscopy = bool(rng.uniform() < config.dermoscopy_fraction)
        width = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
        height = int(rng.integers(config.size_range[0], config.size_range[1] + 1))
        tone = tone_choices[int(rng.choice(3, p=[0.70, 0.25, 0.05]))]
        img = render_background(width, height, tone, rng)

        if dermoscopy:
            n_lesions = min(1, config.lesions_range[1])
        else:
            n_lesions = int(rng.integers(config.lesions_range[0], config.lesions_range[1] + 1))
        labels = sample_labels(rng, config.class_priors, n_lesions)

        lo, hi = config.lesion_size_range
        radii = []
        for label in labels:
            size = rng.uniform(lo, hi)
            if dermoscopy:
                size = rng.uniform((lo + hi) / 2.0, hi)  # dermoscopy lesions fill more of the frame
            radii.append(size / 2.0)
        margin_scale = 1.0 + 3.0 * config.malignant_irregularity
        if dermoscopy and n_lesions == 1:
            centers = [(
                width / 2.0 + rng.uniform(-0.05, 0.05) * width,
                height / 2.0 + rng.uniform(-0.05, 0.05) * height,
            )]
        else:
            centers = _place_centers(rng, n_lesions, width, height, radii, margin_scale)

        rois = []
        for label, (cx, cy), radius in zip(labels, centers, radii):
            irregularity = config.malignant_irregularity if is_malignant(label) else config.benign_irregularity
            rois.append(
                _render_lesion(img, rng, cx, cy, radius, label, irregularity, config.malignant_contrast)
            )

        rel_path = f"images/{image_id}.png"
        cv2.imwrite(str(out_dir / rel_path), img)
        record = ImageRecord(
            image_id=image_id,
            patient_id=patient_of_image[i],
            path=rel_path,
            capture="dermoscopy" if dermoscopy else "wide_field",
            skin_tone=tone,
            width=width,
            height=height,
            rois=tuple(rois),
        )
        records.append(record)
        cov_rows.append(_sample_covariates(rng, image_id, record.patient_id, record.image_label, config))

    manifest = DatasetManifest(records=tuple(records), root=str(out_dir))
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)

    covariates_path = out_dir / "covariates.csv"
    fieldnames = ["image_id", "patient_id", "age", "prior_visits", "sex", "race",
                  "lesion_location", "immunosuppressed", "high_risk_medication"]
    with open(covariates_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(cov_rows)

    schema_path = out_dir / "covariate_schema.json"
    schema_path.write_text(json.dumps(COVARIATE_SCHEMA, indent=1) + "\n", encoding="utf-8")

    (out_dir / "synth_config.json").write_text(json.dumps(config.to_json(), indent=1) + "\n", encoding="utf-8")
    return GeneratedDataset(
        manifest=manifest,
        manifest_path=manifest_path,
        covariates_path=covariates_path,
        schema_path=schema_path,
        images_dir=images_dir,
        covariates=cov_rows,
    )


def _sample_covariates(rng, image_id: str, patient_id: str, label: int, config: SynthConfig) -> dict:
    s = config.covariate_strength
    age = rng.normal(48.0 + 18.0 * s * label, 9.0)
    visits = rng.poisson(2.0 + 4.0 * s * label)
    immuno = "yes" if rng.uniform() < 0.08 + 0.5 * s * label else "no"
    medication = "yes" if rng.uniform() < 0.10 + 0.4 * s * label else "no"
    location_p = [0.40, 0.25, 0.18, 0.17] if label else [0.22, 0.30, 0.24, 0.24]
    return {
        "image_id": image_id,
        "patient_id": patient_id,
        "age": f"{age:.1f}",
        "prior_visits": str(int(visits)),
        "sex": ["F", "M"][int(rng.integers(0, 2))],
        "race": COVARIATE_SCHEMA["categorical"]["race"][int(rng.choice(4, p=[0.6, 0.2, 0.1, 0.1]))],
        "lesion_location": COVARIATE_SCHEMA["categorical"]["lesion_location"][int(rng.choice(4, p=location_p))],
        "immunosuppressed": immuno,
        "high_risk_medication": medication,
    }
