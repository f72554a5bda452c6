"""Clinical covariates: encoding, logistic regression, image fusion.

Covariate rows are flat string dicts (CSV rows).  Continuous features
are standardized with training-split population statistics; categorical
features become one-hot blocks with a trailing "other" slot so unseen
levels at inference time stay representable.

The logistic regression is deliberately plain: full-batch gradient
descent with a fixed step derived from a Lipschitz bound on the
gradient, run to a gradient-norm tolerance.  No line search, no
stochasticity, so runs are bit-reproducible and the gradient is easy
to check against finite differences.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np
import torch

from .errors import ConfigError, CovariateError, ModelIOError
from .metrics import auc
from .nets import to_tensor
from .schedules import cosine_lr

OTHER_LEVEL = "__other__"


@dataclass(frozen=True)
class CovariateSchema:
    continuous: tuple[str, ...]
    categorical: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(
            self, "categorical", tuple((n, tuple(levels)) for n, levels in self.categorical)
        )
        names = list(self.continuous) + [n for n, _ in self.categorical]
        if len(set(names)) != len(names):
            raise CovariateError("covariate names must be unique")
        for name, levels in self.categorical:
            if not levels:
                raise CovariateError(f"categorical {name!r} has no levels")
            if len(set(levels)) != len(levels):
                raise CovariateError(f"categorical {name!r} has duplicate levels")

    @classmethod
    def from_json(cls, obj: Mapping) -> "CovariateSchema":
        return cls(
            continuous=tuple(obj.get("continuous", ())),
            categorical=tuple((name, tuple(levels)) for name, levels in obj.get("categorical", {}).items()),
        )

    @classmethod
    def load(cls, path: str | Path) -> "CovariateSchema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_json(self) -> dict:
        return {
            "continuous": list(self.continuous),
            "categorical": {name: list(levels) for name, levels in self.categorical},
        }


@dataclass(frozen=True)
class StandardizationStats:
    means: tuple[tuple[str, float], ...]
    stds: tuple[tuple[str, float], ...]
    dropped: tuple[str, ...] = ()

    def mean_of(self, name: str) -> float:
        return dict(self.means)[name]

    def std_of(self, name: str) -> float:
        return dict(self.stds)[name]

    @property
    def kept(self) -> tuple[str, ...]:
        return tuple(n for n, _ in self.means)

    def to_json(self) -> dict:
        return {
            "means": {n: v for n, v in self.means},
            "stds": {n: v for n, v in self.stds},
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "StandardizationStats":
        return cls(
            means=tuple(obj["means"].items()),
            stds=tuple(obj["stds"].items()),
            dropped=tuple(obj.get("dropped", ())),
        )


def _parse_continuous(row: Mapping, name: str) -> float | None:
    raw = row.get(name)
    if raw is None or raw == "":
        return None
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise CovariateError(f"covariate {name!r}: expected a number, got {raw!r}") from None
    if not math.isfinite(value):
        raise CovariateError(f"covariate {name!r}: non-finite value {raw!r}")
    return value


def fit_standardizer(rows: Sequence[Mapping], schema: CovariateSchema) -> StandardizationStats:
    """Population mean/std per continuous feature over the training rows.

    Constant columns carry no signal and would divide by zero, so they
    are dropped with a warning.  Missing entries are ignored while
    fitting; at encode time they standardize to 0 (the mean).
    """
    if len(rows) < 2:
        raise CovariateError("standardizer needs at least 2 rows")
    means, stds, dropped = [], [], []
    for name in schema.continuous:
        values = [v for row in rows if (v := _parse_continuous(row, name)) is not None]
        if not values:
            dropped.append(name)
            warnings.warn(f"covariate {name!r} has no values; dropping", stacklevel=2)
            continue
        arr = np.asarray(values, dtype=np.float64)
        mean = float(arr.mean())
        std = float(arr.std())  # population, ddof=0
        if std == 0.0:
            dropped.append(name)
            warnings.warn(f"covariate {name!r} is constant; dropping", stacklevel=2)
            continue
        means.append((name, mean))
        stds.append((name, std))
    return StandardizationStats(means=tuple(means), stds=tuple(stds), dropped=tuple(dropped))


def feature_names(schema: CovariateSchema, stats: StandardizationStats) -> list[str]:
    names = list(stats.kept)
    for cat, levels in schema.categorical:
        names.extend(f"{cat}={level}" for level in levels)
        names.append(f"{cat}={OTHER_LEVEL}")
    return names


def encode_covariates(
    row: Mapping, schema: CovariateSchema, stats: StandardizationStats
) -> np.ndarray:
    """Dense feature vector: standardized continuous, then one-hot blocks.

    Each categorical block has one slot per known level plus an "other"
    slot; unseen or missing levels land there, so every block sums to 1.
    """
    parts = []
    std_by_name = dict(stats.stds)
    mean_by_name = dict(stats.means)
    for name in stats.kept:
        value = _parse_continuous(row, name)
        if value is None:
            parts.append(0.0)  # mean imputation in standardized space
        else:
            parts.append((value - mean_by_name[name]) / std_by_name[name])
    for cat, levels in schema.categorical:
        block = [0.0] * (len(levels) + 1)
        raw = row.get(cat)
        level = None if raw is None or raw == "" else str(raw)
        if level in levels:
            block[levels.index(level)] = 1.0
        else:
            block[-1] = 1.0
        parts.extend(block)
    return np.asarray(parts, dtype=np.float64)


def encode_matrix(
    rows: Sequence[Mapping], schema: CovariateSchema, stats: StandardizationStats
) -> np.ndarray:
    if not rows:
        width = len(feature_names(schema, stats))
        return np.zeros((0, width), dtype=np.float64)
    return np.stack([encode_covariates(r, schema, stats) for r in rows])


def logistic_loss_and_grad(
    weights: np.ndarray, intercept: float, X: np.ndarray, y: np.ndarray, l2: float
) -> tuple[float, np.ndarray, float]:
    """Mean cross-entropy plus l2/(2n) * ||w||^2 (intercept unpenalized).

    Returns (loss, d_loss/d_weights, d_loss/d_intercept).  Exposed
    separately from training so the gradient can be finite-difference
    checked.
    """
    n = X.shape[0]
    z = X @ weights + intercept
    # log(1+e^z) computed stably on both tails
    softplus = np.logaddexp(0.0, z)
    loss = float(np.mean(softplus - y * z)) + l2 / (2.0 * n) * float(weights @ weights)
    p = 1.0 / (1.0 + np.exp(-z))
    residual = p - y
    grad_w = (X.T @ residual + l2 * weights) / n
    grad_b = float(np.mean(residual))
    return loss, grad_w, grad_b


@dataclass(frozen=True)
class LogisticModel:
    weights: np.ndarray
    intercept: float
    l2: float
    iterations: int
    grad_norm: float
    feature_names: tuple[str, ...] = ()

    def decision(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights + self.intercept

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision(X)))

    def to_json(self) -> dict:
        return {
            "weights": [float(w) for w in self.weights],
            "intercept": self.intercept,
            "l2": self.l2,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "LogisticModel":
        return cls(
            weights=np.asarray(obj["weights"], dtype=np.float64),
            intercept=float(obj["intercept"]),
            l2=float(obj["l2"]),
            iterations=int(obj["iterations"]),
            grad_norm=float(obj["grad_norm"]),
            feature_names=tuple(obj.get("feature_names", ())),
        )


def train_logistic(
    X: np.ndarray,
    y: np.ndarray,
    l2: float = 1.0,
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 500_000,
    feature_names: Sequence[str] = (),
) -> LogisticModel:
    """Full-batch gradient descent from a zero start.

    The step size is 1/L with L an upper bound on the gradient's
    Lipschitz constant (largest singular value of the design matrix with
    an intercept column, sigmoid curvature 1/4, plus the ridge term), so
    descent is monotone without a line search.  ``seed`` only feeds the
    run record; the optimization itself is deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise CovariateError(f"design matrix {X.shape} does not match {y.shape[0]} labels")
    classes = set(np.unique(y))
    if not classes <= {0.0, 1.0}:
        raise CovariateError(f"labels must be 0/1, got {sorted(classes)}")
    if len(classes) < 2:
        raise CovariateError("logistic regression needs both classes present")

    n = X.shape[0]
    augmented = np.hstack([X, np.ones((n, 1))])
    sigma_max = float(np.linalg.svd(augmented, compute_uv=False)[0])
    lipschitz = (sigma_max**2 / 4.0 + l2) / n
    step = 1.0 / lipschitz

    w = np.zeros(X.shape[1], dtype=np.float64)
    b = 0.0
    grad_norm = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        _, grad_w, grad_b = logistic_loss_and_grad(w, b, X, y, l2)
        grad_norm = float(math.hypot(np.linalg.norm(grad_w), grad_b))
        if grad_norm <= tol:
            break
        w -= step * grad_w
        b -= step * grad_b
    return LogisticModel(
        weights=w,
        intercept=b,
        l2=l2,
        iterations=iterations,
        grad_norm=grad_norm,
        feature_names=tuple(feature_names),
    )


@dataclass(frozen=True)
class ClinicalModel:
    """Schema + standardization + fitted logistic weights, end to end."""

    schema: CovariateSchema
    stats: StandardizationStats
    logistic: LogisticModel

    def predict_row(self, row: Mapping) -> float:
        vec = encode_covariates(row, self.schema, self.stats)
        return float(self.logistic.predict_proba(vec[None, :])[0])

    def save(self, path: str | Path) -> None:
        payload = {
            "kind": "clinical_logistic",
            "schema": self.schema.to_json(),
            "stats": self.stats.to_json(),
            "logistic": self.logistic.to_json(),
        }
        Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClinicalModel":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("kind") != "clinical_logistic":
            raise CovariateError(f"{path} is not a clinical model file")
        return cls(
            schema=CovariateSchema.from_json(obj["schema"]),
            stats=StandardizationStats.from_json(obj["stats"]),
            logistic=LogisticModel.from_json(obj["logistic"]),
        )


def train_clinical(
    rows: Sequence[Mapping],
    labels: Sequence[int],
    schema: CovariateSchema,
    l2: float = 1.0,
    seed: int = 0,
) -> ClinicalModel:
    if len(rows) != len(labels):
        raise CovariateError(f"{len(rows)} rows but {len(labels)} labels")
    stats = fit_standardizer(rows, schema)
    X = encode_matrix(rows, schema, stats)
    names = feature_names(schema, stats)
    model = train_logistic(
        X, np.asarray(labels, dtype=np.float64), l2=l2, seed=seed, feature_names=names
    )
    return ClinicalModel(schema=schema, stats=stats, logistic=model)


# ---------------------------------------------------------------------------
# combined image + covariates model


def read_covariate_rows(path: str | Path) -> dict[str, dict]:
    """CSV keyed by ``image_id``; each value is the raw row dict."""
    rows: dict[str, dict] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "image_id" not in reader.fieldnames:
            raise CovariateError(f"{path}: expected a CSV with an 'image_id' column")
        for row in reader:
            rows[row["image_id"]] = dict(row)
    return rows


@dataclass(frozen=True)
class CombinedTrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def lr_at(self, epoch: int) -> float:
        return cosine_lr(epoch, self.epochs, self.lr)

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "CombinedTrainConfig":
        return cls(**dict(obj))


class CombinedModel:
    """Frozen image backbone plus one linear layer over pooled features
    concatenated with the encoded covariate vector."""

    def __init__(
        self,
        backbone,
        fused,
        schema: CovariateSchema,
        stats: StandardizationStats,
        channels: tuple[int, ...],
        image_side: int,
    ):
        self.backbone = backbone.eval()
        self.fused = fused
        self.schema = schema
        self.stats = stats
        self.channels = tuple(channels)
        self.image_side = int(image_side)
        for p in self.backbone.parameters():
            p.requires_grad_(False)

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_channels

    @property
    def covariate_dim(self) -> int:
        return self.fused.in_features - self.feature_dim

    def image_features(self, image: np.ndarray) -> np.ndarray:
        side = self.image_side
        resized = cv2.resize(image, (side, side), interpolation=cv2.INTER_AREA)
        with torch.no_grad():
            fmap = self.backbone(to_tensor(resized))
            return fmap.mean(dim=(2, 3))[0].numpy()

    def logit(self, image: np.ndarray, row: Mapping) -> float:
        feats = self.image_features(image)
        vec = encode_covariates(row, self.schema, self.stats)
        x = torch.from_numpy(np.concatenate([feats, vec]).astype(np.float32))
        with torch.no_grad():
            return float(self.fused(x)[0].item())

    def predict(self, image: np.ndarray, row: Mapping) -> float:
        z = self.logit(image, row)
        p = 1.0 / (1.0 + math.exp(-z))
        return float(min(max(p, 1e-7), 1.0 - 1e-7))

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(
            {"backbone": self.backbone.state_dict(), "fused": self.fused.state_dict()},
            directory / "weights.pt",
        )
        meta = {
            "kind": "combined",
            "schema": self.schema.to_json(),
            "stats": self.stats.to_json(),
            "channels": list(self.channels),
            "image_side": self.image_side,
        }
        (directory / "model.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "CombinedModel":
        from torch import nn

        from .nets import ConvBackbone

        directory = Path(directory)
        meta_path = directory / "model.json"
        if not meta_path.exists():
            raise ModelIOError(f"no model.json under {directory}")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("kind") != "combined":
            raise ModelIOError(f"{directory} holds {meta.get('kind')!r}, not a combined model")
        schema = CovariateSchema.from_json(meta["schema"])
        stats = StandardizationStats.from_json(meta["stats"])
        channels = tuple(meta["channels"])
        backbone = ConvBackbone(channels)
        state = torch.load(directory / "weights.pt", weights_only=True)
        backbone.load_state_dict(state["backbone"])
        cov_dim = len(stats.kept) + sum(len(levels) + 1 for _, levels in schema.categorical)
        fused = nn.Linear(backbone.out_channels + cov_dim, 1)
        fused.load_state_dict(state["fused"])
        return cls(backbone, fused, schema, stats, channels, meta["image_side"])


def _combined_split(manifest, covariate_rows, split):
    """Records of a split that have a covariate row, with exclusion warning."""
    records = list(manifest.split_records(split))
    kept = [r for r in records if r.image_id in covariate_rows]
    dropped = len(records) - len(kept)
    if dropped:
        warnings.warn(f"{dropped} {split} image(s) have no covariate row and were skipped")
    return kept


def train_combined(
    cls_model,
    manifest,
    covariate_rows: Mapping[str, Mapping],
    schema: CovariateSchema,
    config: CombinedTrainConfig | None = None,
) -> tuple[CombinedModel, list[dict]]:
    """Fuse a trained image classifier with covariates.

    The classifier's convolutional backbone is frozen (eval mode,
    gradients off); only the new linear layer over pooled image features
    and the encoded covariate vector trains.  Pooled features are
    therefore constant and computed once per image up front.
    """
    from torch import nn

    from .nets import seed_everything

    config = config or CombinedTrainConfig()
    train_records = _combined_split(manifest, covariate_rows, "train")
    if not train_records:
        raise CovariateError("no training images with covariate rows")

    train_rows = [covariate_rows[r.image_id] for r in train_records]
    stats = fit_standardizer(train_rows, schema)
    Z = encode_matrix(train_rows, schema, stats)
    targets = np.array([float(r.image_label) for r in train_records])
    if len(set(targets.tolist())) < 2:
        raise ConfigError("combined training needs both image labels present")

    backbone = cls_model.net.backbone
    side = cls_model.config.crop_side

    def pooled(records):
        feats = []
        for rec in records:
            image = cv2.imread(str(manifest.resolve_path(rec)))
            if image is None:
                raise ModelIOError(f"cannot decode {manifest.resolve_path(rec)}")
            resized = cv2.resize(image, (side, side), interpolation=cv2.INTER_AREA)
            with torch.no_grad():
                fmap = backbone.eval()(to_tensor(resized))
                feats.append(fmap.mean(dim=(2, 3))[0].numpy())
        return np.stack(feats) if feats else np.zeros((0, backbone.out_channels))

    F_train = pooled(train_records)
    X = torch.from_numpy(np.hstack([F_train, Z]).astype(np.float32))
    y = torch.from_numpy(targets.astype(np.float32))

    val_records = _combined_split(manifest, covariate_rows, "val")
    val_eval = None
    if val_records:
        val_targets = [int(r.image_label) for r in val_records]
        if len(set(val_targets)) == 2:
            F_val = pooled(val_records)
            Z_val = encode_matrix([covariate_rows[r.image_id] for r in val_records], schema, stats)
            X_val = torch.from_numpy(np.hstack([F_val, Z_val]).astype(np.float32))
            val_eval = (X_val, val_targets)

    seed_everything(config.seed)
    fused = nn.Linear(X.shape[1], 1)
    opt = torch.optim.SGD(
        fused.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    loss_fn = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(config.seed)
    n = len(X)
    curves = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            opt.zero_grad()
            out = fused(X[idx]).squeeze(-1)
            loss = loss_fn(out, y[idx])
            loss.backward()
            opt.step()
            total += float(loss.item())
            batches += 1
        entry = {"epoch": epoch, "lr": lr, "loss": total / max(batches, 1)}
        if val_eval is not None:
            with torch.no_grad():
                scores = torch.sigmoid(fused(val_eval[0]).squeeze(-1)).tolist()
            entry["val_auc"] = auc(list(zip(scores, val_eval[1])))
        curves.append(entry)

    model = CombinedModel(
        backbone, fused, schema, stats, cls_model.config.channels, side
    )
    return model, curves


def predict_combined(model: CombinedModel, image: np.ndarray, row: Mapping) -> float:
    return model.predict(image, row)
