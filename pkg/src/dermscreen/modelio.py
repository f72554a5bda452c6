"""Open a saved model without knowing its kind in advance.

Directory checkpoints carry a model.json whose "kind" field names the
loader; the clinical logistic model is a single JSON file.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ModelIOError

_DIR_KINDS = {
    "detector": "detector",
    "roi_classifier": "classifier",
    "direct_classifier": "classifier",
    "combined": "combined",
}


def model_kind(path: str | Path) -> str:
    path = Path(path)
    if path.is_file():
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ModelIOError(f"cannot read model file {path}: {e}") from e
        return str(obj.get("kind", ""))
    meta_path = path / "model.json"
    if not meta_path.exists():
        raise ModelIOError(f"{path} is neither a model file nor a checkpoint directory")
    obj = json.loads(meta_path.read_text(encoding="utf-8"))
    return str(obj.get("kind", ""))


def load_any_model(path: str | Path):
    """Dispatch to the right loader based on the stored kind."""
    from .classifier import ClassifierModel
    from .clinical import ClinicalModel, CombinedModel
    from .detector import DetectorModel

    path = Path(path)
    kind = model_kind(path)
    if kind == "clinical_logistic":
        return ClinicalModel.load(path if path.is_file() else path / "model.json")
    family = _DIR_KINDS.get(kind)
    if family == "detector":
        return DetectorModel.load(path)
    if family == "classifier":
        return ClassifierModel.load(path)
    if family == "combined":
        return CombinedModel.load(path)
    raise ModelIOError(f"{path} holds unknown model kind {kind!r}")
