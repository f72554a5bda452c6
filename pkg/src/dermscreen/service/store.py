"""Append-only annotation store with a materialized manifest.

Every accepted annotation becomes one line in revisions.jsonl; the
latest revision per image wins and is mirrored into manifest.json,
which load_manifest can read back directly.  Writes are serialized
with a lock; reads work off in-memory state rebuilt at startup.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

from ..data import DatasetManifest, ImageRecord, Roi, save_manifest
from ..errors import ManifestError


class AnnotationStore:
    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.revisions_path = self.directory / "revisions.jsonl"
        self.manifest_path = self.directory / "manifest.json"
        self._lock = threading.Lock()
        self._records: dict[str, ImageRecord] = {}
        self._history: dict[str, list[dict]] = {}
        self._next_revision = 1
        self._replay()

    def _replay(self) -> None:
        if not self.revisions_path.exists():
            return
        with open(self.revisions_path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                entry = json.loads(line)
                record = _record_from_json(entry["record"])
                self._records[record.image_id] = record
                self._history.setdefault(record.image_id, []).append(entry)
                self._next_revision = max(self._next_revision, entry["revision"] + 1)

    def append(self, record_json: dict, annotator: str | None = None) -> int:
        """Validate, persist, and materialize; returns the revision number."""
        record = _record_from_json(record_json)
        with self._lock:
            revision = self._next_revision
            self._next_revision += 1
            entry = {"revision": revision, "annotator": annotator, "record": record.to_json()}
            with open(self.revisions_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(entry) + "\n")
            self._records[record.image_id] = record
            self._history.setdefault(record.image_id, []).append(entry)
            save_manifest(self.manifest(), self.manifest_path)
        return revision

    def current(self, image_id: str) -> ImageRecord | None:
        return self._records.get(image_id)

    def history(self, image_id: str) -> list[dict]:
        return list(self._history.get(image_id, ()))

    def manifest(self) -> DatasetManifest:
        records = tuple(self._records[k] for k in sorted(self._records))
        return DatasetManifest(records=records, root=str(self.directory))


def _record_from_json(obj: dict) -> ImageRecord:
    try:
        rois = tuple(Roi.from_json(r, "annotation.roi") for r in obj.get("rois", ()))
        return ImageRecord(
            image_id=obj["image_id"],
            patient_id=obj["patient_id"],
            path=obj["path"],
            capture=obj["capture"],
            skin_tone=obj["skin_tone"],
            width=int(obj["width"]),
            height=int(obj["height"]),
            rois=rois,
        )
    except KeyError as e:
        raise ManifestError(f"annotation missing field {e.args[0]!r}") from None
    except (TypeError, ValueError) as e:
        raise ManifestError(f"invalid annotation: {e}") from None
