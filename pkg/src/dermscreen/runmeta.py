"""Run manifests: what went in, which config, which seed.

Deliberately timestamp-free so re-running a command over the same
inputs produces byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: Mapping) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def write_run_manifest(
    directory: str | Path,
    command: str,
    inputs: Mapping[str, str],
    config: Mapping,
    seed: int,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "inputs": {k: str(v) for k, v in sorted(inputs.items())},
        "config": dict(config),
        "config_sha256": config_hash(config),
        "seed": int(seed),
    }
    path = directory / "run.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_run_manifest(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
