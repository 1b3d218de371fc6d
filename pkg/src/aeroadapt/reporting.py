"""Stage reports: per-image audit records with deterministic serialization.

Reports deliberately contain no wall-clock timing or host details, so a
rerun with the same config and seed produces byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class StageReport:
    """One stage's per-image records plus stage-level metadata."""

    stage: str
    records: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    quarantined: list[dict] = field(default_factory=list)

    def add(self, record: dict) -> None:
        if "image_id" not in record:
            raise ValueError("stage records must carry image_id")
        self.records.append(record)

    def quarantine(self, image_id: str, reason: str) -> None:
        self.quarantined.append({"image_id": image_id, "reason": reason})

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "meta": self.meta,
            "records": sorted(self.records, key=lambda r: r["image_id"]),
            "quarantined": sorted(self.quarantined, key=lambda r: r["image_id"]),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def json_clean(obj):
    """Recursively coerce numpy scalars/arrays so json.dumps stays happy."""
    import numpy as np

    if isinstance(obj, dict):
        return {str(k): json_clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj
