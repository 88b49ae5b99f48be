"""Scored detections and the COCO results file format."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .boxes import BBox
from .exceptions import ParseError, ValidationError


@dataclass(frozen=True)
class Detection:
    image_id: int
    category_id: int
    bbox: BBox
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValidationError(f"detection on image {self.image_id}: non-finite score")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "category_id": self.category_id,
                "bbox": self.bbox.to_list(), "score": self.score}


DetectionSet = list[Detection]


def detections_from_json(raw) -> DetectionSet:
    if not isinstance(raw, list):
        raise ParseError("detection file must hold a JSON array")
    out = []
    for i, rec in enumerate(raw):
        try:
            out.append(Detection(int(rec["image_id"]), int(rec["category_id"]),
                                 BBox(*(float(v) for v in rec["bbox"])), float(rec["score"])))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"detection #{i}: malformed record ({exc})") from None
        except ValidationError as exc:
            raise ValidationError(f"detection #{i}: {exc}") from None
    return out


def save_detections(dets: DetectionSet, path) -> None:
    Path(path).write_text(json.dumps([d.to_dict() for d in dets]), encoding="utf-8")


def load_detections(path) -> DetectionSet:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from None
    return detections_from_json(raw)
