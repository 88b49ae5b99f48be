"""Detection annotations: loading, validation, partitioning and buckets."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

from .boxes import BBox
from .exceptions import ParseError, ValidationError

# Frequency bucket thresholds on distinct-image counts.
RARE_MAX_EXCLUSIVE = 10
COMMON_MAX_INCLUSIVE = 100


class Split(str, Enum):
    BASE = "base"
    NOVEL = "novel"


class Frequency(str, Enum):
    RARE = "rare"
    COMMON = "common"
    FREQUENT = "frequent"


@dataclass(frozen=True)
class Image:
    id: int
    width: int
    height: int


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    split: Split


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: BBox


@dataclass(frozen=True)
class CategoryTable:
    entries: tuple[Category, ...]

    @property
    def ids(self) -> list[int]:
        return [c.id for c in self.entries]

    @property
    def base_ids(self) -> list[int]:
        return [c.id for c in self.entries if c.split is Split.BASE]

    @property
    def novel_ids(self) -> list[int]:
        return [c.id for c in self.entries if c.split is Split.NOVEL]

    def __len__(self):
        return len(self.entries)

    def __contains__(self, category_id) -> bool:
        return any(c.id == category_id for c in self.entries)


@dataclass(frozen=True)
class Dataset:
    """Immutable, validated set of images, box annotations and categories."""

    images: tuple[Image, ...]
    annotations: tuple[Annotation, ...]
    categories: CategoryTable

    def __post_init__(self):
        validate(self)

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.images), len(self.annotations), len(self.categories)

    def image(self, image_id: int) -> Image:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def annotations_by_category(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {cid: [] for cid in self.categories.ids}
        for ann in self.annotations:
            out[ann.category_id].append(ann)
        return out


def validate(d: Dataset) -> None:
    """Raise :class:`ValidationError` naming the first offending record."""
    cat_ids = set()
    for cat in d.categories.entries:
        if cat.id in cat_ids:
            raise ValidationError(f"category id {cat.id}: duplicate id")
        if not isinstance(cat.split, Split):
            raise ValidationError(f"category id {cat.id}: field 'split' must be base or novel")
        cat_ids.add(cat.id)

    images = {}
    for im in d.images:
        if im.id in images:
            raise ValidationError(f"image id {im.id}: duplicate id")
        if im.width <= 0 or im.height <= 0:
            raise ValidationError(f"image id {im.id}: non-positive size")
        images[im.id] = im

    ann_ids = set()
    for ann in d.annotations:
        if ann.id in ann_ids:
            raise ValidationError(f"annotation id {ann.id}: duplicate id")
        ann_ids.add(ann.id)
        im = images.get(ann.image_id)
        if im is None:
            raise ValidationError(
                f"annotation id {ann.id}: field 'image_id' references missing image {ann.image_id}"
            )
        if ann.category_id not in cat_ids:
            raise ValidationError(
                f"annotation id {ann.id}: field 'category_id' references missing "
                f"category {ann.category_id}"
            )
        b = ann.bbox
        if b.x + b.w > im.width or b.y + b.h > im.height:
            raise ValidationError(
                f"annotation id {ann.id}: field 'bbox' exceeds image {im.id} bounds"
            )


def _require(record: dict, key: str, kind: str, rid=None):
    if not isinstance(record, dict) or key not in record:
        where = f"{kind} id {rid}" if rid is not None else kind
        raise ValidationError(f"{where}: missing field '{key}'")
    return record[key]


def _as_int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"{where}: expected integer, got {value!r}")
    return value


def dataset_from_dict(raw: dict) -> Dataset:
    if not isinstance(raw, dict):
        raise ParseError("annotation file must hold a JSON object")
    try:
        categories = []
        for rec in _require(raw, "categories", "file"):
            cid = _as_int(_require(rec, "id", "category"), "category")
            split = _require(rec, "split", "category", cid)
            if split not in ("base", "novel"):
                raise ValidationError(f"category id {cid}: field 'split' must be base or novel")
            categories.append(Category(cid, str(_require(rec, "name", "category", cid)), Split(split)))

        images = []
        for rec in _require(raw, "images", "file"):
            iid = _as_int(_require(rec, "id", "image"), "image")
            images.append(Image(
                iid,
                _as_int(_require(rec, "width", "image", iid), f"image id {iid}: field 'width'"),
                _as_int(_require(rec, "height", "image", iid), f"image id {iid}: field 'height'"),
            ))

        annotations = []
        for rec in _require(raw, "annotations", "file"):
            aid = _as_int(_require(rec, "id", "annotation"), "annotation")
            box = _require(rec, "bbox", "annotation", aid)
            if not isinstance(box, list) or len(box) != 4:
                raise ValidationError(f"annotation id {aid}: field 'bbox' must be [x, y, w, h]")
            try:
                bbox = BBox(*(float(v) for v in box))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"annotation id {aid}: field 'bbox' invalid: {exc}") from None
            annotations.append(Annotation(
                aid,
                _as_int(_require(rec, "image_id", "annotation", aid),
                        f"annotation id {aid}: field 'image_id'"),
                _as_int(_require(rec, "category_id", "annotation", aid),
                        f"annotation id {aid}: field 'category_id'"),
                bbox,
            ))
    except TypeError as exc:
        raise ParseError(f"malformed annotation file: {exc}") from None
    return Dataset(tuple(images), tuple(annotations), CategoryTable(tuple(categories)))


def dataset_to_dict(d: Dataset) -> dict:
    return {
        "images": [{"id": im.id, "width": im.width, "height": im.height} for im in d.images],
        "annotations": [
            {"id": a.id, "image_id": a.image_id, "category_id": a.category_id,
             "bbox": a.bbox.to_list()}
            for a in d.annotations
        ],
        "categories": [
            {"id": c.id, "name": c.name, "split": c.split.value} for c in d.categories.entries
        ],
    }


def load_dataset(path) -> Dataset:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from None
    return dataset_from_dict(raw)


def save_dataset(d: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_dict(d)), encoding="utf-8")


def frequency_buckets(d: Dataset) -> dict[int, Frequency]:
    """Bucket categories by the number of distinct images they appear in."""
    images_per_cat = defaultdict(set)
    for ann in d.annotations:
        images_per_cat[ann.category_id].add(ann.image_id)
    out = {}
    for cid in d.categories.ids:
        n = len(images_per_cat[cid])
        if n < RARE_MAX_EXCLUSIVE:
            out[cid] = Frequency.RARE
        elif n <= COMMON_MAX_INCLUSIVE:
            out[cid] = Frequency.COMMON
        else:
            out[cid] = Frequency.FREQUENT
    return out


def filter_by_categories(d: Dataset, keep: Iterable[int]) -> Dataset:
    """Keep only annotations and categories in ``keep``; all images stay."""
    keep = set(keep)
    unknown = keep - set(d.categories.ids)
    if unknown:
        raise ValidationError(f"unknown category ids {sorted(unknown)}")
    return Dataset(
        d.images,
        tuple(a for a in d.annotations if a.category_id in keep),
        CategoryTable(tuple(c for c in d.categories.entries if c.id in keep)),
    )


def subset_images(d: Dataset, image_ids: Iterable[int]) -> Dataset:
    """Restrict to the given images and their annotations; categories stay."""
    image_ids = set(image_ids)
    return Dataset(
        tuple(im for im in d.images if im.id in image_ids),
        tuple(a for a in d.annotations if a.image_id in image_ids),
        d.categories,
    )
