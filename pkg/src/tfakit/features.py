"""Frozen per-proposal features: storage, binary I/O and a synthetic generator.

Features stand in for the output of a fixed detector backbone. Values are
held as float32, the on-disk precision, so a write/read cycle is exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BBox, encode_deltas, iou_matrix
from .dataset import Annotation, Category, CategoryTable, Dataset, Image, Split
from .exceptions import ParseError, ValidationError
from .sampler import ShotSet

MAGIC = b"TFAF"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
BACKGROUND = -1


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([
        ("image_id", "<u8"),
        ("proposal", "<f4", (4,)),
        ("label", "<i4"),
        ("reg_target", "<f4", (4,)),
        ("feature", "<f4", (dim,)),
    ])


@dataclass(frozen=True)
class FeatureRecord:
    image_id: int
    proposal: BBox
    label: int
    reg_target: tuple[float, float, float, float]
    feature: np.ndarray


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Column-oriented set of proposal records sharing one feature dimension.

    ``proposals`` are corner-form ``(x1, y1, x2, y2)``; ``labels`` hold
    category ids, with -1 marking background.
    """

    image_ids: np.ndarray
    proposals: np.ndarray
    labels: np.ndarray
    reg_targets: np.ndarray
    features: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "image_ids", np.ascontiguousarray(self.image_ids, dtype=np.int64).reshape(-1))
        n = self.image_ids.size
        set_(self, "proposals", np.ascontiguousarray(self.proposals, dtype=np.float32).reshape(n, 4))
        set_(self, "labels", np.ascontiguousarray(self.labels, dtype=np.int32).reshape(n))
        set_(self, "reg_targets", np.ascontiguousarray(self.reg_targets, dtype=np.float32).reshape(n, 4))
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValidationError(f"features must be ({n}, d), got {feats.shape}")
        if feats.shape[1] < 1:
            raise ValidationError("feature dimension must be >= 1")
        set_(self, "features", feats)
        set_(self, "dim", feats.shape[1])
        for arr in (self.image_ids, self.proposals, self.labels, self.reg_targets, self.features):
            arr.flags.writeable = False

    def __len__(self):
        return self.image_ids.size

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))

    def record(self, i: int) -> FeatureRecord:
        return FeatureRecord(
            int(self.image_ids[i]),
            BBox.from_xyxy(self.proposals[i]),
            int(self.labels[i]),
            tuple(float(v) for v in self.reg_targets[i]),
            self.features[i],
        )

    def take(self, index) -> "FeatureSet":
        index = np.asarray(index)
        return FeatureSet(
            self.image_ids[index], self.proposals[index], self.labels[index],
            self.reg_targets[index], self.features[index].reshape(-1, self.dim),
        )

    def with_labels(self, keep, background: bool = True) -> "FeatureSet":
        """Records whose label is in ``keep`` (plus background if asked)."""
        mask = np.isin(self.labels, np.fromiter(keep, dtype=np.int64))
        if background:
            mask |= self.labels == BACKGROUND
        return self.take(np.flatnonzero(mask))

    @property
    def foreground(self) -> np.ndarray:
        return self.labels != BACKGROUND

    def equals(self, other: "FeatureSet") -> bool:
        """Bitwise equality of every column."""
        return self.dim == other.dim and all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in ("image_ids", "proposals", "labels", "reg_targets", "features")
        )

    @classmethod
    def from_records(cls, records, dim: int | None = None) -> "FeatureSet":
        records = list(records)
        if not records:
            if dim is None:
                raise ValidationError("empty record list needs an explicit dim")
            return cls(np.zeros(0), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 4)),
                       np.zeros((0, dim)))
        return cls(
            [r.image_id for r in records],
            [r.proposal.to_xyxy() for r in records],
            [r.label for r in records],
            [r.reg_target for r in records],
            np.stack([np.asarray(r.feature) for r in records]),
        )


def write_features(feats: FeatureSet, path) -> None:
    rec = np.zeros(len(feats), dtype=_record_dtype(feats.dim))
    rec["image_id"] = feats.image_ids.astype(np.uint64)
    rec["proposal"] = feats.proposals
    rec["label"] = feats.labels
    rec["reg_target"] = feats.reg_targets
    rec["feature"] = feats.features
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, feats.dim, len(feats)))
        fh.write(rec.tobytes())


def read_features(path) -> FeatureSet:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ParseError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    if dim < 1:
        raise ParseError(f"{path}: feature dimension must be >= 1")
    dtype = _record_dtype(dim)
    expected = _HEADER.size + count * dtype.itemsize
    if len(blob) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for {count} records, got {len(blob)}")
    rec = np.frombuffer(blob, dtype=dtype, count=count, offset=_HEADER.size)
    return FeatureSet(
        rec["image_id"].astype(np.int64), rec["proposal"], rec["label"],
        rec["reg_target"], rec["feature"].reshape(count, dim),
    )


def assign_annotations(feats: FeatureSet, d: Dataset) -> np.ndarray:
    """Annotation id behind each foreground record, -1 for background.

    A foreground record maps to the same-image, same-class annotation it
    overlaps most. Records with no overlapping annotation also get -1.
    """
    out = np.full(len(feats), -1, dtype=np.int64)
    gts: dict[tuple[int, int], list[Annotation]] = {}
    for ann in d.annotations:
        gts.setdefault((ann.image_id, ann.category_id), []).append(ann)
    fg = np.flatnonzero(feats.foreground)
    keys = {}
    for i in fg:
        keys.setdefault((int(feats.image_ids[i]), int(feats.labels[i])), []).append(i)
    for key, rows in keys.items():
        anns = gts.get(key)
        if not anns:
            continue
        ov = iou_matrix(feats.proposals[rows], np.stack([a.bbox.to_xyxy() for a in anns]))
        best = ov.argmax(axis=1)
        hit = ov[np.arange(len(rows)), best] > 0
        out[np.asarray(rows)[hit]] = [anns[j].id for j in best[hit]]
    return out


def select_shots(feats: FeatureSet, d: Dataset, shots: ShotSet,
                 assigned: np.ndarray | None = None) -> FeatureSet:
    """Fine-tuning records for a shot set.

    Keeps the foreground records of picked annotations and the background
    records of every image that holds a pick.
    """
    if assigned is None:
        assigned = assign_annotations(feats, d)
    picked = np.fromiter(shots.annotation_ids, dtype=np.int64)
    fg_keep = np.isin(assigned, picked) & feats.foreground
    images = np.unique(feats.image_ids[fg_keep])
    bg_keep = ~feats.foreground & np.isin(feats.image_ids, images)
    return feats.take(np.flatnonzero(fg_keep | bg_keep))


@dataclass(frozen=True)
class SynthConfig:
    n_classes_base: int = 15
    n_classes_novel: int = 5
    dim: int = 64
    per_class_count: int = 100
    class_separation: float = 4.0
    noise_sigma: float = 1.0
    seed: int = 0
    test_per_class: int = 40
    proposals_per_gt: int = 2
    bg_per_image: int = 2
    max_objects_per_image: int = 3
    jitter: float = 0.1
    image_width: int = 640
    image_height: int = 480

    def __post_init__(self):
        for name in ("n_classes_base", "n_classes_novel", "dim", "per_class_count",
                     "test_per_class", "proposals_per_gt", "max_objects_per_image"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.bg_per_image < 0:
            raise ValidationError("bg_per_image must be >= 0")
        if not self.class_separation > 0 or not self.noise_sigma > 0:
            raise ValidationError("class_separation and noise_sigma must be > 0")
        if not 0 <= self.jitter < 0.5:
            raise ValidationError("jitter must be in [0, 0.5)")
        if self.max_objects_per_image > 4:
            raise ValidationError("at most 4 objects per image (one per quadrant)")
        if self.dim < self.n_classes_base + self.n_classes_novel:
            raise ValidationError(
                f"dim {self.dim} too small for {self.n_classes_base + self.n_classes_novel} "
                "mutually orthogonal class directions"
            )


class _Builder:
    """Accumulates images, annotations and records for one synthetic split."""

    def __init__(self, cfg: SynthConfig, rng, means, next_image, next_ann):
        self.cfg, self.rng, self.means = cfg, rng, means
        self.next_image, self.next_ann = next_image, next_ann
        self.images, self.annotations = [], []
        self.image_ids, self.proposals, self.labels, self.regs, self.feats = [], [], [], [], []

    def _object_box(self, cell):
        cfg, rng = self.cfg, self.rng
        cx0, cy0, cw, ch = cell
        w = float(np.exp(rng.uniform(np.log(16), np.log(cw - 4))))
        h = float(np.clip(w * np.exp(rng.uniform(-0.5, 0.5)), 12, ch - 4))
        x = cx0 + rng.uniform(0, cw - w)
        y = cy0 + rng.uniform(0, ch - h)
        return np.array([x, y, x + w, y + h])

    def _jitter(self, gt):
        cfg, rng = self.cfg, self.rng
        w, h = gt[2] - gt[0], gt[3] - gt[1]
        j = cfg.jitter
        cx = gt[0] + 0.5 * w + rng.uniform(-j, j) * w
        cy = gt[1] + 0.5 * h + rng.uniform(-j, j) * h
        pw = w * np.exp(rng.uniform(-j, j))
        ph = h * np.exp(rng.uniform(-j, j))
        box = np.array([cx - 0.5 * pw, cy - 0.5 * ph, cx + 0.5 * pw, cy + 0.5 * ph])
        box[[0, 2]] = np.clip(box[[0, 2]], 0, cfg.image_width)
        box[[1, 3]] = np.clip(box[[1, 3]], 0, cfg.image_height)
        return box.astype(np.float32).astype(np.float64)

    def _background_box(self, gts):
        cfg, rng = self.cfg, self.rng
        for _ in range(100):
            w = rng.uniform(16, cfg.image_width / 3)
            h = rng.uniform(16, cfg.image_height / 3)
            x = rng.uniform(0, cfg.image_width - w)
            y = rng.uniform(0, cfg.image_height - h)
            box = np.array([x, y, x + w, y + h]).astype(np.float32).astype(np.float64)
            if not gts or iou_matrix(box, np.stack(gts)).max() < 0.3:
                return box
        return box

    def _add_record(self, image_id, proposal, label, reg, feature):
        self.image_ids.append(image_id)
        self.proposals.append(proposal)
        self.labels.append(label)
        self.regs.append(reg)
        self.feats.append(feature)

    def build(self, per_class: int, proposals_per_gt: int):
        cfg, rng = self.cfg, self.rng
        n_classes = self.means.shape[1]
        objects = rng.permutation(np.repeat(np.arange(n_classes), per_class))
        half_w, half_h = cfg.image_width / 2, cfg.image_height / 2
        cells = [(0, 0), (half_w, 0), (0, half_h), (half_w, half_h)]
        pos = 0
        while pos < objects.size:
            n_obj = int(rng.integers(1, cfg.max_objects_per_image + 1))
            chunk = objects[pos:pos + n_obj]
            pos += chunk.size
            image_id = self.next_image
            self.next_image += 1
            self.images.append(Image(image_id, cfg.image_width, cfg.image_height))
            quads = rng.permutation(4)[:chunk.size]
            gts = []
            for cls_index, q in zip(chunk, quads):
                gt = self._object_box((*cells[q], half_w, half_h))
                gts.append(gt)
                cat_id = int(cls_index) + 1
                self.annotations.append(
                    Annotation(self.next_ann, image_id, cat_id, BBox.from_xyxy(gt)))
                self.next_ann += 1
                for _ in range(proposals_per_gt):
                    prop = self._jitter(gt)
                    feature = (cfg.class_separation * self.means[:, cls_index]
                               + cfg.noise_sigma * rng.standard_normal(cfg.dim))
                    self._add_record(image_id, prop, cat_id, encode_deltas(prop, gt), feature)
            for _ in range(cfg.bg_per_image):
                prop = self._background_box(gts)
                feature = cfg.noise_sigma * rng.standard_normal(cfg.dim)
                self._add_record(image_id, prop, BACKGROUND, np.zeros(4), feature)
        return FeatureSet(
            self.image_ids, np.array(self.proposals).reshape(-1, 4), self.labels,
            np.array(self.regs).reshape(-1, 4), np.array(self.feats).reshape(-1, cfg.dim),
        )


def synth_features(cfg: SynthConfig) -> tuple[Dataset, FeatureSet, FeatureSet]:
    """Deterministic synthetic benchmark: annotations, train and test features.

    Class directions are orthonormal; a foreground feature is its class
    direction scaled by ``class_separation`` plus isotropic Gaussian noise,
    and background features are pure noise. The returned dataset covers
    both train and test images; the train split holds exactly
    ``per_class_count`` single-proposal instances per class.
    """
    rng = np.random.default_rng(cfg.seed)
    n_classes = cfg.n_classes_base + cfg.n_classes_novel
    q, _ = np.linalg.qr(rng.standard_normal((cfg.dim, n_classes)))
    means = q[:, :n_classes]

    train = _Builder(cfg, rng, means, next_image=1, next_ann=1)
    train_feats = train.build(cfg.per_class_count, proposals_per_gt=1)
    test = _Builder(cfg, rng, means, next_image=train.next_image, next_ann=train.next_ann)
    test_feats = test.build(cfg.test_per_class, cfg.proposals_per_gt)

    categories = tuple(
        Category(i + 1, f"{'base' if i < cfg.n_classes_base else 'novel'}_{i + 1:02d}",
                 Split.BASE if i < cfg.n_classes_base else Split.NOVEL)
        for i in range(n_classes)
    )
    dataset = Dataset(
        tuple(train.images + test.images),
        tuple(train.annotations + test.annotations),
        CategoryTable(categories),
    )
    return dataset, train_feats, test_feats
