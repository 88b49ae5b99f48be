"""COCO-style average precision with base/novel, size and frequency splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .boxes import iou_matrix
from .dataset import Dataset, Frequency, frequency_buckets
from .detections import Detection
from .exceptions import ParseError, ValidationError


def _default_thresholds():
    return tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, math.inf),
}


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = field(default_factory=_default_thresholds)
    recall_points: int = 101
    max_dets_per_image: int = 100
    area_ranges: dict = field(default_factory=lambda: dict(AREA_RANGES))

    def __post_init__(self):
        thr = tuple(float(t) for t in self.iou_thresholds)
        object.__setattr__(self, "iou_thresholds", thr)
        if not thr or any(not 0 < t <= 1 for t in thr):
            raise ValidationError("IoU thresholds must lie in (0, 1]")
        if any(b <= a for a, b in zip(thr, thr[1:])):
            raise ValidationError("IoU thresholds must be strictly increasing")
        if self.recall_points < 2:
            raise ValidationError("need at least two recall points")
        if self.max_dets_per_image < 1:
            raise ValidationError("max_dets_per_image must be >= 1")
        if "all" not in self.area_ranges:
            raise ValidationError("area_ranges must include 'all'")


METRIC_NAMES = ("AP", "AP50", "AP75", "bAP", "bAP50", "bAP75", "nAP", "nAP50", "nAP75",
                "APs", "APm", "APl", "APr", "APc", "APf")


@dataclass
class MetricsReport:
    """Named aggregate metrics plus per-class AP/AP50/AP75.

    Absent values (no ground truth behind them) are ``None``.
    """

    metrics: dict[str, float | None]
    per_class: dict[int, dict[str, float | None]]

    def __getitem__(self, name):
        return self.metrics[name]

    def to_dict(self) -> dict:
        out = {name: self.metrics.get(name) for name in METRIC_NAMES}
        out["per_class"] = {str(c): dict(v) for c, v in sorted(self.per_class.items())}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricsReport":
        try:
            per_class = {int(c): dict(v) for c, v in raw.get("per_class", {}).items()}
            return cls({k: raw.get(k) for k in METRIC_NAMES}, per_class)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"malformed metrics report: {exc}") from None


def save_report(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")


def load_report(path) -> MetricsReport:
    try:
        return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from None


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _greedy_match(ious, thr, gt_ignore):
    """Core matcher over R independent settings (rows of ``thr``/``gt_ignore``).

    ``ious`` is (n_det, n_gt), ``thr`` (R,), ``gt_ignore`` (R, n_gt).
    Returns ``(tp, hit_ignored)`` each (R, n_det).
    """
    n_det, n_gt = ious.shape
    R = thr.size
    tp = np.zeros((R, n_det), bool)
    hit_ignored = np.zeros((R, n_det), bool)
    if n_gt == 0 or n_det == 0:
        return tp, hit_ignored
    matched = np.zeros((R, n_gt), bool)
    rows = np.arange(R)
    for i in range(n_det):
        ok = ~matched & (ious[i][None, :] >= thr[:, None])
        if not ok.any():
            continue
        done = np.zeros(R, bool)
        for want_ignored, flags in ((False, tp), (True, hit_ignored)):
            cand = ok & (gt_ignore == want_ignored)
            open_ = cand.any(axis=1) & ~done
            if not open_.any():
                continue
            best = np.where(cand, ious[i][None, :], -1.0).argmax(axis=1)
            hit = rows[open_]
            matched[hit, best[open_]] = True
            flags[hit, i] = True
            done |= open_
    return tp, hit_ignored


def match_detections(det_boxes, gt_boxes, iou_thresh, gt_ignore=None, det_ignore=None):
    """Greedy matching of score-sorted detections to ground truth.

    ``det_boxes`` must already be in processing order (descending score).
    Each detection takes the unmatched ground truth with the highest IoU at
    or above ``iou_thresh`` (lowest index on IoU ties), preferring
    non-ignored ground truth. Detections matched to ignored ground truth,
    and unmatched detections flagged in ``det_ignore``, are ignored.
    ``iou_thresh`` may be a vector of thresholds, matched independently.

    Returns ``(tp, ignored)`` boolean arrays of shape (T, n_dets); a
    detection that is neither is a false positive.
    """
    thr = np.atleast_1d(np.asarray(iou_thresh, dtype=np.float64))
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n_gt = gt_boxes.shape[0]
    g_ign = np.zeros(n_gt, bool) if gt_ignore is None else np.asarray(gt_ignore, bool)
    g_ign = np.broadcast_to(g_ign, (thr.size, n_gt))
    tp, ignored = _greedy_match(iou_matrix(det_boxes, gt_boxes), thr, g_ign)
    if det_ignore is not None:
        ignored |= ~tp & np.asarray(det_ignore, bool)[None, :]
    return tp, ignored


def average_precision(scores, tp, n_gt: int, recall_points: int = 101,
                      order_keys=None) -> float | None:
    """Interpolated AP from pooled detections of one class.

    ``tp`` flags each (non-ignored) detection; ordering is by descending
    score, ties by ``order_keys`` (defaults to input order). Returns
    ``None`` when ``n_gt`` is zero.
    """
    if n_gt == 0:
        return None
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if scores.size == 0:
        return 0.0
    keys = np.arange(scores.size) if order_keys is None else np.asarray(order_keys)
    order = np.lexsort((keys, -scores))
    tps = np.cumsum(tp[order])
    fps = np.cumsum(~tp[order])
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, recall_points)
    idx = np.searchsorted(recall, grid, side="left")
    vals = np.where(idx < envelope.size, envelope[np.minimum(idx, envelope.size - 1)], 0.0)
    return float(vals.mean())


def _truncate(dets: list[Detection], max_dets: int) -> list[int]:
    by_image: dict[int, list[int]] = {}
    for i, det in enumerate(dets):
        by_image.setdefault(det.image_id, []).append(i)
    keep = []
    for idx in by_image.values():
        idx.sort(key=lambda i: (-dets[i].score, i))
        keep.extend(idx[:max_dets])
    return sorted(keep)


def per_class_ap(dets: list[Detection], d: Dataset, cfg: EvalConfig,
                 image_ids: Iterable[int] | None = None) -> dict[str, dict[int, list]]:
    """AP per area range, class and IoU threshold.

    Returns ``{area_name: {category_id: [ap_t for t in thresholds]}}`` with
    ``None`` entries for classes without ground truth in that range.
    """
    known = set(d.categories.ids)
    for i, det in enumerate(dets):
        if det.category_id not in known:
            raise ValidationError(f"detection #{i}: unknown category {det.category_id}")
    images = {im.id for im in d.images} if image_ids is None else set(image_ids)

    kept = [i for i in _truncate(dets, cfg.max_dets_per_image) if dets[i].image_id in images]
    det_groups: dict[tuple[int, int], list[int]] = {}
    for i in kept:
        det_groups.setdefault((dets[i].category_id, dets[i].image_id), []).append(i)
    gt_groups: dict[tuple[int, int], list] = {}
    for ann in d.annotations:
        if ann.image_id in images:
            gt_groups.setdefault((ann.category_id, ann.image_id), []).append(ann.bbox)

    thr = np.asarray(cfg.iou_thresholds)
    T = thr.size
    names = list(cfg.area_ranges)
    lo = np.array([cfg.area_ranges[n][0] for n in names])
    hi = np.array([cfg.area_ranges[n][1] for n in names])
    thr_rows = np.tile(thr, len(names))

    groups_by_class: dict[int, set[int]] = {}
    for c, im in list(det_groups) + list(gt_groups):
        groups_by_class.setdefault(c, set()).add(im)

    out = {name: {} for name in names}
    for cid in d.categories.ids:
        scores, keys, tps, igns = [], [], [], []
        n_gt = np.zeros(len(names), dtype=np.int64)
        for im in sorted(groups_by_class.get(cid, ())):
            didx = sorted(det_groups.get((cid, im), []), key=lambda i: (-dets[i].score, i))
            gts = gt_groups.get((cid, im), [])
            garea = np.array([b.area() for b in gts])
            g_ign = (garea[None, :] < lo[:, None]) | (garea[None, :] >= hi[:, None])
            n_gt += (~g_ign).sum(axis=1)
            if not didx:
                continue
            dboxes = np.array([dets[i].bbox.to_xyxy() for i in didx])
            darea = np.array([dets[i].bbox.area() for i in didx])
            d_ign = (darea[None, :] < lo[:, None]) | (darea[None, :] >= hi[:, None])
            if gts:
                gboxes = np.array([b.to_xyxy() for b in gts])
                tp, ign = _greedy_match(iou_matrix(dboxes, gboxes), thr_rows,
                                        np.repeat(g_ign, T, axis=0))
            else:
                tp = np.zeros((thr_rows.size, len(didx)), bool)
                ign = tp.copy()
            ign |= ~tp & np.repeat(d_ign, T, axis=0)
            scores.append(np.array([dets[i].score for i in didx]))
            keys.append(np.asarray(didx, dtype=np.int64))
            tps.append(tp)
            igns.append(ign)
        if scores:
            s_all, k_all = np.concatenate(scores), np.concatenate(keys)
            tp_all, ign_all = np.concatenate(tps, axis=1), np.concatenate(igns, axis=1)
        else:
            s_all, k_all = np.zeros(0), np.zeros(0, np.int64)
            tp_all = ign_all = np.zeros((thr_rows.size, 0), bool)
        for a, name in enumerate(names):
            aps = []
            for t in range(T):
                r = a * T + t
                keep = ~ign_all[r]
                aps.append(average_precision(s_all[keep], tp_all[r][keep], int(n_gt[a]),
                                             cfg.recall_points, k_all[keep]))
            out[name][cid] = aps
    return out


def _threshold_index(cfg: EvalConfig, value: float) -> int | None:
    for i, t in enumerate(cfg.iou_thresholds):
        if math.isclose(t, value, abs_tol=1e-9):
            return i
    return None


def evaluate(dets: list[Detection], d: Dataset, cfg: EvalConfig | None = None,
             image_ids: Iterable[int] | None = None) -> MetricsReport:
    """Score ``dets`` against the annotations of ``d``.

    ``image_ids`` restricts evaluation to a subset of images (e.g. a test
    split); detections on other images are dropped.
    """
    cfg = cfg or EvalConfig()
    table = per_class_ap(dets, d, cfg, image_ids)
    i50, i75 = _threshold_index(cfg, 0.5), _threshold_index(cfg, 0.75)

    def at(aps, i):
        if i is None or aps[i] is None:
            return None
        return aps[i]

    per_class = {}
    for cid, aps in table["all"].items():
        per_class[cid] = {"ap": None if aps[0] is None else float(np.mean(aps)),
                          "ap50": at(aps, i50), "ap75": at(aps, i75)}

    def agg(classes, key="ap"):
        return _mean(per_class[c][key] for c in classes)

    base, novel = d.categories.base_ids, d.categories.novel_ids
    everything = d.categories.ids
    metrics = {
        "AP": agg(everything), "AP50": agg(everything, "ap50"), "AP75": agg(everything, "ap75"),
        "bAP": agg(base), "bAP50": agg(base, "ap50"), "bAP75": agg(base, "ap75"),
        "nAP": agg(novel), "nAP50": agg(novel, "ap50"), "nAP75": agg(novel, "ap75"),
    }
    for name, key in (("small", "APs"), ("medium", "APm"), ("large", "APl")):
        if name in table:
            metrics[key] = _mean(None if aps[0] is None else float(np.mean(aps))
                                 for aps in table[name].values())
        else:
            metrics[key] = None
    buckets = frequency_buckets(d)
    for freq, key in ((Frequency.RARE, "APr"), (Frequency.COMMON, "APc"),
                      (Frequency.FREQUENT, "APf")):
        metrics[key] = agg([c for c in everything if buckets[c] is freq])
    return MetricsReport(metrics, per_class)
