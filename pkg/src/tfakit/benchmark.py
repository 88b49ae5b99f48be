"""Repeated-run few-shot benchmark: sample, fine-tune, predict, evaluate, aggregate.

Output layout under ``out``::

    base_head.json, base_metrics.json
    k{K}/run{i:03d}.json          one metrics report per (k, run)
    aggregate_k{K}.csv            metric,n,mean,std,ci95
    cumulative_k{K}.csv           metric,k,mean_k,ci_k
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, subset_images
from .evaluator import METRIC_NAMES, EvalConfig, evaluate, save_report
from .exceptions import TFAError, ValidationError
from .features import FeatureSet, assign_annotations, select_shots
from .head import BASE_TRAIN, FINE_TUNE, Heads, TrainConfig, init_head, predict, save_heads, train_head
from .sampler import sample_kshot, seed_schedule
from .stats import RunSeries, RunStatistics, aggregate_csv, cumulative_csv, summarize

log = logging.getLogger(__name__)

_RUN_FILE = re.compile(r"run(\d+)\.json$")


@dataclass(frozen=True)
class BenchmarkConfig:
    k_values: tuple[int, ...] = (1, 2, 3, 5, 10)
    n_runs: int = 30
    base_seed: int = 0
    classifier: str = "cosine"
    alpha: float = 20.0
    init: str = "random"
    train: TrainConfig = FINE_TUNE
    base_train: TrainConfig = BASE_TRAIN
    eval: EvalConfig = field(default_factory=EvalConfig)
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 100

    def __post_init__(self):
        if not self.k_values or any(k < 1 for k in self.k_values):
            raise ValidationError("k_values must be a nonempty list of positive ints")
        if self.n_runs < 1:
            raise ValidationError("n_runs must be >= 1")
        if self.classifier not in ("fc", "cosine"):
            raise ValidationError(f"unknown classifier {self.classifier!r}")
        if self.init not in ("random", "novel"):
            raise ValidationError(f"unknown init {self.init!r}")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def train_base_head(cfg: BenchmarkConfig, d: Dataset, base_feats: FeatureSet) -> Heads:
    """Stage 1: train on abundant base-class records; novel-class records are dropped."""
    base = d.categories.base_ids
    heads = init_head("random", d=base_feats.dim, base_classes=base, seed=cfg.base_seed,
                      kind=cfg.classifier, alpha=cfg.alpha)
    base_cfg = TrainConfig(**{**cfg.base_train.__dict__, "seed": cfg.base_seed})
    heads, _ = train_head(heads, base_feats.with_labels(base), base_cfg)
    return heads


def run_once(cfg: BenchmarkConfig, d: Dataset, pool: Dataset, pool_feats: FeatureSet,
             assigned: np.ndarray, base_head: Heads, test_feats: FeatureSet,
             test_images, k: int, seed: int):
    """One fine-tuning run on a fresh K-shot sample; returns a MetricsReport."""
    base, novel = d.categories.base_ids, d.categories.novel_ids
    shots = sample_kshot(pool, base + novel, k, seed)
    ft = select_shots(pool_feats, pool, shots, assigned)
    train_cfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
    heads = init_head(cfg.init, base_head=base_head, novel_features=ft, base_classes=base,
                      novel_classes=novel, seed=seed, novel_cfg=train_cfg)
    heads, _ = train_head(heads, ft, train_cfg, base_classes=base)
    dets = predict(heads, test_feats, cfg.score_thresh, cfg.nms_iou, cfg.max_dets)
    return evaluate(dets, d, cfg.eval, image_ids=test_images)


def run_benchmark(cfg: BenchmarkConfig, d: Dataset, base_feats: FeatureSet,
                  pool_feats: FeatureSet, test_feats: FeatureSet, out) -> dict:
    """Full protocol; writes every output file and returns the aggregates.

    The base head is trained once and shared by every run. A run that
    raises is logged and stored as an ``error`` record, which aggregation
    treats as a missing value.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    test_images = np.unique(test_feats.image_ids).tolist()
    pool = subset_images(d, np.unique(pool_feats.image_ids).tolist())
    assigned = assign_annotations(pool_feats, pool)

    base_head = train_base_head(cfg, d, base_feats)
    save_heads(base_head, out / "base_head.json")
    base_report = evaluate(predict(base_head, test_feats, cfg.score_thresh, cfg.nms_iou,
                                   cfg.max_dets), d, cfg.eval, image_ids=test_images)
    save_report(base_report, out / "base_metrics.json")

    schedule = seed_schedule(cfg.base_seed, cfg.n_runs)
    for k in cfg.k_values:
        run_dir = out / f"k{k}"
        run_dir.mkdir(exist_ok=True)
        for i, seed in enumerate(schedule.run_seeds):
            record = {"k": k, "run": i, "seed": seed}
            try:
                report = run_once(cfg, d, pool, pool_feats, assigned, base_head,
                                  test_feats, test_images, k, seed)
                record.update(report.to_dict())
            except TFAError as exc:
                log.warning("k=%d run=%d seed=%d failed: %s", k, i, seed, exc)
                record["error"] = str(exc)
            _write_atomic(run_dir / f"run{i:03d}.json", json.dumps(record, indent=1))
    return aggregate_runs(out)


def load_runs(run_dir) -> list[dict]:
    files = sorted(Path(run_dir).glob("run*.json"),
                   key=lambda p: int(_RUN_FILE.search(p.name).group(1)))
    return [json.loads(p.read_text(encoding="utf-8")) for p in files
            if _RUN_FILE.search(p.name)]


def summarize_runs(runs: Sequence[dict]) -> dict[str, RunStatistics | None]:
    """Statistics per metric over runs, skipping failed runs and absent values."""
    out = {}
    for name in METRIC_NAMES:
        values = [r[name] for r in runs if "error" not in r and r.get(name) is not None]
        out[name] = summarize(RunSeries(name, tuple(values))) if values else None
    return out


def _missing_row():
    return RunStatistics(0, None, None, None, ())


def aggregate_runs(out) -> dict[int, dict[str, RunStatistics | None]]:
    """(Re)build aggregate and cumulative CSVs from the per-run files in ``out``."""
    out = Path(out)
    result = {}
    k_dirs = sorted((p for p in out.glob("k*") if p.is_dir() and p.name[1:].isdigit()),
                    key=lambda p: int(p.name[1:]))
    if not k_dirs:
        raise ValidationError(f"{out}: no k*/ run directories found")
    for k_dir in k_dirs:
        k = int(k_dir.name[1:])
        stats = summarize_runs(load_runs(k_dir))
        filled = {n: (s if s is not None else _missing_row()) for n, s in stats.items()}
        _write_atomic(out / f"aggregate_k{k}.csv", aggregate_csv(filled))
        _write_atomic(out / f"cumulative_k{k}.csv", cumulative_csv(filled))
        result[k] = stats
    return result
