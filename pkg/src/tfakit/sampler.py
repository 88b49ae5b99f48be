"""Balanced K-shot subsets and repeated-run seed schedules."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .dataset import Dataset
from .exceptions import ValidationError

U64 = 1 << 64


def class_rng(seed: int, category_id: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, category_id)``.

    Each class draws from its own Philox stream, so the picks for one class
    do not depend on which other classes are sampled alongside it.
    """
    key = np.array([seed % U64, category_id % U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ShotSet:
    k: int
    seed: int
    picks: dict[int, list[int]]
    shortfalls: dict[int, int]

    @property
    def annotation_ids(self) -> set[int]:
        return {aid for ids in self.picks.values() for aid in ids}

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "picks": {str(c): list(v) for c, v in sorted(self.picks.items())},
            "shortfalls": {str(c): v for c, v in sorted(self.shortfalls.items())},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ShotSet":
        try:
            return cls(
                k=int(raw["k"]),
                seed=int(raw["seed"]),
                picks={int(c): [int(a) for a in v] for c, v in raw["picks"].items()},
                shortfalls={int(c): int(v) for c, v in raw["shortfalls"].items()},
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"malformed shot file: {exc}") from None


def save_shotset(shots: ShotSet, path) -> None:
    Path(path).write_text(json.dumps(shots.to_dict()), encoding="utf-8")


def load_shotset(path) -> ShotSet:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    return ShotSet.from_dict(raw)


def sample_kshot(d: Dataset, classes: Iterable[int], k: int, seed: int) -> ShotSet:
    """Pick up to ``k`` annotations per class, uniformly without replacement.

    Classes with fewer than ``k`` annotations contribute all of them and the
    missing count is recorded as a shortfall; nothing is padded.
    """
    classes = sorted(set(classes))
    if not classes:
        raise ValidationError("sample_kshot needs at least one class")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    known = set(d.categories.ids)
    unknown = [c for c in classes if c not in known]
    if unknown:
        raise ValidationError(f"unknown category ids {unknown}")

    by_cat = d.annotations_by_category()
    picks, shortfalls = {}, {}
    for cid in classes:
        pool = np.array(sorted(a.id for a in by_cat[cid]), dtype=np.int64)
        n_take = min(k, pool.size)
        chosen = class_rng(seed, cid).permutation(pool.size)[:n_take]
        picks[cid] = sorted(int(a) for a in pool[chosen])
        shortfalls[cid] = k - n_take
    return ShotSet(k=k, seed=seed % U64, picks=picks, shortfalls=shortfalls)


@dataclass(frozen=True)
class SeedSchedule:
    base_seed: int
    n_runs: int
    run_seeds: tuple[int, ...]


def seed_schedule(base_seed: int, n_runs: int) -> SeedSchedule:
    if n_runs < 1:
        raise ValidationError(f"n_runs must be >= 1, got {n_runs}")
    base_seed %= U64
    return SeedSchedule(base_seed, n_runs, tuple((base_seed + i) % U64 for i in range(n_runs)))
