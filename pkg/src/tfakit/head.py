"""Last-layer box predictor: classifier + per-class box regressor.

Everything here is plain numpy in float64. The classifier is either an
affine layer (``fc``) or a bias-free scaled cosine layer (``cosine``); the
background class is the final column in both cases. The training loss is
mean cross-entropy over all records plus ``loc_weight`` times mean
smooth-L1 over foreground records, with analytic gradients.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import BBox, decode_deltas, nms
from .detections import Detection, DetectionSet
from .exceptions import NumericError, ParseError, ValidationError
from .features import BACKGROUND, FeatureSet
from .sampler import class_rng

KINDS = ("fc", "cosine")
INIT_STD = 0.01


@dataclass
class Heads:
    """Classifier and regressor weights for ``C`` foreground classes.

    ``W`` is (d, C+1) with the background column last, ``R`` is (d, 4C)
    holding four delta outputs per class in ``class_ids`` order. ``b`` is
    only used by the ``fc`` kind and ``alpha`` only by ``cosine``.
    """

    kind: str
    W: np.ndarray
    b: np.ndarray | None
    R: np.ndarray
    b_r: np.ndarray
    class_ids: tuple[int, ...]
    alpha: float = 20.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown classifier kind {self.kind!r}")
        self.W = np.asarray(self.W, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.b_r = np.asarray(self.b_r, dtype=np.float64)
        self.class_ids = tuple(int(c) for c in self.class_ids)
        d, cols = self.W.shape
        C = len(self.class_ids)
        if cols != C + 1:
            raise ValidationError(f"W has {cols} columns, expected {C + 1}")
        if len(set(self.class_ids)) != C:
            raise ValidationError("class_ids must be unique")
        if self.R.shape != (d, 4 * C) or self.b_r.shape != (4 * C,):
            raise ValidationError("regressor shape does not match classifier")
        if self.kind == "fc":
            self.b = np.zeros(C + 1) if self.b is None else np.asarray(self.b, dtype=np.float64)
            if self.b.shape != (C + 1,):
                raise ValidationError("bias length must be C+1")
        else:
            self.b = None
            if not self.alpha > 0:
                raise ValidationError("alpha must be > 0")
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite entries in {name}")

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def params(self) -> dict[str, np.ndarray]:
        out = {"W": self.W, "R": self.R, "b_r": self.b_r}
        if self.b is not None:
            out["b"] = self.b
        return out

    def copy(self) -> "Heads":
        return replace(self, W=self.W.copy(), b=None if self.b is None else self.b.copy(),
                       R=self.R.copy(), b_r=self.b_r.copy())

    def column_of(self, category_id: int) -> int:
        if category_id == BACKGROUND:
            return self.num_classes
        try:
            return self.class_ids.index(category_id)
        except ValueError:
            raise ValidationError(f"category {category_id} has no column in this head") from None

    def label_index(self, labels) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        lookup[BACKGROUND] = self.num_classes
        try:
            return np.fromiter((lookup[int(l)] for l in labels), dtype=np.int64, count=len(labels))
        except KeyError as exc:
            raise ValidationError(f"label {exc.args[0]} has no column in this head") from None

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "dim": self.dim,
            "num_classes": self.num_classes,
            "W": self.W.ravel().tolist(),
            "R": self.R.ravel().tolist(),
            "b_r": self.b_r.tolist(),
            "class_ids": list(self.class_ids),
        }
        if self.kind == "cosine":
            out["alpha"] = self.alpha
        else:
            out["b"] = self.b.tolist()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "Heads":
        try:
            d, C = int(raw["dim"]), int(raw["num_classes"])
            return cls(
                kind=raw["kind"],
                W=np.asarray(raw["W"], dtype=np.float64).reshape(d, C + 1),
                b=raw.get("b"),
                R=np.asarray(raw["R"], dtype=np.float64).reshape(d, 4 * C),
                b_r=raw["b_r"],
                class_ids=raw["class_ids"],
                alpha=float(raw.get("alpha", 20.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ParseError(f"malformed head file: {exc}") from None


def save_heads(heads: Heads, path) -> None:
    Path(path).write_text(json.dumps(heads.to_dict()), encoding="utf-8")


def load_heads(path) -> Heads:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from None
    return Heads.from_dict(raw)


# ---------------------------------------------------------------------------
# forward pass and losses


def _row_norms(X):
    return np.sqrt(np.einsum("ij,ij->i", X, X))


def forward_scores(heads: Heads, f) -> np.ndarray:
    """Class scores for one feature vector (d,) or a batch (n, d)."""
    X = np.asarray(f, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != heads.dim:
        raise ValidationError(f"feature dim {X.shape[1]} != head dim {heads.dim}")
    if heads.kind == "fc":
        S = X @ heads.W + heads.b
    else:
        S = _cosine_parts(heads, X)[0]
    return S[0] if single else S


def _cosine_parts(heads: Heads, X):
    fn = _row_norms(X)
    wn = np.sqrt(np.einsum("ij,ij->j", heads.W, heads.W))
    if np.any(fn == 0):
        raise NumericError("zero-norm feature under cosine classifier")
    if np.any(wn == 0):
        raise NumericError("zero-norm weight column under cosine classifier")
    Xn = X / fn[:, None]
    Wn = heads.W / wn
    return heads.alpha * (Xn @ Wn), Xn, Wn, wn


def log_softmax(S: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(S)):
        raise NumericError("non-finite scores")
    shifted = S - S.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(S: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(S))


def cross_entropy(scores, label: int) -> float:
    """``-log softmax(scores)[label]``, with ``label`` a column index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= label < scores.shape[-1]:
        raise ValidationError(f"label index {label} out of range")
    return float(-log_softmax(scores)[label])


def smooth_l1(pred, target) -> float:
    e = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return float(np.where(e < 1.0, 0.5 * e * e, e - 0.5).sum())


def _loss_and_grads(heads: Heads, X, yidx, T, loc_weight):
    n = X.shape[0]
    C = heads.num_classes
    grads = {}

    if heads.kind == "fc":
        S = X @ heads.W + heads.b
    else:
        S, Xn, Wn, wn = _cosine_parts(heads, X)
    logp = log_softmax(S)
    rows = np.arange(n)
    loss = -logp[rows, yidx].mean()

    dS = np.exp(logp)
    dS[rows, yidx] -= 1.0
    dS /= n
    if heads.kind == "fc":
        grads["W"] = X.T @ dS
        grads["b"] = dS.sum(axis=0)
    else:
        dWn = heads.alpha * (Xn.T @ dS)
        grads["W"] = (dWn - Wn * np.einsum("ij,ij->j", Wn, dWn)) / wn

    gR = np.zeros_like(heads.R)
    gbr = np.zeros_like(heads.b_r)
    fg = np.flatnonzero(yidx < C)
    if fg.size and loc_weight:
        cols = (4 * yidx[fg])[:, None] + np.arange(4)
        pred = np.einsum("nd,dnk->nk", X[fg], heads.R[:, cols]) + heads.b_r[cols]
        e = pred - T[fg]
        ae = np.abs(e)
        loss += loc_weight * np.where(ae < 1.0, 0.5 * e * e, ae - 0.5).sum() / fg.size
        de = loc_weight * np.where(ae < 1.0, e, np.sign(e)) / fg.size
        D = np.zeros((fg.size, 4 * C))
        np.put_along_axis(D, cols, de, axis=1)
        gR = X[fg].T @ D
        gbr = D.sum(axis=0)
    grads["R"] = gR
    grads["b_r"] = gbr
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    return float(loss), grads


def batch_loss(heads: Heads, batch: FeatureSet, loc_weight: float = 1.0):
    """Loss and analytic gradients for one batch of records.

    Returns ``(loss, grads)`` where ``grads`` maps parameter names to arrays
    shaped like :meth:`Heads.params`.
    """
    if len(batch) == 0:
        raise ValidationError("empty batch")
    X = batch.features.astype(np.float64)
    if X.shape[1] != heads.dim:
        raise ValidationError(f"feature dim {X.shape[1]} != head dim {heads.dim}")
    return _loss_and_grads(heads, X, heads.label_index(batch.labels),
                           batch.reg_targets.astype(np.float64), loc_weight)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValidationError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must be in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValidationError("weight_decay must be >= 0")

    @classmethod
    def for_params(cls, params: dict, lr, momentum=0.9, weight_decay=1e-4) -> "OptimState":
        return cls(lr, momentum, weight_decay, {k: np.zeros_like(v) for k, v in params.items()})


def sgd_step(params: dict, grads: dict, opt: OptimState, frozen: dict | None = None):
    """One momentum-SGD update, in place on ``params`` and ``opt.velocity``.

    ``frozen`` optionally maps parameter names to boolean masks; masked
    entries get neither gradient nor weight decay and stay bit-identical.
    """
    for name, p in params.items():
        g = grads[name] + opt.weight_decay * p if opt.weight_decay else grads[name].copy()
        if frozen and name in frozen:
            g[frozen[name]] = 0.0
        v = opt.velocity.get(name)
        if v is None:
            v = opt.velocity[name] = np.zeros_like(p)
        if v.shape != p.shape:
            raise ValidationError(f"velocity shape for {name} does not match parameter")
        v *= opt.momentum
        v += g
        p -= opt.lr * v
    return params, opt


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 2000
    batch_size: int = 128
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    freeze_base_classifier_columns: bool = False
    loc_weight: float = 1.0

    def __post_init__(self):
        if self.iters < 1:
            raise ValidationError("iters must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.loc_weight < 0:
            raise ValidationError("loc_weight must be >= 0")


BASE_TRAIN = TrainConfig(lr=0.02)
FINE_TUNE = TrainConfig(lr=0.001)


def _canonical_order(feats: FeatureSet) -> np.ndarray:
    keys = (list(feats.features.T[::-1]) + list(feats.reg_targets.T[::-1])
            + list(feats.proposals.T[::-1]) + [feats.labels, feats.image_ids])
    return np.lexsort(keys)


def _freeze_masks(heads: Heads, classes: Iterable[int]) -> dict:
    cols = np.array([heads.column_of(c) for c in classes if c in heads.class_ids], dtype=np.int64)
    masks = {"W": np.zeros_like(heads.W, dtype=bool),
             "R": np.zeros_like(heads.R, dtype=bool),
             "b_r": np.zeros_like(heads.b_r, dtype=bool)}
    masks["W"][:, cols] = True
    reg_cols = (4 * cols[:, None] + np.arange(4)).ravel()
    masks["R"][:, reg_cols] = True
    masks["b_r"][reg_cols] = True
    if heads.b is not None:
        masks["b"] = np.zeros_like(heads.b, dtype=bool)
        masks["b"][cols] = True
    return masks


def _batches(n: int, batch_size: int, iters: int, seed: int):
    rng = np.random.default_rng(seed)
    bs = min(batch_size, n)
    buf = np.empty(0, dtype=np.int64)
    for _ in range(iters):
        while buf.size < bs:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:bs]
        buf = buf[bs:]


def train_head(heads: Heads, feats: FeatureSet, cfg: TrainConfig,
               base_classes: Sequence[int] = ()) -> tuple[Heads, list[float]]:
    """Mini-batch momentum SGD on a copy of ``heads``.

    Records are put in a canonical order before the seeded shuffle, so the
    result does not depend on input record order. With
    ``cfg.freeze_base_classifier_columns`` the classifier columns and
    regressor blocks of ``base_classes`` are left untouched.

    Returns the trained heads and the per-iteration batch loss.
    """
    if len(feats) == 0:
        raise ValidationError("cannot train on an empty feature set")
    if feats.dim != heads.dim:
        raise ValidationError(f"feature dim {feats.dim} != head dim {heads.dim}")
    order = _canonical_order(feats)
    X = feats.features[order].astype(np.float64)
    yidx = heads.label_index(feats.labels[order])
    T = feats.reg_targets[order].astype(np.float64)

    out = heads.copy()
    params = out.params()
    opt = OptimState.for_params(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    frozen = _freeze_masks(out, base_classes) if cfg.freeze_base_classifier_columns else None
    trace = []
    for idx in _batches(len(feats), cfg.batch_size, cfg.iters, cfg.seed):
        loss, grads = _loss_and_grads(out, X[idx], yidx[idx], T[idx], cfg.loc_weight)
        trace.append(loss)
        sgd_step(params, grads, opt, frozen)
    if not all(np.all(np.isfinite(p)) for p in params.values()):
        raise NumericError("training diverged to non-finite weights")
    return out, trace


# ---------------------------------------------------------------------------
# initialisation


def _random_heads(kind, d, class_ids, seed, alpha) -> Heads:
    C = len(class_ids)
    W = np.empty((d, C + 1))
    R = np.empty((d, 4 * C))
    for j, cid in enumerate(class_ids):
        rng = class_rng(seed, cid)
        W[:, j] = INIT_STD * rng.standard_normal(d)
        R[:, 4 * j:4 * j + 4] = INIT_STD * rng.standard_normal((d, 4))
    W[:, C] = INIT_STD * class_rng(seed, BACKGROUND).standard_normal(d)
    b = np.zeros(C + 1) if kind == "fc" else None
    return Heads(kind, W, b, R, np.zeros(4 * C), tuple(class_ids), alpha)


def _copy_class(dst: Heads, src: Heads, cid: int) -> None:
    i, j = dst.column_of(cid), src.column_of(cid)
    dst.W[:, i] = src.W[:, j]
    if dst.b is not None and src.b is not None:
        dst.b[i] = src.b[j]
    if cid != BACKGROUND:
        dst.R[:, 4 * i:4 * i + 4] = src.R[:, 4 * j:4 * j + 4]
        dst.b_r[4 * i:4 * i + 4] = src.b_r[4 * j:4 * j + 4]


def init_head(mode: str = "random", base_head: Heads | None = None,
              novel_features: FeatureSet | None = None, d: int | None = None,
              base_classes: Sequence[int] = (), novel_classes: Sequence[int] = (),
              seed: int = 0, kind: str | None = None, alpha: float | None = None,
              novel_cfg: TrainConfig = FINE_TUNE) -> Heads:
    """Build heads over ``base_classes + novel_classes`` for fine-tuning.

    Base columns and the background column are copied from ``base_head``
    when given. Novel columns are Gaussian with std 0.01 (``mode="random"``)
    or copied from a head trained with ``novel_cfg`` on the novel records of
    ``novel_features`` alone (``mode="novel"``).
    """
    if mode not in ("random", "novel", "novel_pretrained"):
        raise ValidationError(f"unknown init mode {mode!r}")
    if base_head is not None:
        if d is not None and d != base_head.dim:
            raise ValidationError(f"base head dim {base_head.dim} != requested dim {d}")
        d = base_head.dim
        kind = kind or base_head.kind
        alpha = alpha if alpha is not None else base_head.alpha
    if d is None:
        raise ValidationError("feature dim unknown: pass d or base_head")
    kind = kind or "cosine"
    alpha = 20.0 if alpha is None else alpha
    base_classes = sorted(int(c) for c in base_classes)
    novel_classes = sorted(int(c) for c in novel_classes)
    if set(base_classes) & set(novel_classes):
        raise ValidationError("base and novel classes overlap")

    heads = _random_heads(kind, d, base_classes + novel_classes, seed, alpha)
    if base_head is not None:
        for cid in base_classes + [BACKGROUND]:
            _copy_class(heads, base_head, cid)

    if mode != "random" and novel_classes:
        if novel_features is None:
            raise ValidationError("novel initialisation needs novel_features")
        if novel_features.dim != d:
            raise ValidationError(f"novel feature dim {novel_features.dim} != {d}")
        novel_only = _random_heads(kind, d, novel_classes, seed, alpha)
        trained, _ = train_head(novel_only, novel_features.with_labels(novel_classes), novel_cfg)
        for cid in novel_classes:
            _copy_class(heads, trained, cid)
    return heads


# ---------------------------------------------------------------------------
# inference


def predict_deltas(heads: Heads, X) -> np.ndarray:
    """Per-class box deltas, shape (n, C, 4)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return (X @ heads.R + heads.b_r).reshape(X.shape[0], heads.num_classes, 4)


def predict(heads: Heads, feats: FeatureSet, score_thresh: float = 0.05,
            nms_iou: float = 0.5, max_dets: int = 100) -> DetectionSet:
    """Scored, class-labelled boxes from frozen proposal features.

    Per record, every foreground class whose softmax probability reaches
    ``score_thresh`` yields a box decoded from that class's deltas. Boxes
    then go through per-image, per-class NMS and a per-image cap.
    """
    if len(feats) == 0:
        return []
    X = feats.features.astype(np.float64)
    probs = softmax(forward_scores(heads, X))[:, :heads.num_classes]
    deltas = predict_deltas(heads, X)
    proposals = feats.proposals.astype(np.float64)

    rows, cols = np.nonzero(probs >= score_thresh)
    boxes = decode_deltas(deltas[rows, cols], proposals[rows])
    boxes[:, :2] = np.maximum(boxes[:, :2], 0.0)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    rows, cols, boxes = rows[ok], cols[ok], boxes[ok]
    scores = probs[rows, cols]
    image_ids = feats.image_ids[rows]

    group = np.lexsort((cols, image_ids))
    kept = []
    bounds = np.flatnonzero(np.diff(image_ids[group]) | np.diff(cols[group])) + 1
    for sel in np.split(group, bounds):
        if sel.size == 1:
            kept.append(sel)
        elif sel.size:
            kept.append(sel[nms(boxes[sel], scores[sel], nms_iou)])
    kept = np.concatenate(kept) if kept else np.zeros(0, dtype=np.int64)

    out: DetectionSet = []
    kept = kept[np.lexsort((kept, -scores[kept], image_ids[kept]))]
    img = image_ids[kept]
    starts = np.flatnonzero(np.r_[True, img[1:] != img[:-1]]) if img.size else []
    for start, stop in zip(starts, list(starts[1:]) + [img.size]):
        for i in kept[start:min(stop, start + max_dets)]:
            out.append(Detection(int(image_ids[i]), heads.class_ids[cols[i]],
                                 BBox.from_xyxy(boxes[i]), float(scores[i])))
    return out
