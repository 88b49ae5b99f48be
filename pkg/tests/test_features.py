import struct

import numpy as np
import pytest

from tfakit.boxes import decode_deltas
from tfakit.dataset import subset_images
from tfakit.exceptions import ParseError, ValidationError
from tfakit.features import (
    BACKGROUND, FeatureRecord, FeatureSet, SynthConfig, assign_annotations, read_features,
    select_shots, synth_features, write_features,
)
from tfakit.head import TrainConfig, forward_scores, init_head, train_head
from tfakit.sampler import sample_kshot

SMALL = SynthConfig(n_classes_base=3, n_classes_novel=2, dim=8, per_class_count=6,
                    test_per_class=4, seed=5)


@pytest.fixture(scope="module")
def small():
    return synth_features(SMALL)


@pytest.fixture(scope="module")
def default():
    return synth_features(SynthConfig())


def test_feature_file_roundtrip(tmp_path, small):
    _, train, _ = small
    write_features(train, tmp_path / "f.tfaf")
    back = read_features(tmp_path / "f.tfaf")
    assert back.equals(train) and back.dim == SMALL.dim


def test_feature_file_header_errors(tmp_path, small):
    _, train, _ = small
    path = tmp_path / "f.tfaf"
    write_features(train, path)
    blob = path.read_bytes()
    cases = {"magic": b"XXXX" + blob[4:], "trunc": blob[:-3], "header": blob[:5],
             "version": blob[:4] + struct.pack("<I", 9) + blob[8:]}
    for name, data in cases.items():
        bad = tmp_path / f"{name}.tfaf"
        bad.write_bytes(data)
        with pytest.raises(ParseError):
            read_features(bad)


def test_featureset_is_read_only(small):
    with pytest.raises(ValueError):
        small[1].features[0, 0] = 1.0


def test_from_records_and_record_agree(small):
    _, train, _ = small
    recs = [train.record(i) for i in range(5)]
    assert isinstance(recs[0], FeatureRecord)
    assert FeatureSet.from_records(recs).equals(train.take(np.arange(5)))


def test_synth_is_deterministic(tmp_path):
    a, b = synth_features(SMALL), synth_features(SMALL)
    for i, (x, y) in enumerate(zip(a[1:], b[1:])):
        write_features(x, tmp_path / f"a{i}")
        write_features(y, tmp_path / f"b{i}")
        assert (tmp_path / f"a{i}").read_bytes() == (tmp_path / f"b{i}").read_bytes()
    assert a[0] == b[0]


def test_small_sigma_collapses_class_features():
    _, train, _ = synth_features(SynthConfig(n_classes_base=3, n_classes_novel=1, dim=6,
                                             per_class_count=5, noise_sigma=1e-12))
    fg = train.take(train.foreground)
    for c in np.unique(fg.labels):
        rows = fg.features[fg.labels == c]
        np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape), atol=1e-9)


def test_dim_too_small_rejected():
    with pytest.raises(ValidationError):
        SynthConfig(dim=2, n_classes_base=45, n_classes_novel=5)


def test_train_split_counts_and_targets(small):
    d, train, test = small
    fg = train.foreground
    labels, counts = np.unique(train.labels[fg], return_counts=True)
    assert labels.tolist() == d.categories.ids
    assert set(counts.tolist()) == {SMALL.per_class_count}
    assert set(train.image_ids.tolist()).isdisjoint(test.image_ids.tolist())
    # each foreground target decodes back onto its annotation
    boxes = {a.id: a.bbox.to_xyxy() for a in d.annotations}
    assigned = assign_annotations(train, d)
    assert (assigned[fg] >= 0).all() and (assigned[~fg] == BACKGROUND).all()
    decoded = decode_deltas(train.reg_targets[fg].astype(float), train.proposals[fg].astype(float))
    np.testing.assert_allclose(decoded, np.stack([boxes[i] for i in assigned[fg]]), atol=1e-2)


def test_test_split_aligned_with_annotations(small):
    d, _, test = small
    ann_images = {a.image_id for a in d.annotations}
    assert set(test.image_ids.tolist()) <= ann_images
    per_class = np.unique(test.labels[test.foreground], return_counts=True)[1]
    assert set(per_class.tolist()) == {SMALL.test_per_class * SMALL.proposals_per_gt}


def test_background_records_are_noise_only(small):
    _, train, _ = small
    bg = ~train.foreground
    assert bg.any()
    assert not train.reg_targets[bg].any()


def test_select_shots_keeps_picks_and_their_background(small):
    d, train, _ = small
    pool = subset_images(d, np.unique(train.image_ids).tolist())
    shots = sample_kshot(pool, d.categories.ids, 2, seed=1)
    sel = select_shots(train, pool, shots)
    assigned = assign_annotations(sel, pool)
    fg = sel.foreground
    assert sorted(assigned[fg].tolist()) == sorted(shots.annotation_ids)
    assert set(sel.image_ids[~fg].tolist()) == set(sel.image_ids[fg].tolist())


def test_ten_shot_linear_classifier_tracks_ncm_oracle(default):
    d, train, test = default
    ids = d.categories.ids
    pool = subset_images(d, np.unique(train.image_ids).tolist())
    shots = select_shots(train, pool, sample_kshot(pool, ids, 10, seed=0))
    shots = shots.take(shots.foreground)
    held = test.take(test.foreground)

    means = np.stack([shots.features[shots.labels == c].mean(axis=0) for c in ids])
    dist = ((held.features[:, None, :] - means[None]) ** 2).sum(axis=-1)
    ncm_acc = (np.asarray(ids)[dist.argmin(axis=1)] == held.labels).mean()

    heads = init_head("random", d=train.dim, base_classes=ids, kind="fc")
    heads, _ = train_head(heads, shots, TrainConfig(lr=0.02))
    scores = forward_scores(heads, held.features)[:, :-1]
    acc = (scores.argmax(axis=1) == heads.label_index(held.labels)).mean()
    assert acc >= ncm_acc - 0.05, (acc, ncm_acc)
    assert ncm_acc > 0.85
