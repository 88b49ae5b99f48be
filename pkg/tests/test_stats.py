import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfakit.exceptions import ValidationError
from tfakit.stats import (
    RunSeries, aggregate_csv, cumulative_csv, read_aggregate_csv, stabilization_check, summarize,
)


def test_one_two_three():
    s = summarize([1, 2, 3])
    assert s.mean == 2.0 and s.std == 1.0
    assert s.ci95 == pytest.approx(1.13161, abs=1e-5)
    assert s.ci95 == pytest.approx(1.96 / math.sqrt(3), abs=1e-12)


def test_constant_series():
    s = summarize([5, 5, 5, 5])
    assert s.std == 0.0 and s.ci95 == 0.0


def test_single_run_has_no_spread():
    s = summarize([0.4])
    assert s.mean == 0.4 and s.std is None and s.ci95 is None


@pytest.mark.parametrize("bad", [[], [1.0, float("nan")], [float("inf")]])
def test_invalid_series(bad):
    with pytest.raises(ValidationError):
        RunSeries("x", tuple(bad))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40))
def test_matches_statistics_module(values):
    s = summarize(values)
    assert s.mean == pytest.approx(statistics.fmean(values), abs=1e-9)
    assert s.std == pytest.approx(statistics.stdev(values), rel=1e-9, abs=1e-9)
    for pt in s.cumulative:
        prefix = values[:pt.k]
        assert pt.mean == pytest.approx(statistics.fmean(prefix), abs=1e-9)
        if pt.k > 1:
            assert pt.ci == pytest.approx(1.96 * statistics.stdev(prefix) / math.sqrt(pt.k),
                                          rel=1e-9, abs=1e-9)
        else:
            assert pt.ci is None


def test_stabilization_on_iid_draw():
    values = np.random.default_rng(0).normal(0.5, 0.05, 30)
    assert stabilization_check(summarize(values), 5, 30)


def test_stabilization_constant_is_false():
    assert not stabilization_check(summarize([1.0] * 10), 5, 10)


@pytest.mark.parametrize("ks, kl", [(5, 5), (1, 4), (3, 11)])
def test_stabilization_preconditions(ks, kl):
    with pytest.raises(ValidationError):
        stabilization_check(summarize(list(range(10))), ks, kl)


def test_csv_roundtrip():
    named = {"nAP50": summarize([0.1, 0.2, 0.4]), "AP": summarize([0.3])}
    rows = read_aggregate_csv(aggregate_csv(named))
    assert rows["nAP50"]["mean"] == named["nAP50"].mean
    assert rows["nAP50"]["ci95"] == named["nAP50"].ci95
    assert rows["AP"] == {"n": 1, "mean": 0.3, "std": None, "ci95": None}
    lines = cumulative_csv(named).splitlines()
    assert lines[0] == "metric,k,mean_k,ci_k"
    assert len(lines) == 1 + 3 + 1
