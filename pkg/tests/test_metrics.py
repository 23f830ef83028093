import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from continual_iqa.metrics import (
    EvalLedger,
    UndefinedCorrelation,
    averaged_indices,
    correlation_index,
    forgetting_index,
    forgetting_of,
    srcc,
)


def average_ranks(values):
    """O(n^2) average ranks: 1 + #smaller + (#equal - 1) / 2."""
    v = list(values)
    return [1 + sum(w < x for w in v) + (sum(w == x for w in v) - 1) / 2 for x in v]


def oracle_srcc(a, b):
    ra, rb = average_ranks(a), average_ranks(b)
    n = len(ra)
    ma, mb = sum(ra) / n, sum(rb) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / math.sqrt(va * vb)


def test_srcc_value_examples():
    assert srcc([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0, abs=1e-12)
    assert srcc([1, 2, 3], [30, 20, 10]) == pytest.approx(-1.0, abs=1e-12)
    assert srcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(1 - 6 * 2 / (4 * 15), abs=1e-12)


def test_srcc_matches_rank_pearson_oracle_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(200):
        n = int(rng.integers(5, 40))
        # integer draws from a small range guarantee ties
        a = rng.integers(0, 6, size=n).astype(float) if trial % 2 else rng.normal(size=n)
        b = rng.integers(0, 6, size=n).astype(float)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        assert abs(srcc(a, b) - oracle_srcc(a, b)) < 1e-12


def test_srcc_errors():
    with pytest.raises(UndefinedCorrelation):
        srcc([1, 2], [1, 2])
    with pytest.raises(UndefinedCorrelation):
        srcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        srcc([1, 2, 3], [1, 2])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=30, unique=True),
       st.randoms(use_true_random=False))
def test_srcc_transform_invariance(a, rnd):
    a = np.array(a, dtype=float) / 100.0
    b = a.copy()
    rnd.shuffle(b)
    if len(set(b)) < 2:
        return
    base = srcc(a, b)
    assert srcc(a ** 3, b) == pytest.approx(base, abs=1e-12)
    assert srcc(-a, b) == pytest.approx(-base, abs=1e-12)
    assert -1.0 <= base <= 1.0


def _ledger(rows):
    led = EvalLedger()
    for t, row in enumerate(rows):
        led.add_row(t, row)
    return led


def test_correlation_index_examples():
    assert correlation_index(_ledger([{0: 0.5, 1: -0.5}]), 0) == pytest.approx(0.5, abs=1e-12)
    assert correlation_index(_ledger([{0: 1.0, 1: 1.0}]), 0) == 1.0
    assert correlation_index(_ledger([{0: 0.0, 1: 0.0}]), 0) == 0.0


def test_forgetting_of_examples():
    led = _ledger([{0: 0.8}, {0: -0.7, 1: 0.5}, {0: 0.6, 1: 0.5, 2: 0.1}])
    assert forgetting_of(led, 2, 0) == pytest.approx(0.2, abs=1e-12)
    led = _ledger([{0: 0.8}, {0: 0.8, 1: 0.3}])
    assert forgetting_of(led, 1, 0) == 0.0
    led = _ledger([{0: 0.8}, {0: 0.9, 1: 0.3}])
    assert forgetting_of(led, 1, 0) == pytest.approx(-0.1, abs=1e-12)


def test_forgetting_of_uses_history_from_introduction_only():
    led = _ledger([{0: 0.9}, {0: 0.9, 1: 0.4}, {0: 0.9, 1: 0.3, 2: 0.5}])
    assert forgetting_of(led, 2, 1) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        forgetting_of(led, 1, 1)
    with pytest.raises(ValueError):
        forgetting_of(led, 0, 0)


def test_forgetting_index_mean():
    # f = [0.2, -0.1, 0.2]
    led = _ledger([{0: 0.5, 1: 0.5, 2: 0.5}, {0: 0.3, 1: 0.6, 2: 0.3, 3: 0.0}])
    assert forgetting_index(led, 1) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ValueError):
        forgetting_index(led, 0)


def test_averaged_indices():
    led = _ledger([{0: 0.6}, {0: 0.8, 1: 0.8}])
    c_bar, f_bar = averaged_indices(led)
    assert c_bar == pytest.approx(0.7, abs=1e-12)
    assert f_bar == pytest.approx(-0.2, abs=1e-12)
    with pytest.raises(ValueError):
        averaged_indices(_ledger([{0: 0.5}]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3), min_size=2, max_size=6))
def test_index_ranges(rows):
    led = EvalLedger()
    for t, vals in enumerate(rows):
        # distortions 0 and 1 from the start, one new distortion per task after that
        led.add_row(t, {0: vals[0], 1: vals[1], **{k + 2: vals[2] for k in range(t + 1)}})
    for t in led.tasks:
        assert 0.0 <= correlation_index(led, t) <= 1.0
        if t:
            assert -1.0 <= forgetting_index(led, t) <= 1.0


def test_forgetting_is_antitone_in_current_value():
    lo = _ledger([{0: 0.8}, {0: 0.5, 1: 0.1}])
    hi = _ledger([{0: 0.8}, {0: 0.6, 1: 0.1}])
    assert forgetting_of(lo, 1, 0) > forgetting_of(hi, 1, 0)


def test_ledger_rejects_gaps_and_missing_entries():
    led = _ledger([{0: 0.5, 1: 0.5}])
    with pytest.raises(ValueError):
        led.add_row(2, {0: 0.5, 1: 0.5})
    with pytest.raises(ValueError):
        led.add_row(1, {0: 0.5})


def test_ledger_csv_round_trip():
    led = _ledger([{0: 0.123456789, 1: -0.5}, {0: 0.25, 1: 0.75, 2: 1 / 3}])
    text = led.to_csv()
    assert text.splitlines()[0] == "task_index,distortion_id,srcc,abs_srcc"
    back = EvalLedger.from_csv(text)
    assert back.srcc == led.srcc
    assert back.intro_task == led.intro_task
    assert back.to_csv() == text
