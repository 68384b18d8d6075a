import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geomae.curation import (Candidate, best_sequence, cloud_fraction, day_ordinal, pair_sar_dates, patch_grid,
                                rank_candidates, scl_entropy, score_capture, select_temporal_sequence,
                                sequence_cloud_score)
from geomae.region_store import Timestamp


def ts(d: dt.date) -> Timestamp:
    return Timestamp(d.year, d.month, d.day, 10)


def day(n: int) -> Timestamp:
    return ts(dt.date(2018, 1, 1) + dt.timedelta(days=n))


# -- patch grid / cloud / entropy -----------------------------------------------------------

def test_patch_grid_examples():
    assert patch_grid(1000, 800, 384) == [(0, 0), (0, 384), (384, 0), (384, 384)]
    assert patch_grid(384, 384, 384) == [(0, 0)]
    assert patch_grid(383, 500, 384) == []


@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(1, 700))
def test_patch_grid_windows_fit_and_do_not_overlap(h, w, window):
    offs = patch_grid(h, w, window)
    assert len(offs) == (h // window) * (w // window)
    assert offs == sorted(offs)
    for r, c in offs:
        assert r % window == 0 and c % window == 0
        assert r + window <= h and c + window <= w
    assert len(set(offs)) == len(offs)


def test_cloud_fraction():
    assert cloud_fraction(np.ones((3, 3))) == 1.0
    assert cloud_fraction(np.zeros((3, 3))) == 0.0
    m = np.zeros((4, 4))
    m[0] = 1
    assert cloud_fraction(m) == 0.25
    with pytest.raises(ValueError):
        cloud_fraction(np.zeros((0, 3)))


def test_scl_entropy_closed_forms():
    assert scl_entropy(np.full((5, 5), 3)) == 0.0
    assert abs(scl_entropy(np.arange(11 * 7).reshape(11, 7) % 11) - math.log(11)) < 1e-9
    half = np.array([[0, 0], [4, 4]])
    assert abs(scl_entropy(half) - math.log(2)) < 1e-12
    with pytest.raises(ValueError, match="out of range"):
        scl_entropy(np.array([[11]]))


@given(st.lists(st.integers(0, 10), min_size=1, max_size=400))
def test_scl_entropy_bounds(labels):
    e = scl_entropy(np.array(labels))
    assert 0.0 <= e <= math.log(11) + 1e-12
    counts = np.bincount(labels, minlength=11) / len(labels)
    oracle = -sum(p * math.log(p) for p in counts if p > 0)
    assert abs(e - oracle) < 1e-12


# -- ranking --------------------------------------------------------------------------------

def brute_force_rank(cands, k, cloud_max):
    # full sort with an explicit pairwise comparison, then filter
    import functools

    def cmp(a, b):
        for x, y in ((-a.scl_entropy, -b.scl_entropy), (a.cloud_fraction, b.cloud_fraction), (a.offset, b.offset)):
            if x != y:
                return -1 if x < y else 1
        return 0

    ordered = sorted(cands, key=functools.cmp_to_key(cmp))
    return [c for c in ordered if c.cloud_fraction < cloud_max][:k]


def test_rank_examples():
    cloudy = [Candidate((0, i), 1.0, 2.0) for i in range(3)]
    assert rank_candidates(cloudy, 2, 0.3) == []
    cands = [Candidate((0, 0), 0.0, 0.1), Candidate((0, 384), 0.0, 2.0), Candidate((384, 0), 0.0, 1.0)]
    assert rank_candidates(cands, 2, 0.3) == [cands[1], cands[2]]
    assert rank_candidates(cands, 10, 0.3) == [cands[1], cands[2], cands[0]]


def test_rank_tie_breaks():
    a = Candidate((384, 0), 0.1, 1.0)
    b = Candidate((0, 384), 0.1, 1.0)
    c = Candidate((0, 0), 0.05, 1.0)
    assert rank_candidates([a, b, c], 3) == [c, b, a]


def test_rank_against_brute_force_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(0, 671))
        cands = [Candidate((int(r), int(c)), float(cf), float(e))
                 for r, c, cf, e in zip(rng.integers(0, 8, n) * 384, rng.integers(0, 8, n) * 384,
                                        rng.choice([0.0, 0.1, 0.2, 0.5, rng.random()], n),
                                        rng.choice([0.5, 1.0, rng.random() * 2.4], n))]
        k = int(rng.integers(1, 50))
        assert rank_candidates(cands, k, 0.3) == brute_force_rank(cands, k, 0.3)


def test_score_capture_consistency():
    rng = np.random.default_rng(1)
    scl = rng.integers(0, 11, size=(800, 800))
    cloud = rng.random((800, 800)) < 0.2
    cands = score_capture(scl, cloud, 384)
    assert [c.offset for c in cands] == patch_grid(800, 800, 384)
    assert cands[3].cloud_fraction == cloud_fraction(cloud[384:768, 384:768])
    assert cands[3].scl_entropy == scl_entropy(scl[384:768, 384:768])


# -- temporal selection --------------------------------------------------------------------

def test_ten_dates_forced():
    dates = [day(7 * i) for i in range(10)]
    seq = select_temporal_sequence(dates)
    assert seq.dates == tuple(dates)
    assert (seq.dense_count, seq.seasonal_count) == (6, 4)


def test_few_dates_returned_as_is():
    dates = [day(0), day(40), day(90)]
    seq = select_temporal_sequence(dates)
    assert seq.dates == tuple(dates) and seq.dense_count == 3 and seq.seasonal_count == 0


def test_empty_and_unsorted():
    with pytest.raises(ValueError):
        select_temporal_sequence([])
    with pytest.raises(ValueError):
        select_temporal_sequence([day(5), day(1)] * 5)


def nearest_oracle(candidates, target):
    best = min(candidates, key=lambda d: (abs((d - target).days), d))
    return best


def test_daily_dates_over_two_years():
    start = dt.date(2018, 3, 1)
    dates = [start + dt.timedelta(days=i) for i in range(730)]
    seq = select_temporal_sequence([ts(d) for d in dates])
    assert seq.dense_count == 6 and seq.seasonal_count == 4
    dense = [dt.date(t.year, t.month, t.day) for t in seq.dates[:6]]
    assert dense == [start + dt.timedelta(days=i) for i in range(6)]
    end = dense[-1]
    for k, t in enumerate(seq.dates[6:], start=1):
        got = dt.date(t.year, t.month, t.day)
        m = end.month - 1 + 3 * k
        target = dt.date(end.year + m // 12, m % 12 + 1, min(end.day, 28))
        assert abs((got - target).days) <= 16
        assert got == nearest_oracle([d for d in dates if d > end], target)


@given(st.lists(st.integers(0, 2000), min_size=1, max_size=60, unique=True))
def test_sequence_invariants(offsets):
    dates = [day(o) for o in sorted(offsets)]
    seq = select_temporal_sequence(dates)
    keys = [day_ordinal(d) for d in seq.dates]
    assert len(seq.dates) <= 10
    assert all(a < b for a, b in zip(keys, keys[1:]))
    assert seq.dense_count + seq.seasonal_count == len(seq.dates)
    assert set(seq.dates) <= set(dates)


def test_dense_block_is_minimal_span_earliest():
    offs = [0, 10, 20, 30, 40, 50, 60, 61, 62, 63, 64, 65, 400, 500]
    seq = select_temporal_sequence([day(o) for o in offs])
    assert [day_ordinal(d) - day_ordinal(day(0)) for d in seq.dates[:6]] == [60, 61, 62, 63, 64, 65]


def test_cloud_aggregation_and_best_sequence():
    assert sequence_cloud_score([0.1, 0.3]) == pytest.approx(0.2)
    assert sequence_cloud_score([0.1, 0.3], "max") == 0.3
    with pytest.raises(ValueError):
        sequence_cloud_score([0.1], "median")
    seqs = [select_temporal_sequence([day(0)]), select_temporal_sequence([day(1)])]
    assert best_sequence(seqs, [[0.5], [0.2]]) == 1
    assert best_sequence(seqs, [[0.2], [0.2]]) == 0


# -- SAR pairing ---------------------------------------------------------------------------

def test_pairing_examples():
    s2 = [day(3), day(50)]
    assert pair_sar_dates(s2, s2 + [day(20)]) == s2
    assert pair_sar_dates([day(100)], [day(90), day(105)]) == [day(105)]
    assert pair_sar_dates([day(100)], [day(105), day(95)]) == [day(95)]
    with pytest.raises(ValueError):
        pair_sar_dates([day(1)], [])


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=20),
       st.lists(st.integers(0, 1000), min_size=1, max_size=20))
def test_pairing_matches_oracle(s2, s1):
    got = pair_sar_dates([day(o) for o in s2], [day(o) for o in s1])
    for o, g in zip(s2, got):
        want = min(s1, key=lambda x: (abs(x - o), x))
        assert g == day(want)


def test_unknown_components_fill_mid_range():
    assert day_ordinal(Timestamp(2019, 0, 0, None)) == dt.date(2019, 6, 15).toordinal()
