"""Dataset curation: patch gridding, cloud filtering, SCL-entropy ranking,
temporal sequence selection and SAR date pairing."""
from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .region_store import Timestamp

MAX_REVISITS = 10
DENSE_COUNT = 6
SEASONAL_OFFSETS_MONTHS = (3, 6, 9, 12)


@dataclass(frozen=True)
class Candidate:
    offset: Tuple[int, int]
    cloud_fraction: float
    scl_entropy: float


@dataclass(frozen=True)
class DateSequence:
    dates: Tuple[Timestamp, ...]
    dense_count: int
    seasonal_count: int

    def __len__(self):
        return len(self.dates)


def patch_grid(capture_h: int, capture_w: int, window: int) -> List[Tuple[int, int]]:
    """Top-left anchored, non-overlapping ``window`` x ``window`` offsets in row-major order."""
    if window < 1:
        raise ValueError("window must be >= 1")
    rows, cols = capture_h // window, capture_w // window
    return [(i * window, j * window) for i in range(rows) for j in range(cols)]


def cloud_fraction(cloud_mask) -> float:
    mask = np.asarray(cloud_mask)
    if mask.size == 0:
        raise ValueError("empty cloud mask")
    return float(np.count_nonzero(mask)) / mask.size


def scl_entropy(scl_map, n_classes: int = 11) -> float:
    """Shannon entropy (nats) of the empirical class histogram of ``scl_map``."""
    labels = np.asarray(scl_map)
    if labels.size == 0:
        raise ValueError("empty scene classification map")
    flat = labels.astype(np.int64, copy=False).ravel()
    if flat.min() < 0 or flat.max() >= n_classes or not np.array_equal(flat, labels.ravel()):
        raise ValueError(f"label out of range [0, {n_classes})")
    counts = np.bincount(flat, minlength=n_classes)
    p = counts[counts > 0] / flat.size
    return float(-(p * np.log(p)).sum()) + 0.0


def rank_candidates(candidates: Sequence[Candidate], k: int, cloud_max: float = 0.3) -> List[Candidate]:
    """Keep candidates with cloud below ``cloud_max`` and return the ``k`` highest-entropy ones.

    Ties on entropy go to the less cloudy candidate, then to the earlier
    offset in row-major order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    kept = [c for c in candidates if c.cloud_fraction < cloud_max]
    kept.sort(key=lambda c: (-c.scl_entropy, c.cloud_fraction, c.offset))
    return kept[:k]


def score_capture(scl_map, cloud_mask, window: int, n_classes: int = 11) -> List[Candidate]:
    """Grid a capture and score every window by cloud fraction and SCL entropy."""
    scl_map = np.asarray(scl_map)
    cloud_mask = np.asarray(cloud_mask)
    if scl_map.shape != cloud_mask.shape:
        raise ValueError("scl map and cloud mask shapes differ")
    h, w = scl_map.shape
    out = []
    for r, c in patch_grid(h, w, window):
        win = (slice(r, r + window), slice(c, c + window))
        out.append(Candidate((r, c), cloud_fraction(cloud_mask[win]), scl_entropy(scl_map[win], n_classes)))
    return out


def _filled(ts: Timestamp) -> Tuple[int, int, int, int]:
    # unknown components sit mid-range; used for distances only
    year = ts.year if ts.year else 2019
    month = ts.month if 1 <= ts.month <= 12 else 6
    day = ts.day if 1 <= ts.day <= 31 else 15
    hour = ts.hour if ts.hour is not None else 12
    return year, month, day, hour


def day_ordinal(ts: Timestamp) -> int:
    """Proleptic Gregorian day number of ``ts`` (hour is ignored)."""
    year, month, day, _ = _filled(ts)
    day = min(day, _days_in_month(year, month))
    return _dt.date(year, month, day).toordinal()


def _days_in_month(year: int, month: int) -> int:
    nxt = _dt.date(year + (month == 12), month % 12 + 1, 1)
    return (nxt - _dt.timedelta(days=1)).day


def _shift_months(ordinal: int, months: int) -> int:
    d = _dt.date.fromordinal(ordinal)
    m = d.month - 1 + months
    year, month = d.year + m // 12, m % 12 + 1
    day = min(d.day, _days_in_month(year, month))
    return _dt.date(year, month, day).toordinal()


def select_temporal_sequence(available: Sequence[Timestamp]) -> DateSequence:
    """Pick up to ten revisits: a dense block of six plus four seasonal dates.

    The dense block is the run of six consecutive observations with the
    smallest time span (earliest wins ties).  The seasonal dates are the
    observations nearest to 3, 6, 9 and 12 months after the dense block's
    last date, taken only from dates after that block and never reused.
    """
    if not available:
        raise ValueError("no dates available")
    dates = list(available)
    keys = [day_ordinal(d) for d in dates]
    if any(b < a for a, b in zip(keys, keys[1:])):
        raise ValueError("available dates must be sorted ascending")
    if len(dates) < MAX_REVISITS:
        return DateSequence(tuple(dates), len(dates), 0)

    n = len(dates)
    best = None
    for i in range(n - DENSE_COUNT + 1):
        span = keys[i + DENSE_COUNT - 1] - keys[i]
        if best is None or span < best[0]:
            best = (span, i)
    start = best[1]
    dense_idx = list(range(start, start + DENSE_COUNT))

    used = set(dense_idx)
    seasonal_idx = []
    anchor = keys[dense_idx[-1]]
    for months in SEASONAL_OFFSETS_MONTHS:
        target = _shift_months(anchor, months)
        pick = None
        for j in range(dense_idx[-1] + 1, n):
            if j in used:
                continue
            dist = abs(keys[j] - target)
            if pick is None or dist < pick[0]:
                pick = (dist, j)
        if pick is not None:
            used.add(pick[1])
            seasonal_idx.append(pick[1])
    seasonal_idx.sort()
    chosen = dense_idx + seasonal_idx
    # a block of identical dates is not strictly increasing; drop exact repeats
    out, seen = [], set()
    n_dense = 0
    for pos, j in enumerate(chosen):
        if keys[j] in seen:
            continue
        seen.add(keys[j])
        out.append(dates[j])
        n_dense += pos < DENSE_COUNT
    return DateSequence(tuple(out), n_dense, len(out) - n_dense)


def sequence_cloud_score(cloud_fractions: Sequence[float], aggregate: str = "mean") -> float:
    """Cloudiness of a date sequence; lower is better."""
    values = np.asarray(cloud_fractions, dtype=float)
    if values.size == 0:
        raise ValueError("no cloud fractions")
    if aggregate == "mean":
        return float(values.mean())
    if aggregate == "max":
        return float(values.max())
    raise ValueError(f"aggregate must be 'mean' or 'max', got {aggregate!r}")


def best_sequence(sequences: Sequence[DateSequence], cloud_fractions: Sequence[Sequence[float]],
                  aggregate: str = "mean") -> int:
    """Index of the least cloudy sequence (first one wins ties)."""
    if not sequences or len(sequences) != len(cloud_fractions):
        raise ValueError("need one cloud-fraction list per sequence")
    scores = [sequence_cloud_score(cf, aggregate) for cf in cloud_fractions]
    return int(np.argmin(scores))


def pair_sar_dates(s2_dates: Sequence[Timestamp], s1_available: Sequence[Timestamp]) -> List[Timestamp]:
    """For every optical date, the radar date closest in days (earlier wins ties)."""
    if not s1_available:
        raise ValueError("no Sentinel-1 dates available")
    s1 = sorted(s1_available, key=day_ordinal)
    s1_keys = [day_ordinal(d) for d in s1]
    out = []
    for d in s2_dates:
        key = day_ordinal(d)
        best: Optional[Tuple[int, int, int]] = None
        for j, k in enumerate(s1_keys):
            cand = (abs(k - key), k, j)
            if best is None or cand < best:
                best = cand
        out.append(s1[best[2]])
    return out
