"""Deterministic synthetic regions shaped like the geomae sensor catalog.

Randomness comes from a Philox-4x64 counter-based generator whose 128-bit key
is the BLAKE2b digest of ``(seed, region_id, source, stream)``.  Any region,
source or single timestep can therefore be regenerated in isolation and in
any order.

Each source image follows ``frame_k = base + k * drift + noise_k``: a
spatially smooth base field mixed across bands, a slow per-timestep drift,
and small white noise.  Consecutive frames are strongly correlated, which is
what makes temporal leakage (and hence tube masking) matter.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .region_store import Region, SourceProfile, SourceTensor, Timestamp, write_shard

CATALOG: Dict[str, SourceProfile] = {
    p.name: p
    for p in [
        SourceProfile("satellogic", bands=4, gsd_m=1.0, height=384, width=384, dtype="u8"),
        SourceProfile("sentinel1", bands=2, gsd_m=10.0, height=384, width=384, dtype="u16"),
        SourceProfile("sentinel2", bands=13, gsd_m=10.0, height=384, width=384, dtype="u16"),
        SourceProfile("neon-rgb", bands=3, gsd_m=0.1, height=640, width=640, dtype="u8"),
        SourceProfile("neon-hyper", bands=369, gsd_m=1.0, height=64, width=64, dtype="u16"),
        SourceProfile("neon-elev", bands=1, gsd_m=1.0, height=64, width=64, dtype="f32"),
        # curation test profile: 13 MS bands + scene classification + cloud mask
        SourceProfile("sentinel2-scl", bands=15, gsd_m=10.0, height=768, width=768, dtype="u16"),
    ]
}

# (min, max) revisits allowed per catalog source
REVISIT_BOUNDS: Dict[str, Tuple[int, int]] = {
    "satellogic": (1, 5),
    "sentinel1": (3, 9),
    "sentinel2": (1, 10),
    "neon-rgb": (1, 3),
    "neon-hyper": (1, 3),
    "neon-elev": (1, 3),
    "sentinel2-scl": (1, 10),
}
DEFAULT_REVISITS: Dict[str, Tuple[int, int]] = {
    "satellogic": (1, 5),
    "sentinel1": (3, 9),
    "sentinel2": (10, 10),
    "neon-rgb": (3, 3),
    "neon-hyper": (3, 3),
    "neon-elev": (3, 3),
    "sentinel2-scl": (1, 1),
}

SCL_CLASSES = 11
SCL_BAND = 13
CLOUD_BAND = 14
PATTERNS = ("smooth-field", "blobs", "checker")

# value = offset + scale * field, per storage dtype
_DTYPE_MAP = {"u8": (128.0, 40.0, 0.0, 255.0), "u16": (3000.0, 1000.0, 0.0, 65535.0), "f32": (20.0, 10.0, -math.inf, math.inf)}


def keyed_rng(seed: int, *parts) -> np.random.Generator:
    """Philox generator keyed by a digest of ``(seed, *parts)``."""
    text = "|".join([str(int(seed))] + [str(p) for p in parts]).encode("utf-8")
    key = int.from_bytes(hashlib.blake2b(text, digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class SynthConfig:
    seed: int = 0
    profiles: List[Union[str, SourceProfile]] = field(default_factory=lambda: ["sentinel2"])
    revisits: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    spatial_pattern: str = "smooth-field"
    noise: float = 0.02
    drift: float = 0.08

    def resolved_profiles(self) -> List[SourceProfile]:
        out = []
        for p in self.profiles:
            if isinstance(p, SourceProfile):
                out.append(p)
            elif p in CATALOG:
                out.append(CATALOG[p])
            else:
                raise KeyError(f"unknown profile {p!r}; known: {sorted(CATALOG)}")
        return out

    def revisit_range(self, name: str) -> Tuple[int, int]:
        return tuple((self.revisits or {}).get(name, DEFAULT_REVISITS.get(name, (1, 3))))

    def validate(self) -> None:
        profiles = self.resolved_profiles()
        if not profiles:
            raise ValueError("at least one profile is required")
        names = [p.name for p in profiles]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate profile names in {names}")
        for p in profiles:
            problems = p.violations()
            if problems:
                raise ValueError("; ".join(problems))
            lo, hi = self.revisit_range(p.name)
            blo, bhi = REVISIT_BOUNDS.get(p.name, (1, 68))
            if not (blo <= lo <= hi <= bhi):
                raise ValueError(f"revisits {(lo, hi)} for {p.name!r} outside allowed {(blo, bhi)}")
        if self.spatial_pattern not in PATTERNS:
            raise ValueError(f"spatial_pattern must be one of {PATTERNS}")


def _grid(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n, dtype=np.float64)


def _smooth_field(rng, h, w, n_waves=4):
    y, x = _grid(h), _grid(w)
    out = np.zeros((h, w))
    for _ in range(n_waves):
        fy, fx = rng.uniform(0.5, 3.0, size=2) * rng.choice([-1.0, 1.0], size=2)
        phase = rng.uniform(0.0, 2 * math.pi)
        a = 2 * math.pi * fy * y + phase
        b = 2 * math.pi * fx * x
        # cos(a + b) = cos a cos b - sin a sin b, as outer products
        out += np.outer(np.cos(a), np.cos(b)) - np.outer(np.sin(a), np.sin(b))
    return out / math.sqrt(n_waves)


def _blob_field(rng, h, w, n_blobs=6):
    y, x = _grid(h), _grid(w)
    out = np.zeros((h, w))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        sy, sx = rng.uniform(0.08, 0.25, size=2)
        amp = rng.uniform(0.5, 1.5) * rng.choice([-1.0, 1.0])
        out += amp * np.outer(np.exp(-((y - cy) / sy) ** 2), np.exp(-((x - cx) / sx) ** 2))
    return out


def _checker_field(rng, h, w):
    cells = int(rng.integers(3, 7))
    values = rng.uniform(-1.0, 1.0, size=(cells, cells))
    rows = np.minimum((_grid(h) * cells).astype(int), cells - 1)
    cols = np.minimum((_grid(w) * cells).astype(int), cells - 1)
    return values[np.ix_(rows, cols)]


def _pattern(rng, kind, h, w):
    if kind == "smooth-field":
        return _smooth_field(rng, h, w)
    if kind == "blobs":
        return _blob_field(rng, h, w)
    return _checker_field(rng, h, w)


def _add_months(date: _dt.date, months: int) -> _dt.date:
    m = date.month - 1 + months
    year, month = date.year + m // 12, m % 12 + 1
    day = min(date.day, 28)
    return _dt.date(year, month, day)


def _timestamps(rng, name: str, t: int) -> List[Timestamp]:
    if name.startswith("neon"):
        y0 = int(rng.integers(2017, 2023 - t))
        return [Timestamp(y0 + k, 0, 0, None) for k in range(t)]
    if name == "satellogic":
        start = _dt.date(2022, 7, 1).toordinal()
        days = np.sort(rng.choice(np.arange(183), size=t, replace=False))
        return [_stamp(_dt.date.fromordinal(start + int(d)), None) for d in days]
    if name.startswith("sentinel2"):
        start = _dt.date(2017, 1, 1).toordinal() + int(rng.integers(0, 4 * 365))
        dense = [_dt.date.fromordinal(start + 5 * k) for k in range(6)]
        seasonal = [_add_months(dense[-1], 3 * k) for k in range(1, 5)]
        dates = (dense + seasonal)[:t]
        return [_stamp(d, int(rng.integers(9, 12))) for d in dates]
    if name == "sentinel1":
        start = _dt.date(2017, 1, 1).toordinal() + int(rng.integers(0, 4 * 365))
        return [_stamp(_dt.date.fromordinal(start + 12 * k), int(rng.integers(5, 19))) for k in range(t)]
    start = _dt.date(2017, 1, 1).toordinal()
    days = np.sort(rng.choice(np.arange(6 * 365), size=t, replace=False))
    return [_stamp(_dt.date.fromordinal(start + int(d)), int(rng.integers(0, 24))) for d in days]


def _stamp(d: _dt.date, hour: Optional[int]) -> Timestamp:
    return Timestamp(d.year, d.month, d.day, hour)


def _to_dtype(values: np.ndarray, dtype: str) -> np.ndarray:
    offset, scale, lo, hi = _DTYPE_MAP[dtype]
    v = offset + scale * values
    if dtype == "f32":
        return v.astype(np.float32)
    return np.clip(np.rint(v), lo, hi).astype(np.uint8 if dtype == "u8" else np.uint16)


def _curation_layers(config, region_id, name, t, h, w):
    """SCL labels and binary cloud masks for the curation profile, shape (t, 2, h, w)."""
    out = np.zeros((t, 2, h, w))
    rng = keyed_rng(config.seed, region_id, name, "scl")
    active = np.sort(rng.choice(SCL_CLASSES, size=int(rng.integers(2, SCL_CLASSES + 1)), replace=False))
    field_ = _blob_field(rng, h, w, n_blobs=10) + 0.3 * _smooth_field(rng, h, w)
    ranks = np.argsort(np.argsort(field_, axis=None)).reshape(h, w)
    scl = active[(ranks * len(active)) // (h * w)]
    for k in range(t):
        crng = keyed_rng(config.seed, region_id, name, "cloud", k)
        cloud_field = _blob_field(crng, h, w, n_blobs=4)
        cover = crng.uniform(0.0, 0.6)
        thr = np.quantile(cloud_field, 1.0 - cover)
        cloud = cloud_field > thr
        labels = np.where(cloud, 9, scl)
        out[k, 0] = labels
        out[k, 1] = cloud
    return out


def synth_source(config: SynthConfig, region_id: str, profile: SourceProfile) -> SourceTensor:
    name = profile.name
    meta_rng = keyed_rng(config.seed, region_id, name, "meta")
    lo, hi = config.revisit_range(name)
    t = int(meta_rng.integers(lo, hi + 1))
    stamps = _timestamps(meta_rng, name, t)
    c, h, w = profile.bands, profile.height, profile.width
    curation = name == "sentinel2-scl"
    c_img = c - 2 if curation else c

    frng = keyed_rng(config.seed, region_id, name, "field")
    n_comp = 3
    comps = np.stack([_pattern(frng, config.spatial_pattern, h, w) for _ in range(n_comp)])
    drift_field = _smooth_field(frng, h, w)
    mixing = frng.normal(0.0, 1.0, size=(c_img, n_comp)) / math.sqrt(n_comp)
    band_offset = frng.uniform(-3.0, 3.0, size=c_img)
    drift_gain = frng.uniform(0.5, 1.5, size=c_img)
    base = band_offset[:, None, None] + np.tensordot(mixing, comps, axes=1)

    data = np.empty((t, c, h, w), dtype=profile.numpy_dtype.newbyteorder("="))
    for k in range(t):
        nrng = keyed_rng(config.seed, region_id, name, "noise", k)
        frame = base + (k * config.drift) * drift_gain[:, None, None] * drift_field
        frame += nrng.normal(0.0, config.noise, size=frame.shape)
        data[k, :c_img] = _to_dtype(frame, profile.dtype)
    if curation:
        data[:, c_img:] = _curation_layers(config, region_id, name, t, h, w).astype(data.dtype)
    return SourceTensor(profile, data, tuple(stamps))


def synth_region(config: SynthConfig, region_id: str) -> Region:
    """Generate one region; identical ``(config.seed, region_id)`` gives identical output."""
    config.validate()
    profiles = config.resolved_profiles()
    brng = keyed_rng(config.seed, region_id, "bounds")
    lon = float(brng.uniform(-179.0, 178.0))
    lat = float(brng.uniform(-60.0, 70.0))
    ext_m = max(p.gsd_m * p.width for p in profiles) or 1.0
    ext = ext_m / 111_320.0
    bounds = (lon, lat, lon + ext, lat + ext)
    sources = {p.name: synth_source(config, region_id, p) for p in profiles}
    return Region(region_id, bounds, sources)


def region_ids(n: int) -> List[str]:
    return [f"region-{i:06d}" for i in range(n)]


class SynthDataset(Sequence):
    """Lazy sequence of synthetic regions; items are generated on access."""

    def __init__(self, config: SynthConfig, n_regions: int):
        config.validate()
        self.config = config
        self.ids = region_ids(n_regions)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return synth_region(self.config, self.ids[i])


def synth_dataset(config: SynthConfig, n_regions: int, out_dir, shard_size: int) -> List[str]:
    """Write ``n_regions`` synthetic regions to ``ceil(n / shard_size)`` shard files."""
    if n_regions < 1:
        raise ValueError("n_regions must be >= 1")
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    ids = region_ids(n_regions)
    paths = []
    for k, start in enumerate(range(0, n_regions, shard_size)):
        regions = [synth_region(config, rid) for rid in ids[start:start + shard_size]]
        path = os.path.join(out_dir, f"shard-{k:05d}.evsh")
        write_shard(regions, path)
        paths.append(path)
    return paths
