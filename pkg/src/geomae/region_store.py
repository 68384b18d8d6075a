"""Multi-source region data model and the EVSH shard file format.

An EVSH v1 shard is laid out as::

    bytes 0-3   magic b"EVSH"
    byte  4     version (0x01)
    byte  5     endian flag (0x01 = little-endian)
    bytes 6-7   zero
    u32         region_count
    per region:
        u32     meta_len
        bytes   UTF-8 JSON {region_id, bounds: [4 x f64], sources: {name: {timestamps: [[y, m, d, h], ...]}}}
        u16     source_count
        per source, sorted by name:
            u8      name_len
            bytes   name (UTF-8)
            u8      dtype code (0=u8, 1=u16, 2=f32)
            u32 x 4 dims (t, c, h, w)
            bytes   raw row-major payload

All integers are little-endian. Timestamps are stored as ``[year, month,
day, hour]`` with 0 meaning unknown; a known hour ``h`` in 0..23 is stored as
``h + 1`` so the stored hour lies in 0..24.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

MAGIC = b"EVSH"
VERSION = 1
LITTLE_ENDIAN = 1
HEADER_SIZE = 12

DTYPE_CODES: Dict[str, int] = {"u8": 0, "u16": 1, "f32": 2}
CODE_DTYPES: Dict[int, str] = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES: Dict[str, np.dtype] = {
    "u8": np.dtype("<u1"),
    "u16": np.dtype("<u2"),
    "f32": np.dtype("<f4"),
}

YEAR_RANGE = (2017, 2022)


class ShardError(ValueError):
    """Raised for malformed shard files."""


class ValidationError(ValueError):
    """Raised when a region breaks a type invariant."""


@dataclass(frozen=True)
class SourceProfile:
    """Static description of one sensor source."""

    name: str
    bands: int
    gsd_m: float = field(compare=False)
    height: int
    width: int
    dtype: str = "u16"

    @property
    def numpy_dtype(self) -> np.dtype:
        return NUMPY_DTYPES[self.dtype]

    def violations(self) -> List[str]:
        out = []
        if not self.name:
            out.append("profile name is empty")
        if self.bands < 1:
            out.append(f"profile {self.name!r}: bands must be >= 1, got {self.bands}")
        if self.height < 1 or self.width < 1:
            out.append(f"profile {self.name!r}: height/width must be >= 1")
        if self.dtype not in DTYPE_CODES:
            out.append(f"profile {self.name!r}: unsupported dtype {self.dtype!r}")
        return out


@dataclass(frozen=True)
class Timestamp:
    """Calendar timestamp; 0 in year/month/day and ``None`` hour mean unknown."""

    year: int = 0
    month: int = 0
    day: int = 0
    hour: Optional[int] = None

    @classmethod
    def unknown(cls) -> "Timestamp":
        return cls()

    @classmethod
    def from_stored(cls, values: Sequence[int]) -> "Timestamp":
        y, m, d, h = (int(v) for v in values)
        return cls(y, m, d, None if h == 0 else h - 1)

    def sort_key(self) -> Tuple[int, int, int, int]:
        return (self.year, self.month, self.day, -1 if self.hour is None else self.hour)

    def to_stored(self) -> List[int]:
        return [self.year, self.month, self.day, 0 if self.hour is None else self.hour + 1]

    def violations(self) -> List[str]:
        out = []
        if self.year != 0 and not YEAR_RANGE[0] <= self.year <= YEAR_RANGE[1]:
            out.append(f"year {self.year} outside {{0}} U [2017, 2022]")
        if not 0 <= self.month <= 12:
            out.append(f"month {self.month} outside [0, 12]")
        if not 0 <= self.day <= 31:
            out.append(f"day {self.day} outside [0, 31]")
        if self.hour is not None and not 0 <= self.hour <= 23:
            out.append(f"hour {self.hour} outside [0, 23]")
        return out


@dataclass(frozen=True, eq=False)
class SourceTensor:
    profile: SourceProfile
    data: np.ndarray
    timestamps: Tuple[Timestamp, ...]

    def __post_init__(self):
        object.__setattr__(self, "timestamps", tuple(self.timestamps))

    @property
    def t(self) -> int:
        return int(self.data.shape[0]) if self.data.ndim >= 1 else 0

    def __eq__(self, other):
        if not isinstance(other, SourceTensor):
            return NotImplemented
        return (
            self.profile == other.profile
            and self.timestamps == other.timestamps
            and self.data.dtype == other.data.dtype
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class Region:
    region_id: str
    bounds: Tuple[float, float, float, float]
    sources: Mapping[str, SourceTensor] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        object.__setattr__(self, "sources", dict(sorted(self.sources.items())))

    def __eq__(self, other):
        if not isinstance(other, Region):
            return NotImplemented
        return (
            self.region_id == other.region_id
            and self.bounds == other.bounds
            and list(self.sources) == list(other.sources)
            and all(self.sources[k] == other.sources[k] for k in self.sources)
        )


def validate_region(region: Region) -> List[str]:
    """Return every invariant breach found in ``region`` (empty list means valid)."""
    out: List[str] = []
    rid = region.region_id
    if not isinstance(rid, str) or not rid:
        out.append("region_id must be a nonempty string")
    if len(region.bounds) != 4:
        out.append(f"region {rid}: bounds must have 4 values")
    else:
        lon_min, lat_min, lon_max, lat_max = region.bounds
        if not all(math.isfinite(b) for b in region.bounds):
            out.append(f"region {rid}: bounds must be finite")
        if not lon_min < lon_max:
            out.append(f"region {rid}: lon_min {lon_min} must be < lon_max {lon_max}")
        if not lat_min < lat_max:
            out.append(f"region {rid}: lat_min {lat_min} must be < lat_max {lat_max}")
    if not region.sources:
        out.append(f"region {rid}: no sources")
    for name, src in region.sources.items():
        prof = src.profile
        where = f"region {rid}, source {name!r}"
        if name != prof.name:
            out.append(f"{where}: key does not match profile name {prof.name!r}")
        if len(name.encode("utf-8")) > 255:
            out.append(f"{where}: name longer than 255 bytes")
        out.extend(f"{where}: {v}" for v in prof.violations())
        data = src.data
        if data.ndim != 4:
            out.append(f"{where}: data must be 4-D (t, c, h, w), got {data.ndim}-D")
            continue
        t, c, h, w = data.shape
        if t < 1:
            out.append(f"{where}: needs at least one timestep")
        if c != prof.bands:
            out.append(f"{where}: {c} bands but profile says {prof.bands}")
        if (h, w) != (prof.height, prof.width):
            out.append(f"{where}: spatial dims {(h, w)} != profile {(prof.height, prof.width)}")
        if prof.dtype in NUMPY_DTYPES and data.dtype != NUMPY_DTYPES[prof.dtype].newbyteorder("="):
            out.append(f"{where}: array dtype {data.dtype} != profile dtype {prof.dtype}")
        if len(src.timestamps) != t:
            out.append(f"{where}: {len(src.timestamps)} timestamps for {t} timesteps")
        for i, ts in enumerate(src.timestamps):
            out.extend(f"{where}, timestamp {i}: {v}" for v in ts.violations())
    return out


def _metadata_bytes(region: Region) -> bytes:
    # key order is fixed: region_id, bounds, sources (sorted by name)
    meta = {
        "region_id": region.region_id,
        "bounds": [float(b) for b in region.bounds],
        "sources": {
            name: {"timestamps": [ts.to_stored() for ts in region.sources[name].timestamps]}
            for name in sorted(region.sources)
        },
    }
    return json.dumps(meta, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_region(region: Region) -> bytes:
    problems = validate_region(region)
    if problems:
        raise ValidationError(f"invalid region {region.region_id!r}: " + "; ".join(problems))
    meta = _metadata_bytes(region)
    parts = [struct.pack("<I", len(meta)), meta, struct.pack("<H", len(region.sources))]
    for name in sorted(region.sources):
        src = region.sources[name]
        raw_name = name.encode("utf-8")
        arr = np.ascontiguousarray(src.data, dtype=NUMPY_DTYPES[src.profile.dtype])
        parts.append(struct.pack("<B", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B4I", DTYPE_CODES[src.profile.dtype], *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def encode_shard(regions: Sequence[Region]) -> bytes:
    header = MAGIC + struct.pack("<BBH I", VERSION, LITTLE_ENDIAN, 0, len(regions))
    return header + b"".join(encode_region(r) for r in regions)


def write_shard(regions: Sequence[Region], path) -> int:
    """Serialize ``regions`` to ``path``; returns the number of bytes written.

    Every region is validated before anything touches the disk, so a bad
    region never leaves a partial file behind.
    """
    blob = encode_shard(list(regions))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return len(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ShardError("truncated payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def decode_shard(blob: bytes) -> List[Region]:
    if len(blob) < 4 or bytes(blob[:4]) != MAGIC:
        raise ShardError("bad magic")
    if len(blob) < HEADER_SIZE:
        raise ShardError("truncated payload")
    version, endian, _reserved, count = struct.unpack("<BBHI", blob[4:HEADER_SIZE])
    if version != VERSION:
        raise ShardError(f"unsupported version {version}")
    if endian != LITTLE_ENDIAN:
        raise ShardError(f"unsupported endian flag {endian}")
    rd = _Reader(blob)
    rd.pos = HEADER_SIZE
    regions = []
    for _ in range(count):
        (meta_len,) = rd.unpack("<I")
        try:
            meta = json.loads(bytes(rd.take(meta_len)).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ShardError(f"corrupt region metadata: {exc}") from None
        (n_sources,) = rd.unpack("<H")
        sources = {}
        for _ in range(n_sources):
            (name_len,) = rd.unpack("<B")
            try:
                name = bytes(rd.take(name_len)).decode("utf-8")
            except UnicodeDecodeError as exc:
                raise ShardError(f"corrupt source name: {exc}") from None
            code, t, c, h, w = rd.unpack("<B4I")
            if code not in CODE_DTYPES:
                raise ShardError(f"dtype code {code} out of range")
            dtype = CODE_DTYPES[code]
            np_dtype = NUMPY_DTYPES[dtype]
            payload = rd.take(t * c * h * w * np_dtype.itemsize)
            data = np.frombuffer(payload, dtype=np_dtype).reshape(t, c, h, w)
            data = data.astype(np_dtype.newbyteorder("="), copy=True)
            try:
                stamps = tuple(Timestamp.from_stored(v) for v in meta["sources"][name]["timestamps"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ShardError(f"corrupt timestamps for source {name!r}: {exc}") from None
            # gsd is not stored; it is a catalog property, looked up when known
            gsd = _catalog_gsd(name)
            profile = SourceProfile(name=name, bands=c, gsd_m=gsd, height=h, width=w, dtype=dtype)
            sources[name] = SourceTensor(profile, data, stamps)
        try:
            region = Region(str(meta["region_id"]), tuple(meta["bounds"]), sources)
        except (KeyError, TypeError, ValueError) as exc:
            raise ShardError(f"corrupt region metadata: {exc!r}") from None
        problems = validate_region(region)
        if problems:
            raise ShardError("; ".join(problems))
        regions.append(region)
    if rd.pos != len(blob):
        raise ShardError(f"{len(blob) - rd.pos} trailing bytes after last region")
    return regions


def read_shard(path) -> List[Region]:
    with open(path, "rb") as fh:
        return decode_shard(fh.read())


def iter_shards(paths: Iterable) -> Iterable[Region]:
    for p in paths:
        yield from read_shard(p)


def shard_paths(directory) -> List[str]:
    """Sorted ``*.evsh`` files in ``directory``."""
    names = sorted(n for n in os.listdir(directory) if n.endswith(".evsh"))
    return [os.path.join(directory, n) for n in names]


def _catalog_gsd(name: str) -> float:
    from .synthgen import CATALOG

    prof = CATALOG.get(name)
    return prof.gsd_m if prof is not None else 0.0
