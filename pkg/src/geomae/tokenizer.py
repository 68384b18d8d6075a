"""Per-source tokenization: standardize, resize to the common grid, patchify, embed."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .region_store import SourceProfile, SourceTensor

IMAGE_SIZE = 224
PATCH_SIZE = 16
STATS_EPS = 1e-6

# Sentinel-2 band order B1..B12 with B8A after B8; groups by native resolution
SENTINEL2_GROUPS: Dict[str, List[int]] = {
    "10m": [1, 2, 3, 7],
    "20m": [4, 5, 6, 8, 11, 12],
    "60m": [0, 9, 10],
}


@dataclass
class BandStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = STATS_EPS

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")
        if np.any(self.std < 0):
            raise ValueError("std must be >= 0")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")

    @property
    def bands(self) -> int:
        return int(self.mean.shape[0])


class BandStatsAccumulator:
    """Single-pass per-band moments, merged with Chan's parallel update."""

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def update(self, data) -> None:
        data = data.data if isinstance(data, SourceTensor) else np.asarray(data)
        if data.ndim != 4:
            raise ValueError("expected (t, c, h, w) arrays")
        x = np.moveaxis(data, 1, 0).reshape(data.shape[1], -1).astype(np.float64)
        n_b = x.shape[1]
        mean_b = x.mean(axis=1)
        m2_b = ((x - mean_b[:, None]) ** 2).sum(axis=1)
        if self.mean is None:
            self.count, self.mean, self.m2 = n_b, mean_b, m2_b
            return
        if mean_b.shape != self.mean.shape:
            raise ValueError("band count changed within the stream")
        total = self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + m2_b + delta ** 2 * (self.count * n_b / total)
        self.count = total

    def result(self, epsilon: float = STATS_EPS) -> BandStats:
        if self.mean is None:
            raise ValueError("empty stream")
        return BandStats(self.mean, np.sqrt(self.m2 / self.count), epsilon)


def compute_band_stats(stream: Iterable, epsilon: float = STATS_EPS) -> BandStats:
    """Per-band mean and population std over all pixels and timesteps of ``stream``.

    Items may be :class:`SourceTensor` or raw ``(t, c, h, w)`` arrays.
    """
    acc = BandStatsAccumulator()
    for item in stream:
        acc.update(item)
    return acc.result(epsilon)


def standardize(data, stats: BandStats) -> np.ndarray:
    """``(x - mean_b) / (std_b + eps)`` along the band axis of a ``(t, c, h, w)`` array."""
    data = np.asarray(data)
    if data.shape[-3] != stats.bands:
        raise ValueError(f"band mismatch: data has {data.shape[-3]} bands, stats {stats.bands}")
    shape = (-1, 1, 1)
    out = (data.astype(np.float64) - stats.mean.reshape(shape)) / (stats.std + stats.epsilon).reshape(shape)
    return out


def resize_bilinear(image, out: int = IMAGE_SIZE) -> torch.Tensor:
    """Corner-aligned bilinear resize of ``(..., h, w)`` to ``(..., out, out)``."""
    x = torch.as_tensor(image)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    if x.shape[-2:] == (out, out):
        return x.clone()
    lead = x.shape[:-2]
    flat = x.reshape(1, -1, *x.shape[-2:])
    res = F.interpolate(flat, size=(out, out), mode="bilinear", align_corners=True)
    return res.reshape(*lead, out, out)


def patchify(image, patch: int = PATCH_SIZE) -> torch.Tensor:
    """``(..., c, H, W)`` to ``(..., p, c * patch**2)``.

    Patches are in row-major grid order; each row is band-major, then
    row-major pixels inside the patch.
    """
    x = torch.as_tensor(image)
    c, H, W = x.shape[-3:]
    if H % patch or W % patch:
        raise ValueError(f"non-divisible: {H}x{W} image with patch {patch}")
    gh, gw = H // patch, W // patch
    lead = x.shape[:-3]
    x = x.reshape(*lead, c, gh, patch, gw, patch)
    n = len(lead)
    # (..., gh, gw, c, patch, patch)
    x = x.permute(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(tokens, bands: int, patch: int = PATCH_SIZE, grid: Optional[int] = None) -> torch.Tensor:
    """Exact inverse of :func:`patchify`: ``(..., p, bands * patch**2)`` to ``(..., bands, H, W)``."""
    x = torch.as_tensor(tokens)
    p, d = x.shape[-2:]
    if d != bands * patch * patch:
        raise ValueError(f"last dim {d} != bands * patch**2 = {bands * patch * patch}")
    g = int(round(p ** 0.5)) if grid is None else grid
    if g * g != p:
        raise ValueError(f"bad p: {p} is not a square grid")
    lead = x.shape[:-2]
    n = len(lead)
    x = x.reshape(*lead, g, g, bands, patch, patch)
    x = x.permute(*range(n), n + 2, n + 0, n + 3, n + 1, n + 4)
    return x.reshape(*lead, bands, g * patch, g * patch)


def prepare_source(source: SourceTensor, stats: Optional[BandStats], image_size: int = IMAGE_SIZE,
                   dtype=torch.float32) -> torch.Tensor:
    """Standardized (or raw, if ``stats`` is None) image resized to ``image_size``: ``(t, c, S, S)``."""
    data = source.data if stats is None else standardize(source.data, stats)
    x = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float64))
    return resize_bilinear(x, image_size).to(dtype)


class SourceTokenizer(torch.nn.Module):
    """Linear patch embeddings, one per registered source."""

    def __init__(self, bands: Mapping[str, int], width: int, patch: int = PATCH_SIZE):
        super().__init__()
        self.patch = patch
        self.bands = dict(bands)
        self.proj = torch.nn.ModuleDict(
            {name: torch.nn.Linear(c * patch * patch, width) for name, c in self.bands.items()}
        )

    def forward(self, name: str, image: torch.Tensor) -> torch.Tensor:
        """``(..., t, c, S, S)`` prepared image to ``(..., t, p, width)`` tokens."""
        if name not in self.proj:
            raise KeyError(f"unknown source {name!r}")
        if image.shape[-3] != self.bands[name]:
            raise ValueError(f"shape mismatch: {name!r} expects {self.bands[name]} bands, got {image.shape[-3]}")
        return self.proj[name](patchify(image, self.patch))


def tokenize_source(source: SourceTensor, tokenizer: SourceTokenizer, stats: Optional[BandStats],
                    image_size: int = IMAGE_SIZE) -> torch.Tensor:
    """Full pipeline for one source tensor: returns ``(t, p, width)``."""
    w = tokenizer.proj[source.profile.name].weight if source.profile.name in tokenizer.proj else None
    dtype = w.dtype if w is not None else torch.float32
    image = prepare_source(source, stats, image_size, dtype=dtype)
    return tokenizer(source.profile.name, image)


def split_by_group(source: SourceTensor, groups: Mapping[str, Sequence[int]] = SENTINEL2_GROUPS
                   ) -> Dict[str, SourceTensor]:
    """Split one source into band-group sources named ``"{name}:{group}"``."""
    out = {}
    for gname, idx in groups.items():
        idx = list(idx)
        prof = source.profile
        sub = SourceProfile(f"{prof.name}:{gname}", len(idx), prof.gsd_m, prof.height, prof.width, prof.dtype)
        out[sub.name] = SourceTensor(sub, np.ascontiguousarray(source.data[:, idx]), source.timestamps)
    return out
