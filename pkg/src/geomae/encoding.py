"""Composite token encodings: 2-D sin-cos position, learned source and time embeddings."""
from __future__ import annotations

from typing import Iterable, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .region_store import Timestamp

YEAR_BASE = 2016
TIME_VOCAB = {"year": 7, "month": 13, "day": 32, "hour": 25}
TIME_COMPONENT_DIM = 16
TIME_DIM = 4 * TIME_COMPONENT_DIM
SOURCE_DIM = 64
POS_DIM = 128
GRID = 14


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    # [sin(pos * w_0..w_{k-1}), cos(pos * w_0..w_{k-1})], w_i = 10000^(-i/k)
    k = dim // 2
    omega = 1.0 / 10000 ** (np.arange(k, dtype=np.float64) / k)
    angles = np.outer(positions.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def positional_grid(dim: int = POS_DIM, grid: int = GRID) -> np.ndarray:
    """Fixed ``(grid**2, dim)`` table; row ``r * grid + c`` is ``concat(code(r), code(c))``."""
    if dim % 4:
        raise ValueError(f"D must be divisible by 4, got {dim}")
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.concatenate([_sincos_1d(dim // 2, rows), _sincos_1d(dim // 2, cols)], axis=1)


def time_index(ts) -> Tuple[int, int, int, int]:
    """Map a timestamp to ``(year, month, day, hour)`` embedding indices; 0 means unknown.

    Accepts a :class:`Timestamp` or a ``(year, month, day, hour)`` sequence whose
    hour may be ``None``.  Out-of-range components map to 0 and never raise.
    """
    if isinstance(ts, Timestamp):
        year, month, day, hour = ts.year, ts.month, ts.day, ts.hour
    else:
        year, month, day, hour = ts
    iy = year - YEAR_BASE if isinstance(year, int) and 2017 <= year <= 2022 else 0
    im = month if isinstance(month, int) and 1 <= month <= 12 else 0
    iday = day if isinstance(day, int) and 1 <= day <= 31 else 0
    ih = hour + 1 if isinstance(hour, int) and 0 <= hour <= 23 else 0
    return int(iy), int(im), int(iday), int(ih)


def time_indices(stamps: Iterable) -> torch.Tensor:
    """``(t, 4)`` long tensor of embedding indices."""
    rows = [time_index(ts) for ts in stamps]
    return torch.tensor(rows, dtype=torch.long).reshape(-1, 4)


def timestep_dropout(timesteps: torch.Tensor, prob: float = 0.10, rng: np.random.Generator = None) -> torch.Tensor:
    """Zero the whole ``(t, 4)`` index block with probability ``prob`` (one draw per call)."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError("prob must be in [0, 1]")
    if rng is None:
        rng = np.random.default_rng()
    if rng.random() < prob:
        return torch.zeros_like(timesteps)
    return timesteps


class TimeEmbedding(nn.Module):
    """Four lookup tables (year/month/day/hour), 16 dims each, concatenated to 64."""

    def __init__(self, component_dim: int = TIME_COMPONENT_DIM):
        super().__init__()
        self.year = nn.Embedding(TIME_VOCAB["year"], component_dim)
        self.month = nn.Embedding(TIME_VOCAB["month"], component_dim)
        self.day = nn.Embedding(TIME_VOCAB["day"], component_dim)
        self.hour = nn.Embedding(TIME_VOCAB["hour"], component_dim)

    @property
    def dim(self) -> int:
        return 4 * self.year.embedding_dim

    def forward(self, timesteps: torch.Tensor) -> torch.Tensor:
        """``(..., 4)`` indices to ``(..., 64)``."""
        return torch.cat(
            [
                self.year(timesteps[..., 0]),
                self.month(timesteps[..., 1]),
                self.day(timesteps[..., 2]),
                self.hour(timesteps[..., 3]),
            ],
            dim=-1,
        )


def embed_time(timesteps, tables: TimeEmbedding) -> torch.Tensor:
    return tables(torch.as_tensor(timesteps, dtype=torch.long))


class SourceEmbedding(nn.Module):
    def __init__(self, names: Sequence[str], dim: int = SOURCE_DIM):
        super().__init__()
        self.names = list(names)
        self.ids = {n: i for i, n in enumerate(self.names)}
        self.table = nn.Embedding(len(self.names), dim)

    def id_of(self, name: str) -> int:
        if name not in self.ids:
            raise KeyError(f"unregistered source {name!r}")
        return self.ids[name]

    def forward(self, source_ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(source_ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= len(self.names)):
            raise KeyError(f"unregistered source id in {ids.tolist()}")
        return self.table(ids)


def embed_source(source_ids, table: SourceEmbedding) -> torch.Tensor:
    return table(source_ids)


def compose_encoding(pos: torch.Tensor, src: torch.Tensor, time: torch.Tensor) -> torch.Tensor:
    """Broadcast-concatenate to ``(..., t, s, p, D + d_src + d_time)``.

    ``pos`` is ``(p, D)``; ``src`` is ``(..., s, d_src)``; ``time`` is
    ``(..., t, d_time)`` or ``(..., t, s, d_time)`` when each source carries
    its own timestamps.  Leading batch dims must match between src and time.
    """
    pos = torch.as_tensor(pos)
    src = torch.as_tensor(src)
    time = torch.as_tensor(time)
    if pos.dim() != 2:
        raise ValueError("pos must be (p, D)")
    if src.dim() < 2:
        raise ValueError("src must be (..., s, d)")
    lead = src.shape[:-2]
    s, p = src.shape[-2], pos.shape[0]
    if time.dim() == src.dim():
        time = time.unsqueeze(-2).expand(*time.shape[:-1], s, time.shape[-1])
    if time.dim() != src.dim() + 1 or time.shape[-2] != s or time.shape[:-3] != lead:
        raise ValueError(f"dim mismatch: src {tuple(src.shape)} vs time {tuple(time.shape)}")
    t = time.shape[-3]
    dtype = torch.promote_types(torch.promote_types(pos.dtype, src.dtype), time.dtype)
    shape = (*lead, t, s, p)
    parts = [
        pos.to(dtype).expand(*shape, pos.shape[-1]),
        src.to(dtype)[..., None, :, None, :].expand(*shape, src.shape[-1]),
        time.to(dtype)[..., :, :, None, :].expand(*shape, time.shape[-1]),
    ]
    return torch.cat(parts, dim=-1)
