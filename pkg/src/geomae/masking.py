"""Random, tube and combined masks over the (timestep, source, patch) token lattice."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Tuple, Union

import numpy as np
import torch

SCHEMES = ("random", "tube", "combined")

RngLike = Union[int, np.random.Generator, None]


def masked_count(ratio: float, size: int) -> int:
    """``floor(ratio * size)`` with the ratio read as the decimal it was written as.

    ``0.29 * 100`` is ``28.999...`` in binary floating point; reading the
    ratio through its shortest repr keeps the count at the intended 29.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    return math.floor(Fraction(repr(float(ratio))) * size)


def _rng(rng: RngLike) -> Tuple[np.random.Generator, Optional[int]]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), rng


@dataclass(eq=False)
class Mask:
    """Boolean ``(t, s, p)`` lattice; True marks a masked (hidden) token."""

    lattice: np.ndarray
    scheme: str
    seed: Optional[int] = None

    @property
    def masked_count(self) -> int:
        return int(np.count_nonzero(self.lattice))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.lattice.shape)

    @property
    def n_visible(self) -> int:
        return int(self.lattice.size - self.masked_count)

    def per_slice(self) -> np.ndarray:
        """Masked count of every ``(t, s)`` slice."""
        return self.lattice.sum(axis=-1)

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.lattice.copy())


def random_mask(t: int, s: int, p: int, ratio: float, rng: RngLike = None) -> Mask:
    """Exactly ``floor(ratio * t*s*p)`` lattice positions, uniformly without replacement."""
    gen, seed = _rng(rng)
    n = t * s * p
    k = masked_count(ratio, n)
    flat = np.zeros(n, dtype=bool)
    flat[gen.permutation(n)[:k]] = True
    return Mask(flat.reshape(t, s, p), "random", seed)


def tube_mask(t: int, s: int, p: int, ratio: float, rng: RngLike = None) -> Mask:
    """One patch set of size ``floor(ratio * p)`` masked at every timestep and source."""
    gen, seed = _rng(rng)
    k = masked_count(ratio, p)
    row = np.zeros(p, dtype=bool)
    row[gen.permutation(p)[:k]] = True
    return Mask(np.broadcast_to(row, (t, s, p)).copy(), "tube", seed)


def combined_mask(t: int, s: int, p: int, tube_ratio: float = 0.75, rand_ratio: float = 0.25,
                  rng: RngLike = None) -> Mask:
    """Tube-mask ``floor(tube_ratio * p)`` patches, then per slice mask
    ``floor(rand_ratio * r)`` of the ``r`` patches left, drawn independently."""
    gen, seed = _rng(rng)
    k_tube = masked_count(tube_ratio, p)
    order = gen.permutation(p)
    tube = np.zeros(p, dtype=bool)
    tube[order[:k_tube]] = True
    remaining = np.flatnonzero(~tube)
    k_rand = masked_count(rand_ratio, remaining.size)
    lattice = np.broadcast_to(tube, (t, s, p)).copy()
    for ti in range(t):
        for si in range(s):
            pick = remaining[gen.permutation(remaining.size)[:k_rand]]
            lattice[ti, si, pick] = True
    return Mask(lattice, "combined", seed)


def make_mask(scheme: str, t: int, s: int, p: int, ratio: float, rng: RngLike = None,
              rand_ratio: float = 0.25) -> Mask:
    """Dispatch on ``scheme``; for ``combined``, ``ratio`` is the tube ratio."""
    if scheme == "random":
        return random_mask(t, s, p, ratio, rng)
    if scheme == "tube":
        return tube_mask(t, s, p, ratio, rng)
    if scheme == "combined":
        return combined_mask(t, s, p, ratio, rand_ratio, rng)
    raise ValueError(f"unknown mask scheme {scheme!r}; expected one of {SCHEMES}")


def gather_visible(tokens, mask: Mask):
    """Visible tokens ``(n_vis, W)`` in lattice row-major order, plus their flat lattice indices."""
    lattice = mask.lattice
    if tuple(tokens.shape[:3]) != lattice.shape:
        raise ValueError(f"mask {lattice.shape} does not match tokens {tuple(tokens.shape[:3])}")
    index_map = np.flatnonzero(~lattice.ravel())
    if index_map.size == 0:
        raise ValueError("no visible tokens")
    flat = tokens.reshape(-1, tokens.shape[-1])
    if isinstance(tokens, torch.Tensor):
        return flat[torch.from_numpy(index_map)], index_map
    return flat[index_map], index_map


def scatter_visible(visible, index_map, lattice_shape, fill=0.0):
    """Inverse of :func:`gather_visible`; masked slots get ``fill``."""
    n = int(np.prod(lattice_shape))
    width = visible.shape[-1]
    if isinstance(visible, torch.Tensor):
        out = torch.full((n, width), fill, dtype=visible.dtype)
        out[torch.as_tensor(index_map)] = visible
    else:
        out = np.full((n, width), fill, dtype=visible.dtype)
        out[index_map] = visible
    return out.reshape(*lattice_shape, width)


def render_ascii(mask: Mask, t: int = 0, s: int = 0, grid: Optional[int] = None) -> str:
    """One slice of the mask as a character grid ('#' masked, '.' visible)."""
    row = mask.lattice[t, s]
    g = grid or int(round(math.sqrt(row.size)))
    if g * g != row.size:
        g = row.size
    cells = np.where(row, "#", ".").reshape(-1, g)
    return "\n".join("".join(r) for r in cells)
