"""EarthMAE: asymmetric masked autoencoder over multi-source, multi-timestep tokens.

Patch tokens from every source and timestep form a ``(t, s, p)`` lattice.
Each token receives the composite encoding ``concat(position, source, time)``
by addition, so the model width equals the encoding width.  The encoder sees
only visible tokens; the decoder fills masked slots with a shared mask token,
adds a projection of the same encodings, and per-source heads predict the
normalized pixels of every patch.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoding import (SOURCE_DIM, TIME_COMPONENT_DIM, TIME_DIM, SourceEmbedding, TimeEmbedding,
                       compose_encoding, positional_grid, time_indices, timestep_dropout)
from .masking import Mask, make_mask
from .region_store import Region
from .tokenizer import BandStats, SourceTokenizer, patchify, prepare_source

NORM_PIX_EPS = 1e-6


@dataclass
class ModelConfig:
    width: int = 256
    pos_dim: int = 128
    encoder_depth: int = 4
    decoder_width: int = 128
    decoder_depth: int = 2
    heads: int = 4
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    patch: int = 16
    image_size: int = 224
    norm_pix: bool = True

    def __post_init__(self):
        if self.width != self.pos_dim + SOURCE_DIM + TIME_DIM:
            raise ValueError(
                f"width {self.width} must equal pos_dim + {SOURCE_DIM} + {TIME_DIM} = "
                f"{self.pos_dim + SOURCE_DIM + TIME_DIM}"
            )
        if self.width % self.heads or self.decoder_width % self.decoder_heads:
            raise ValueError("widths must be divisible by their head counts")
        if self.image_size % self.patch:
            raise ValueError("image_size must be divisible by patch")
        if self.pos_dim % 4:
            raise ValueError("pos_dim must be divisible by 4")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    def to_dict(self) -> dict:
        return asdict(self)


class Attention(nn.Module):
    # No key bias: softmax is invariant to it, so it would only add a
    # parameter whose true gradient is identically zero.
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.q_bias = nn.Parameter(torch.zeros(dim))
        self.v_bias = nn.Parameter(torch.zeros(dim))
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, N, C = x.shape
        h = self.heads
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        qkv = F.linear(x, self.qkv.weight, bias)
        q, k, v = qkv.reshape(B, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (C // h) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, C))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


@dataclass
class Batch:
    """Prepared model input for ``B`` samples sharing the same sources and timestep count.

    ``images[name]`` is ``(B, t, c, S, S)``; ``timesteps[name]`` is ``(B, t, 4)``
    embedding indices.
    """

    images: Dict[str, torch.Tensor]
    timesteps: Dict[str, torch.Tensor]

    @property
    def names(self) -> List[str]:
        return list(self.images)

    @property
    def size(self) -> int:
        return next(iter(self.images.values())).shape[0]

    @property
    def t(self) -> int:
        return next(iter(self.images.values())).shape[1]

    def to(self, dtype) -> "Batch":
        return Batch({k: v.to(dtype) for k, v in self.images.items()}, dict(self.timesteps))


def patch_target(image: torch.Tensor, patch: int = 16, norm_pix: bool = True) -> torch.Tensor:
    """Patchified reconstruction target; with ``norm_pix`` each patch is standardized by its own stats."""
    target = patchify(image, patch)
    if norm_pix:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, unbiased=False, keepdim=True)
        target = (target - mean) / (var + NORM_PIX_EPS) ** 0.5
    return target


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over masked positions of the per-position mean squared error.

    ``pred``/``target`` are ``(..., d)`` and ``mask`` is the boolean ``(...)``
    selector; unmasked positions do not enter the result at all.
    """
    if pred.shape != target.shape or pred.shape[:-1] != mask.shape:
        raise ValueError(f"shape mismatch: pred {tuple(pred.shape)}, target {tuple(target.shape)}, "
                         f"mask {tuple(mask.shape)}")
    if not bool(mask.any()):
        raise ValueError("zero masked positions")
    per_position = ((pred[mask] - target[mask]) ** 2).mean(dim=-1)
    return per_position.mean()


class EarthMAE(nn.Module):
    def __init__(self, config: ModelConfig, sources: Mapping[str, int]):
        super().__init__()
        self.config = config
        self.source_bands = dict(sources)
        cfg = config
        W, Wd = cfg.width, cfg.decoder_width

        self.tokenizer = SourceTokenizer(self.source_bands, W, cfg.patch)
        self.time_embed = TimeEmbedding(TIME_COMPONENT_DIM)
        self.source_embed = SourceEmbedding(list(self.source_bands), SOURCE_DIM)
        pos = torch.from_numpy(positional_grid(cfg.pos_dim, cfg.grid)).float()
        self.register_buffer("pos_embed", pos, persistent=False)

        self.blocks = nn.ModuleList([Block(W, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.encoder_depth)])
        self.norm = nn.LayerNorm(W)

        self.decoder_embed = nn.Linear(W, Wd)
        self.decoder_encoding = nn.Linear(W, Wd)
        self.mask_token = nn.Parameter(torch.zeros(Wd))
        self.decoder_blocks = nn.ModuleList(
            [Block(Wd, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)]
        )
        self.decoder_norm = nn.LayerNorm(Wd)
        self.heads = nn.ModuleDict(
            {name: nn.Linear(Wd, c * cfg.patch ** 2) for name, c in self.source_bands.items()}
        )
        self.reset_parameters()

    def reset_parameters(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, Attention):
                nn.init.zeros_(m.q_bias)
                nn.init.zeros_(m.v_bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, std=0.02)
        nn.init.normal_(self.mask_token, std=0.02)

    @property
    def dtype(self):
        return self.norm.weight.dtype

    # -- encodings -------------------------------------------------------------------------
    def encodings(self, names: Sequence[str], timesteps: Mapping[str, torch.Tensor]) -> torch.Tensor:
        """Composite encodings ``(B, t, s, p, W)`` for the given sources."""
        ids = torch.tensor([self.source_embed.id_of(n) for n in names])
        src = self.source_embed(ids)
        time = torch.stack([self.time_embed(timesteps[n]) for n in names], dim=-2)  # (B, t, s, 64)
        B = time.shape[0]
        return compose_encoding(self.pos_embed.to(self.dtype), src.expand(B, *src.shape), time)

    def embed_tokens(self, batch: Batch) -> torch.Tensor:
        """Linear patch embeddings ``(B, t, s, p, W)``."""
        return torch.stack([self.tokenizer(n, batch.images[n]) for n in batch.names], dim=2)

    # -- encoder / decoder -----------------------------------------------------------------
    def encode(self, visible: torch.Tensor) -> torch.Tensor:
        """``(B, n_vis, W)`` token+encoding sums to latents of the same shape."""
        if visible.shape[1] < 1:
            raise ValueError("no visible tokens")
        if not torch.isfinite(visible).all():
            raise ValueError("non-finite encoder input")
        x = visible
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def decode(self, latents: torch.Tensor, mask: torch.Tensor, encodings: torch.Tensor,
               names: Sequence[str]) -> Dict[str, torch.Tensor]:
        """Predict every lattice slot; returns ``{name: (B, t, p, bands * patch**2)}``."""
        B, t, s, p = mask.shape
        L = t * s * p
        flat_mask = mask.reshape(B, L)
        n_vis = L - flat_mask.sum(dim=1)
        if bool((n_vis != latents.shape[1]).any()):
            raise ValueError("inconsistent mask: visible count does not match latents")
        y = self.decoder_embed(latents)
        full = self.mask_token.expand(B, L, -1).clone()
        full[~flat_mask] = y.reshape(-1, y.shape[-1])
        full = full + self.decoder_encoding(encodings.reshape(B, L, -1))
        for blk in self.decoder_blocks:
            full = blk(full)
        full = self.decoder_norm(full).reshape(B, t, s, p, -1)
        return {name: self.heads[name](full[:, :, si]) for si, name in enumerate(names)}

    def forward(self, batch: Batch, mask: torch.Tensor):
        """Run the autoencoder; ``mask`` is boolean ``(B, t, s, p)``. Returns predictions by source."""
        names = batch.names
        enc = self.encodings(names, batch.timesteps)
        x = self.embed_tokens(batch) + enc
        B = x.shape[0]
        visible = x[~mask].reshape(B, -1, x.shape[-1])
        latents = self.encode(visible)
        return self.decode(latents, mask, enc, names)

    def targets(self, batch: Batch) -> Dict[str, torch.Tensor]:
        return {n: patch_target(batch.images[n], self.config.patch, self.config.norm_pix) for n in batch.names}

    def sample_losses(self, batch: Batch, mask: torch.Tensor):
        """Per-sample loss ``(B,)``: masked MSE per source, averaged with equal weight over sources.

        Sources with no masked token in a sample are left out of that sample's average.
        """
        preds = self.forward(batch, mask)
        targets = self.targets(batch)
        per_source = []
        present = []
        for si, name in enumerate(batch.names):
            m = mask[:, :, si]  # (B, t, p)
            err = ((preds[name] - targets[name]) ** 2).mean(dim=-1)  # (B, t, p)
            count = m.sum(dim=(1, 2))
            total = torch.where(m, err, torch.zeros_like(err)).sum(dim=(1, 2))
            per_source.append(total / count.clamp(min=1))
            present.append(count > 0)
        per_source = torch.stack(per_source, dim=1)
        present = torch.stack(present, dim=1)
        n_present = present.sum(dim=1)
        if bool((n_present == 0).any()):
            raise ValueError("zero masked positions")
        losses = torch.where(present, per_source, torch.zeros_like(per_source)).sum(dim=1) / n_present
        return losses, preds

    def loss(self, batch: Batch, mask: torch.Tensor):
        losses, preds = self.sample_losses(batch, mask)
        return losses.mean(), preds


# -- batch construction ------------------------------------------------------------------

def build_batch(regions: Sequence[Region], names: Sequence[str], stats: Optional[Mapping[str, BandStats]],
                image_size: int = 224, dtype=torch.float32, t: Optional[int] = None,
                dropout_prob: float = 0.0, rng: Optional[np.random.Generator] = None,
                cache: Optional[dict] = None) -> Batch:
    """Stack regions into a :class:`Batch`; every source is cut to the common timestep count.

    With ``dropout_prob > 0`` each sample's timestamps (all sources together) are
    zeroed with that probability, one draw per sample.
    """
    if not regions:
        raise ValueError("empty batch")
    names = list(names)
    if t is None:
        t = min(r.sources[n].t for r in regions for n in names)
    images = {n: [] for n in names}
    stamps = {n: [] for n in names}
    for r in regions:
        for n in names:
            if n not in r.sources:
                raise KeyError(f"region {r.region_id} has no source {n!r}")
        idx = {n: time_indices(r.sources[n].timestamps[:t]) for n in names}
        if dropout_prob > 0:
            zero = (rng if rng is not None else np.random.default_rng()).random() < dropout_prob
            if zero:
                idx = {n: torch.zeros_like(v) for n, v in idx.items()}
        for n in names:
            key = (r.region_id, n, image_size)
            img = cache.get(key) if cache is not None else None
            if img is None:
                img = prepare_source(r.sources[n], None if stats is None else stats[n], image_size, dtype=torch.float32)
                if cache is not None:
                    cache[key] = img
            images[n].append(img[:t].to(dtype))
            stamps[n].append(idx[n])
    return Batch({n: torch.stack(v) for n, v in images.items()}, {n: torch.stack(v) for n, v in stamps.items()})


def sample_masks(scheme: str, ratio: float, B: int, t: int, s: int, p: int, rng) -> torch.Tensor:
    """Independent masks for ``B`` samples, stacked as ``(B, t, s, p)``."""
    return torch.stack([make_mask(scheme, t, s, p, ratio, rng).to_tensor() for _ in range(B)])


def forward_loss(model: EarthMAE, regions: Sequence[Region], scheme: str, ratio: float,
                 rng: np.random.Generator, stats: Optional[Mapping[str, BandStats]] = None,
                 names: Optional[Sequence[str]] = None, dropout_prob: float = 0.0):
    """Tokenize, mask, encode, decode and score a list of regions. Returns ``(loss, predictions)``."""
    names = list(names) if names is not None else [n for n in model.source_bands if n in regions[0].sources]
    batch = build_batch(regions, names, stats, model.config.image_size, model.dtype,
                        dropout_prob=dropout_prob, rng=rng)
    mask = sample_masks(scheme, ratio, batch.size, batch.t, len(names), model.config.num_patches, rng)
    return model.loss(batch, mask)
