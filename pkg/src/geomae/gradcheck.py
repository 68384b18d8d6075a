"""Central finite-difference check of autograd gradients on the full model."""
from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .masking import make_mask
from .model import Batch, EarthMAE, ModelConfig

SMALL_CONFIG = dict(pos_dim=8, width=136, encoder_depth=1, decoder_width=16, decoder_depth=1,
                    heads=4, decoder_heads=4, mlp_ratio=2.0, patch=4, image_size=16)


def pick_coordinates(params: Sequence[Tuple[str, torch.Tensor]], n: int,
                     rng: np.random.Generator) -> List[Tuple[str, int]]:
    """At least one coordinate from every tensor, the rest uniformly over all scalars."""
    picks = [(name, int(rng.integers(p.numel()))) for name, p in params]
    sizes = np.array([p.numel() for _, p in params], dtype=np.float64)
    owners = rng.choice(len(params), size=max(0, n - len(picks)), p=sizes / sizes.sum())
    for k in owners:
        name, p = params[k]
        picks.append((name, int(rng.integers(p.numel()))))
    return picks


def grad_check(model: EarthMAE, loss_fn: Callable[[EarthMAE], torch.Tensor], eps: float = 1e-4,
               n_params: int = 200, rng: Optional[np.random.Generator] = None,
               return_details: bool = False):
    """Max relative error between autograd and central differences over sampled parameters.

    ``loss_fn(model)`` must be deterministic.  The relative error of one
    coordinate is ``|ga - gn| / max(|ga|, |gn|, 1e-8)``.
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    if model.dtype != torch.float64:
        raise ValueError("grad_check needs the model in float64 (call model.double())")
    rng = rng if rng is not None else np.random.default_rng(0)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss_fn(model).backward()
    analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in named}
    model.zero_grad(set_to_none=True)

    lookup = dict(named)
    details = []
    worst = 0.0
    with torch.no_grad():
        for name, flat_idx in pick_coordinates(named, n_params, rng):
            p = lookup[name]
            view = p.view(-1)
            orig = view[flat_idx].item()
            view[flat_idx] = orig + eps
            f_plus = loss_fn(model).item()
            view[flat_idx] = orig - eps
            f_minus = loss_fn(model).item()
            view[flat_idx] = orig
            gn = (f_plus - f_minus) / (2 * eps)
            ga = analytic[name].view(-1)[flat_idx].item()
            rel = abs(ga - gn) / max(abs(ga), abs(gn), 1e-8)
            worst = max(worst, rel)
            details.append((name, flat_idx, ga, gn, rel))
    if return_details:
        return worst, details
    return worst


def toy_problem(config: ModelConfig, sources: Dict[str, int], t: int = 2, batch: int = 2,
                scheme: str = "tube", ratio: float = 0.5, seed: int = 0):
    """A float64 model, a fixed random batch, and a fixed mask for gradient checks."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = EarthMAE(config, sources).double()
        # perturb away from the symmetric init so no gradient is trivially zero
        for p in model.parameters():
            p.data.add_(0.05 * torch.randn_like(p))
        images = {n: torch.randn(batch, t, c, config.image_size, config.image_size, dtype=torch.float64)
                  for n, c in sources.items()}
    gen = np.random.default_rng(seed)
    stamps = {n: torch.stack([torch.tensor([[int(gen.integers(0, 7)), int(gen.integers(0, 13)),
                                             int(gen.integers(0, 32)), int(gen.integers(0, 25))]
                                            for _ in range(t)]) for _ in range(batch)]) for n in sources}
    data = Batch(images, stamps)
    mask = torch.stack([make_mask(scheme, t, len(sources), config.num_patches, ratio, gen).to_tensor()
                        for _ in range(batch)])
    return model, data, mask


def check_model(config: ModelConfig, sources: Dict[str, int], eps: float = 1e-4, n_params: int = 200,
                seed: int = 0, **toy) -> float:
    model, data, mask = toy_problem(config, sources, seed=seed, **toy)
    return grad_check(model, lambda m: m.loss(data, mask)[0], eps=eps, n_params=n_params,
                      rng=np.random.default_rng(seed))
