import time

import numpy as np
import pytest
import torch

from geomae.gradcheck import SMALL_CONFIG, check_model, grad_check, toy_problem
from geomae.model import Batch, EarthMAE, ModelConfig, forward_loss, masked_mse, patch_target
from geomae.masking import make_mask
from geomae.synthgen import SynthConfig, synth_region
from geomae.tokenizer import compute_band_stats

SMALL = ModelConfig(**SMALL_CONFIG)


def small_batch(sources, B=2, t=2, dtype=torch.float32, seed=0):
    g = torch.Generator().manual_seed(seed)
    images = {n: torch.randn(B, t, c, SMALL.image_size, SMALL.image_size, generator=g, dtype=dtype)
              for n, c in sources.items()}
    stamps = {n: torch.tensor([[[3, 6, 15, 13]] * t] * B) for n in sources}
    return Batch(images, stamps)


def masks(B, t, s, p, scheme="tube", ratio=0.75, seed=0):
    rng = np.random.default_rng(seed)
    return torch.stack([make_mask(scheme, t, s, p, ratio, rng).to_tensor() for _ in range(B)])


def test_config_invariants():
    assert ModelConfig().width == 256 and ModelConfig().num_patches == 196
    with pytest.raises(ValueError):
        ModelConfig(width=200)
    with pytest.raises(ValueError):
        ModelConfig(heads=3)


def test_encode_shapes_and_finiteness():
    model = EarthMAE(ModelConfig(), {"sentinel2": 13})
    assert model.encode(torch.randn(1, 98, 256)).shape == (1, 98, 256)
    with pytest.raises(ValueError):
        model.encode(torch.full((1, 2, 256), float("nan")))
    with pytest.raises(ValueError, match="no visible"):
        model.encode(torch.zeros(1, 0, 256))


def test_encode_permutation_equivariance():
    torch.manual_seed(0)
    model = EarthMAE(SMALL, {"a": 1})
    x = torch.randn(1, 5, SMALL.width)
    perm = torch.tensor([0, 3, 2, 1, 4])
    with torch.no_grad():
        assert torch.allclose(model.encode(x)[:, perm], model.encode(x[:, perm]), atol=1e-6)


def test_zero_residual_branches_reduce_to_norm():
    model = EarthMAE(SMALL, {"a": 1})
    for blk in model.blocks:
        for lin in (blk.attn.proj, blk.fc2):
            torch.nn.init.zeros_(lin.weight)
            torch.nn.init.zeros_(lin.bias)
    x = torch.randn(1, 6, SMALL.width)
    with torch.no_grad():
        assert torch.allclose(model.encode(x), model.norm(x), atol=1e-6)


def test_decode_shapes_per_source():
    model = EarthMAE(ModelConfig(), {"sentinel2": 13, "sentinel1": 2})
    batch = Batch({"sentinel2": torch.randn(1, 2, 13, 224, 224), "sentinel1": torch.randn(1, 2, 2, 224, 224)},
                  {"sentinel2": torch.zeros(1, 2, 4, dtype=torch.long), "sentinel1": torch.zeros(1, 2, 4, dtype=torch.long)})
    with torch.no_grad():
        preds = model(batch, masks(1, 2, 2, 196))
    assert preds["sentinel2"].shape == (1, 2, 196, 3328)
    assert preds["sentinel1"].shape == (1, 2, 196, 512)


def test_decode_with_nothing_masked():
    model = EarthMAE(SMALL, {"a": 2})
    batch = small_batch({"a": 2}, B=1)
    with torch.no_grad():
        preds = model(batch, torch.zeros(1, 2, 1, SMALL.num_patches, dtype=torch.bool))
    assert preds["a"].shape == (1, 2, SMALL.num_patches, 2 * 16) and torch.isfinite(preds["a"]).all()


def test_decode_rejects_inconsistent_mask():
    model = EarthMAE(SMALL, {"a": 1})
    m = masks(1, 1, 1, SMALL.num_patches)
    enc = torch.zeros(1, 1, 1, SMALL.num_patches, SMALL.width)
    with pytest.raises(ValueError, match="inconsistent mask"):
        model.decode(torch.zeros(1, 3, SMALL.width), m, enc, ["a"])


def test_patch_target_closed_forms():
    const = torch.full((1, 16, 16), 4.0)
    assert torch.count_nonzero(patch_target(const, 16)) == 0
    img = torch.zeros(1, 16, 16)
    img[:, :, 8:] = 1.0
    tgt = patch_target(img, 16)
    expected = 0.5 / (0.25 + 1e-6) ** 0.5
    assert torch.allclose(tgt.abs(), torch.full_like(tgt, expected))
    x = torch.randn(2, 32, 32)
    from geomae.tokenizer import patchify
    assert torch.equal(patch_target(x, 16, norm_pix=False), patchify(x, 16))


def test_patch_target_normalization():
    tgt = patch_target(torch.randn(3, 13, 224, 224, dtype=torch.float64), 16)
    assert tgt.mean(dim=-1).abs().max() < 1e-6
    assert (tgt.var(dim=-1, unbiased=False) - 1).abs().max() < 1e-3


def test_masked_mse_examples():
    pred = torch.zeros(1, 3, 4)
    target = torch.zeros(1, 3, 4)
    m = torch.tensor([[True, False, False]])
    assert masked_mse(pred, target, m) == 0
    pred[0, 0] = 0.5
    assert masked_mse(pred, target, m) == pytest.approx(0.25)
    pred[0, 1:] = 9.0
    assert masked_mse(pred, target, m) == pytest.approx(0.25)
    with pytest.raises(ValueError, match="zero masked positions"):
        masked_mse(pred, target, torch.zeros(1, 3, dtype=torch.bool))


def test_loss_locality():
    torch.manual_seed(1)
    model = EarthMAE(SMALL, {"a": 2, "b": 1}).double()
    batch = small_batch({"a": 2, "b": 1}, dtype=torch.float64)
    m = masks(2, 2, 2, SMALL.num_patches, "combined")
    preds = model(batch, m)
    targets = model.targets(batch)
    leaf = {n: p.detach().clone().requires_grad_(True) for n, p in preds.items()}

    def loss_of(pr):
        total = 0
        for si, n in enumerate(["a", "b"]):
            err = ((pr[n] - targets[n]) ** 2).mean(-1)
            mm = m[:, :, si]
            total = total + (err * mm).sum((1, 2)) / mm.sum((1, 2))
        return (total / 2).mean()

    base = loss_of(leaf)
    base.backward()
    for si, n in enumerate(["a", "b"]):
        assert torch.count_nonzero(leaf[n].grad[~m[:, :, si]]) == 0
    bumped = {n: leaf[n].detach().clone() for n in leaf}
    for si, n in enumerate(["a", "b"]):
        bumped[n][~m[:, :, si]] += 123.0
    assert loss_of(bumped).item() == base.item()
    with torch.no_grad():
        assert model.loss(batch, m)[0].item() == pytest.approx(base.item(), rel=1e-12)


def test_forward_loss_on_regions():
    cfg = SynthConfig(seed=0, profiles=["sentinel1", "neon-elev"],
                      revisits={"sentinel1": (3, 3), "neon-elev": (1, 1)})
    regions = [synth_region(cfg, f"r{i}") for i in range(2)]
    stats = {n: compute_band_stats([r.sources[n] for r in regions]) for n in ("sentinel1", "neon-elev")}
    model = EarthMAE(ModelConfig(encoder_depth=1, decoder_depth=1), {"sentinel1": 2, "neon-elev": 1})
    with torch.no_grad():
        loss, preds = forward_loss(model, regions, "tube", 0.9, np.random.default_rng(0), stats,
                                   dropout_prob=0.1)
    assert torch.isfinite(loss) and loss >= 0
    assert preds["sentinel1"].shape == (2, 1, 196, 512)


def test_encoder_cost_scales_with_visible_tokens():
    model = EarthMAE(ModelConfig(), {"sentinel2": 13})
    x_full, x_vis = torch.randn(2, 4 * 196, 256), torch.randn(2, 4 * 20, 256)

    def best(x):
        times = []
        with torch.no_grad():
            for _ in range(3):
                t0 = time.perf_counter()
                model.encode(x)
                times.append(time.perf_counter() - t0)
        return min(times)

    assert best(x_vis) < best(x_full)


def test_grad_check_rejects_bad_eps_and_precision():
    model, data, m = toy_problem(SMALL, {"a": 1})
    with pytest.raises(ValueError):
        grad_check(model, lambda mm: mm.loss(data, m)[0], eps=0.0)
    with pytest.raises(ValueError):
        grad_check(EarthMAE(SMALL, {"a": 1}), lambda mm: mm.loss(data, m)[0])


def test_grad_check_linear_toy():
    cfg = ModelConfig(**dict(SMALL_CONFIG, encoder_depth=0, decoder_depth=0))
    assert check_model(cfg, {"sentinel2": 3}, seed=0) < 1e-7


def test_grad_check_covers_every_tensor():
    model, data, m = toy_problem(SMALL, {"a": 1, "b": 2})
    err, details = grad_check(model, lambda mm: mm.loss(data, m)[0], n_params=200, return_details=True)
    names = {d[0] for d in details}
    assert names == {n for n, _ in model.named_parameters()}
    assert any(n.startswith("time_embed.") for n in names) and any(n.startswith("heads.") for n in names)
    assert len(details) >= 200 and err < 1e-4
