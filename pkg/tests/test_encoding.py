import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from geomae.encoding import (SourceEmbedding, TimeEmbedding, compose_encoding, embed_source, embed_time,
                                positional_grid, time_index, time_indices, timestep_dropout)
from geomae.region_store import Timestamp


def test_positional_grid_shape_and_purity():
    a = positional_grid(128, 14)
    assert a.shape == (196, 128)
    assert np.array_equal(a, positional_grid(128, 14))
    assert np.all(np.abs(a) <= 1.0)
    with pytest.raises(ValueError):
        positional_grid(130)


def test_positional_grid_origin_and_layout():
    g = positional_grid(128, 14)
    # each half (row code, col code) is [sin x 32, cos x 32]
    assert np.all(g[0, [0, 32, 64, 96]] == [0.0, 1.0, 0.0, 1.0])
    r, c = 3, 5
    row = g[r * 14 + c]
    assert row[0] == pytest.approx(math.sin(r)) and row[32] == pytest.approx(math.cos(r))
    assert row[64] == pytest.approx(math.sin(c)) and row[96] == pytest.approx(math.cos(c))
    assert row[1] == pytest.approx(math.sin(r * 10000 ** (-1 / 32)))


def test_time_index_examples():
    assert time_index((2019, 6, 15, 12)) == (3, 6, 15, 13)
    assert time_index(Timestamp(2019, 6, 15, 12)) == (3, 6, 15, 13)
    assert time_index((0, 0, 0, None)) == (0, 0, 0, 0)
    assert time_index((2031, 13, 40, 99)) == (0, 0, 0, 0)
    assert time_index((2017, 1, 1, 0)) == (1, 1, 1, 1)
    assert time_index((2022, 12, 31, 23)) == (6, 12, 31, 24)


@given(st.integers(-5000, 5000), st.integers(-50, 50), st.integers(-50, 50),
       st.one_of(st.none(), st.integers(-50, 50)))
def test_time_index_always_in_vocab(y, m, d, h):
    iy, im, iday, ih = time_index((y, m, d, h))
    assert 0 <= iy < 7 and 0 <= im < 13 and 0 <= iday < 32 and 0 <= ih < 25


def test_time_tables():
    tables = TimeEmbedding()
    assert [t.num_embeddings for t in (tables.year, tables.month, tables.day, tables.hour)] == [7, 13, 32, 25]
    idx = time_indices([Timestamp(2019, 6, 15, 12), Timestamp(2019, 6, 15, 12), Timestamp()])
    out = embed_time(idx, tables)
    assert out.shape == (3, 64)
    assert torch.equal(out[0], out[1])
    zero_row = torch.cat([tables.year.weight[0], tables.month.weight[0], tables.day.weight[0], tables.hour.weight[0]])
    assert torch.equal(out[2], zero_row)
    with pytest.raises(IndexError):
        tables(torch.tensor([[7, 0, 0, 0]]))


def test_unknown_path_equals_dropout_path():
    tables = TimeEmbedding()
    idx = time_indices([Timestamp(2018, 3, 4, 5), Timestamp(2020, 7, 8, 9)])
    dropped = timestep_dropout(idx, 1.0, np.random.default_rng(0))
    unknown = time_indices([Timestamp(), Timestamp()])
    assert torch.equal(embed_time(dropped, tables), embed_time(unknown, tables))


def test_timestep_dropout_rates():
    idx = time_indices([Timestamp(2018, 3, 4, 5)])
    assert torch.equal(timestep_dropout(idx, 0.0, np.random.default_rng(0)), idx)
    assert torch.count_nonzero(timestep_dropout(idx, 1.0, np.random.default_rng(0))) == 0
    rng = np.random.default_rng(42)
    zeroed = sum(int(torch.count_nonzero(timestep_dropout(idx, 0.1, rng)) == 0) for _ in range(10_000))
    assert 0.09 <= zeroed / 10_000 <= 0.11
    with pytest.raises(ValueError):
        timestep_dropout(idx, 1.5)


def test_source_table():
    table = SourceEmbedding(["sentinel1", "sentinel2"])
    out = embed_source(torch.tensor([0, 1]), table)
    assert out.shape == (2, 64)
    dup = embed_source(torch.tensor([1, 1]), table)
    assert torch.equal(dup[0], dup[1])
    with pytest.raises(KeyError):
        embed_source(torch.tensor([2]), table)
    with pytest.raises(KeyError):
        table.id_of("landsat")


def test_compose_exhaustive_concat():
    gen = torch.Generator().manual_seed(0)
    pos = torch.from_numpy(positional_grid(128)).float()
    src = torch.randn(2, 64, generator=gen)
    time = torch.randn(3, 64, generator=gen)
    enc = compose_encoding(pos, src, time)
    assert enc.shape == (3, 2, 196, 256)
    for ti in range(3):
        for si in range(2):
            for pi in range(196):
                assert torch.equal(enc[ti, si, pi], torch.cat([pos[pi], src[si], time[ti]]))


def test_compose_zero_and_batched():
    assert torch.count_nonzero(compose_encoding(torch.zeros(4, 8), torch.zeros(2, 64), torch.zeros(3, 64))) == 0
    pos, src, time = torch.randn(4, 8), torch.randn(5, 2, 64), torch.randn(5, 3, 2, 64)
    enc = compose_encoding(pos, src, time)
    assert enc.shape == (5, 3, 2, 4, 136)
    assert torch.equal(enc[4, 2, 1, 3], torch.cat([pos[3], src[4, 1], time[4, 2, 1]]))
    with pytest.raises(ValueError, match="mismatch"):
        compose_encoding(pos, torch.randn(2, 64), torch.randn(3, 3, 64))


@given(st.sampled_from([4, 8, 16, 64, 128]), st.integers(1, 3), st.integers(1, 3))
def test_width_law(D, s, t):
    enc = compose_encoding(torch.from_numpy(positional_grid(D, 2)), torch.zeros(s, 64, dtype=torch.float64),
                           torch.zeros(t, 64, dtype=torch.float64))
    assert enc.shape[-1] == D + 64 + 64
