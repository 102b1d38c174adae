import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmdrestore.core import from_levels, make_rng, quantize, save_image, to_levels
from mmdrestore.datasets import (
    AddNoise,
    BlockQuant,
    BoxBlur,
    addnoise_entropy_bits,
    degrade,
    load_dataset,
    make_toy_dataset,
    parse_kind,
    save_dataset,
    split_dataset,
)


def image(seed, size=16, c=1):
    return from_levels(make_rng(seed).integers(0, 256, (size, size, c)))


def dct_matrix(n):
    """Orthonormal DCT-II basis written out from its cosine formula."""
    k, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    d = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * math.sqrt(2.0 / n)
    d[0] /= math.sqrt(2.0)
    return d


def test_dct_matrix_is_orthonormal():
    d = dct_matrix(4)
    assert np.allclose(d @ d.T, np.eye(4), atol=1e-15)


@pytest.mark.parametrize("block,quality", [(4, 50), (8, 10), (4, 90)])
def test_blockquant_matches_matrix_reference(block, quality):
    img = image(1)
    kind = BlockQuant(block, quality)
    d = dct_matrix(block)
    got = degrade(kind, img)
    checked = 0
    for bi in range(0, 16, block):
        for bj in range(0, 16, block):
            scaled = d @ img[bi : bi + block, bj : bj + block, 0] @ d.T / kind.step
            # a coefficient sitting on a rounding tie may go either way in floating point
            if np.any(np.abs(np.abs(scaled - np.floor(scaled)) - 0.5) < 1e-9):
                continue
            ref = d.T @ (np.round(scaled) * kind.step) @ d
            assert np.array_equal(got[bi : bi + block, bj : bj + block, 0], quantize(ref))
            checked += 1
    assert checked >= (16 // block) ** 2 // 2


def test_blockquant_top_quality_is_near_identity():
    img = image(2)
    out = degrade(BlockQuant(4, 100), img)
    assert np.max(np.abs(to_levels(out) - to_levels(img))) <= 1


def test_addnoise_zero_sigma_is_quantization():
    img = make_rng(3).random((8, 8, 1))
    assert np.array_equal(degrade(AddNoise(0.0), img, make_rng(0)), quantize(img))
    assert np.array_equal(degrade(AddNoise(0.0, quantized=False), img, make_rng(0)), quantize(img))


def test_outputs_on_level_grid():
    img = make_rng(4).random((16, 16, 3))
    for kind in (BlockQuant(), AddNoise(5.0), AddNoise(5.0, False), BoxBlur(2)):
        out = degrade(kind, img, make_rng(1))
        assert np.array_equal(out, quantize(out)) and out.shape == img.shape


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([BlockQuant(4, 50), BlockQuant(8, 20), AddNoise(3.0), BoxBlur(1), BoxBlur(2)]),
    st.integers(0, 15),
    st.integers(0, 15),
    st.integers(0, 1000),
)
def test_locality(kind, i, j, seed):
    img = image(seed)
    bumped = img.copy()
    bumped[i, j] = 1.0 - bumped[i, j]
    a = degrade(kind, img, make_rng(seed))
    b = degrade(kind, bumped, make_rng(seed))
    ys, xs = kind.footprint(i, j, img.shape)
    mask = np.ones(img.shape[:2], bool)
    mask[ys, xs] = False
    assert np.array_equal(a[mask], b[mask])


def test_entropy_without_clipping_is_discrete_gaussian_entropy():
    sigma = 2.0
    k = np.arange(-16, 17)
    p = np.array([math.erf((x + 0.5) / (sigma * math.sqrt(2))) - math.erf((x - 0.5) / (sigma * math.sqrt(2))) for x in k]) / 2
    p = p[p > 0]
    h = -float(np.sum(p * np.log2(p)))
    assert addnoise_entropy_bits(np.full((2, 2, 1), 0.5), sigma) == pytest.approx(h, rel=1e-9)
    assert addnoise_entropy_bits(np.full((2, 2, 1), 0.5), 0.0) == 0.0


def test_entropy_with_clipping_matches_simulation():
    cond = np.zeros((200, 200, 1))
    sigma = 3.0
    out = to_levels(degrade(AddNoise(sigma), cond, make_rng(5)))
    freq = np.bincount(out.ravel(), minlength=256) / out.size
    freq = freq[freq > 0]
    empirical = -float(np.sum(freq * np.log2(freq)))
    assert addnoise_entropy_bits(cond, sigma) == pytest.approx(empirical, abs=0.01)


def test_parse_kind():
    assert parse_kind("blockquant:8:75") == BlockQuant(8, 75.0)
    assert parse_kind("addnoise:2.5") == AddNoise(2.5, True)
    assert parse_kind("addnoise:2:0") == AddNoise(2.0, False)
    assert parse_kind("boxblur") == BoxBlur(1)
    assert parse_kind(BlockQuant(4, 50).spec()) == BlockQuant(4, 50)
    for bad in ("jpeg:5", "blockquant:x", "blockquant:4:0"):
        with pytest.raises(ValueError):
            parse_kind(bad)
    with pytest.raises(ValueError, match="divide"):
        degrade(BlockQuant(5), image(0))


def test_prior_dataset_round_trip(tmp_path, prior_nets):
    mapping, synthesis = prior_nets
    pairs = make_toy_dataset(AddNoise(2.0), 5, make_rng(6), mapping, synthesis)
    again = make_toy_dataset(AddNoise(2.0), 5, make_rng(6), mapping, synthesis)
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(pairs, again))
    save_dataset(tmp_path, pairs, {"kind": "addnoise:2:1"})
    loaded = load_dataset(tmp_path)
    assert all(np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) for a, b in zip(pairs, loaded))


def test_directory_source(tmp_path):
    for i in range(2):
        save_image(tmp_path / f"im{i}.pgm", image(i, 8))
    pairs = make_toy_dataset(BoxBlur(1), 3, make_rng(0), directory=tmp_path)
    assert len(pairs) == 3 and np.array_equal(pairs[2][0], image(0, 8))
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError, match="no .pgm"):
        make_toy_dataset(BoxBlur(1), 3, make_rng(0), directory=empty)


def test_split_is_deterministic_partition():
    items = list(range(20))
    train, test = split_dataset(items, 0.25, 3)
    assert sorted(train + test) == items and len(test) == 5
    assert split_dataset(items, 0.25, 3) == (train, test)
