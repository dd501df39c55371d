import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stma.embedding import (
    EmbedConfig,
    Frame,
    StemWeights,
    conv_stem,
    embed,
    patchify,
    sinusoidal_table,
    unpatchify,
)
from stma.exceptions import ContractError, DimensionError
from stma.oracles import direct_conv2d
from stma.tensor import Tensor


def random_frame(rng, h, w):
    return Frame(rng.uniform(size=(3, h, w)))


def test_single_patch_is_the_flattened_frame(rng):
    f = random_frame(rng, 16, 16)
    rows = patchify(f, 16).numpy()
    assert rows.shape == (1, 768)
    assert np.array_equal(rows[0], f.pixels.transpose(1, 2, 0).reshape(-1))


def test_row_zero_is_the_top_left_block(rng):
    f = random_frame(rng, 32, 32)
    rows = patchify(f, 16).numpy()
    assert rows.shape == (4, 768)
    assert np.array_equal(rows[0], f.pixels[:, :16, :16].transpose(1, 2, 0).reshape(-1))
    # row-major over the patch grid: row 1 is the top-right block
    assert np.array_equal(rows[1], f.pixels[:, :16, 16:].transpose(1, 2, 0).reshape(-1))


def test_patchify_rejects_indivisible_frames(rng):
    with pytest.raises(ContractError):
        patchify(random_frame(rng, 20, 16), 16)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4, 8]), st.integers(0, 2**32 - 1))
def test_patchify_round_trip(gh, gw, P, seed):
    f = random_frame(np.random.default_rng(seed), gh * P, gw * P)
    rows = patchify(f, P)
    assert rows.shape == (gh * gw, 3 * P * P)
    assert np.array_equal(unpatchify(rows, gh * P, gw * P, P).pixels, f.pixels)


def test_zero_projection_gives_positional_table(rng):
    pos = sinusoidal_table(4, 8)
    cfg = EmbedConfig(16, Tensor(np.zeros((768, 8))), Tensor(pos))
    fm = embed(random_frame(rng, 32, 32), cfg)
    assert np.array_equal(fm.tokens.numpy(), pos)
    assert (fm.grid_h, fm.grid_w) == (2, 2)


def test_selector_projection_reproduces_patch_values(rng):
    f = random_frame(rng, 32, 32)
    cfg = EmbedConfig(16, Tensor(np.eye(768)), Tensor(np.zeros((4, 768))))
    assert np.array_equal(embed(f, cfg).tokens.numpy(), patchify(f, 16).numpy())


def test_embed_geometry_mismatch(rng):
    cfg = EmbedConfig.create(32, 32, 16, 8, rng)
    with pytest.raises(DimensionError):
        embed(random_frame(rng, 48, 32), cfg)


def test_token_count(rng):
    for h, w in [(16, 16), (32, 64), (64, 64), (48, 80)]:
        cfg = EmbedConfig.create(h, w, 16, 8, rng)
        assert embed(random_frame(rng, h, w), cfg).n_tokens == (h // 16) * (w // 16)


def test_embed_is_affine_in_pixels(rng):
    cfg = EmbedConfig.create(64, 64, 16, 64, rng)
    f1, f2 = random_frame(rng, 64, 64), random_frame(rng, 64, 64)
    pos = cfg.positional.numpy()
    for a in (0.0, 0.3, 1.0, 1.7):
        mix = embed(Frame(a * f1.pixels + (1 - a) * f2.pixels), cfg).tokens.numpy() - pos
        expected = a * (embed(f1, cfg).tokens.numpy() - pos) + (1 - a) * (embed(f2, cfg).tokens.numpy() - pos)
        assert np.abs(mix - expected).max() < 1e-10


def test_positional_rows_are_distinct():
    table = sinusoidal_table(1024, 64)
    sq = (table * table).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2 * table @ table.T
    np.fill_diagonal(d2, np.inf)
    assert d2.min() > 0


def test_sinusoid_convention():
    t = sinusoidal_table(3, 4)
    pos = np.arange(3)[:, None]
    freq = 1.0 / 10000 ** (np.arange(0, 4, 2) / 4)
    assert np.allclose(t[:, 0::2], np.sin(pos * freq), atol=1e-15)
    assert np.allclose(t[:, 1::2], np.cos(pos * freq), atol=1e-15)


def test_stem_zero_frame_zero_skips():
    skips = conv_stem(Frame(np.zeros((3, 64, 64))), StemWeights.create(rng=0))
    assert not skips.quarter.numpy().any() and not skips.eighth.numpy().any()


def test_stem_shapes():
    skips = conv_stem(Frame(np.full((3, 64, 64), 0.5)), StemWeights.create(32, 32, rng=0))
    assert skips.quarter_grid().shape == (32, 16, 16)
    assert skips.eighth_grid().shape == (32, 8, 8)


def test_stem_rejects_indivisible():
    with pytest.raises(ContractError):
        conv_stem(Frame(np.zeros((3, 20, 16))), StemWeights.create(rng=0))


def test_stem_matches_direct_convolution(rng):
    w = StemWeights.create(4, 5, rng=rng)
    w = StemWeights(w.w1, rng.normal(size=4), w.w2, rng.normal(size=4), w.w3, rng.normal(size=5))
    pixels = np.zeros((3, 16, 16))
    pixels[1, 7, 9] = 1.0  # impulse
    pixels += 0.1 * rng.uniform(size=pixels.shape)
    skips = conv_stem(Frame(pixels), w)
    x = np.maximum(direct_conv2d(pixels, w.w1, w.b1, 2, 1), 0)
    quarter = direct_conv2d(x, w.w2, w.b2, 2, 1)
    eighth = direct_conv2d(np.maximum(quarter, 0), w.w3, w.b3, 2, 1)
    assert np.abs(skips.quarter_grid() - quarter).max() < 1e-12
    assert np.abs(skips.eighth_grid() - eighth).max() < 1e-12


def test_frame_validation():
    with pytest.raises(DimensionError):
        Frame(np.zeros((4, 16, 16)))
