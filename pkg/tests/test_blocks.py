import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bsattn.blocks import (
    BlockSpec,
    block_token_indices,
    flatten_index,
    pool_blocks,
    unflatten_index,
    unit_tokens,
    window_token_offsets,
)
from bsattn.errors import ConfigError, InvalidShape


def test_flatten_examples():
    assert flatten_index(0, 0, 0, 4, 5) == 0
    assert flatten_index(1, 2, 3, 4, 5) == 33


@pytest.mark.parametrize("grid", [(1, 1, 1), (2, 3, 5), (4, 8, 8), (16, 16, 16)])
def test_flatten_unflatten_bijection_exhaustive(grid):
    T, H, W = grid
    seen = []
    for t, h, w in itertools.product(range(T), range(H), range(W)):
        n = flatten_index(t, h, w, H, W, T)
        assert unflatten_index(n, H, W, T) == (t, h, w)
        seen.append(n)
    assert seen == list(range(T * H * W))


def test_flatten_out_of_range():
    with pytest.raises(IndexError):
        flatten_index(0, 4, 0, 4, 5)
    with pytest.raises(IndexError):
        flatten_index(2, 0, 0, 4, 5, T=2)
    with pytest.raises(IndexError):
        unflatten_index(40, 4, 5, T=2)


def test_single_block_covers_everything():
    spec = BlockSpec((2, 4, 4), (2, 4, 4))
    assert spec.N == 1
    assert block_token_indices(spec, 0).tolist() == list(range(32))


def test_block_examples():
    spec = BlockSpec((2, 2, 2), (1, 2, 2))
    assert block_token_indices(spec, 0).tolist() == [0, 1, 2, 3]
    assert block_token_indices(spec, 1).tolist() == [4, 5, 6, 7]
    with pytest.raises(IndexError):
        block_token_indices(spec, 2)


def _brute_blocks(spec):
    (T, H, W), (ct, ch, cw) = spec.grid, spec.cuboid
    nt, nh, nw = spec.counts
    out = []
    for bt, bh, bw in itertools.product(range(nt), range(nh), range(nw)):
        toks = [flatten_index(bt * ct + i, bh * ch + j, bw * cw + k, H, W)
                for i, j, k in itertools.product(range(ct), range(ch), range(cw))]
        out.append(sorted(toks))
    return out


@pytest.mark.parametrize("grid,cuboid", [((4, 4, 4), (2, 2, 2)), ((8, 16, 16), (4, 4, 4)),
                                         ((32, 32, 32), (4, 4, 4)), ((6, 4, 10), (3, 2, 5))])
def test_blocks_partition_exhaustively(grid, cuboid):
    spec = BlockSpec(grid, cuboid)
    assert spec.block_tokens.tolist() == _brute_blocks(spec)
    flat = np.sort(spec.block_tokens.ravel())
    assert np.array_equal(flat, np.arange(spec.L))
    assert np.all(np.diff(spec.block_tokens, axis=1) > 0)
    for b in range(spec.N):
        assert np.all(spec.token_block[spec.block_tokens[b]] == b)


def test_divisibility_names_axis():
    with pytest.raises(ConfigError, match="axis h"):
        BlockSpec((4, 6, 8), (4, 4, 4))
    with pytest.raises(ConfigError, match="axis w"):
        BlockSpec((4, 4, 8), (4, 4, 4), (2, 2, 3))
    with pytest.raises(ConfigError):
        BlockSpec((4, 4, 4), (0, 4, 4))


def test_pool_constant_and_hand_mean():
    spec = BlockSpec((4, 4, 4), (2, 2, 2))
    X = np.full((64, 3), 2.5, np.float32)
    assert np.all(pool_blocks(X, spec) == 2.5)
    spec2 = BlockSpec((1, 1, 2), (1, 1, 2))
    np.testing.assert_array_equal(pool_blocks(np.array([[1, 0], [3, 2]], np.float32), spec2), [[2, 1]])


def test_pool_matches_loop_mean(rng):
    spec = BlockSpec((4, 8, 8), (2, 4, 4))
    X = rng.standard_normal((spec.L, 5)).astype(np.float32)
    ref = np.array([[sum(float(X[t, c]) for t in block) / spec.B for c in range(5)]
                    for block in _brute_blocks(spec)])
    np.testing.assert_allclose(pool_blocks(X, spec), ref, rtol=0, atol=1e-12)


@given(st.sampled_from([0.5, 2.0, 4.0, -1.0, 0.25]))
def test_pool_linear_in_scale(alpha):
    spec = BlockSpec((4, 4, 4), (2, 2, 2))
    X = np.random.default_rng(0).standard_normal((64, 4)).astype(np.float32)
    np.testing.assert_array_equal(pool_blocks(X * np.float32(alpha), spec), alpha * pool_blocks(X, spec))


def test_pool_shape_mismatch():
    with pytest.raises(InvalidShape):
        pool_blocks(np.zeros((10, 2)), BlockSpec((2, 2, 2), (2, 2, 2)))


def test_windows_large_video_grid():
    spec = BlockSpec((4, 4, 4), (4, 4, 4), (2, 2, 2))
    win = window_token_offsets(spec)
    assert win.shape == (8, 8)
    assert np.array_equal(np.sort(win.ravel()), np.arange(64))
    # first window: local coords (0..1, 0..1, 0..1)
    assert win[0].tolist() == [0, 1, 4, 5, 16, 17, 20, 21]


def test_degenerate_window_is_whole_block():
    spec = BlockSpec((4, 4, 4), (2, 2, 2), (2, 2, 2))
    assert window_token_offsets(spec).tolist() == [list(range(8))]


def test_window_unset_or_not_dividing():
    with pytest.raises(ConfigError):
        window_token_offsets(BlockSpec((4, 4, 4), (4, 4, 4)))
    with pytest.raises(ConfigError):
        BlockSpec((4, 4, 4), (4, 4, 4), (3, 2, 2))


def test_windowed_units_partition_tokens():
    spec = BlockSpec((8, 8, 8), (4, 4, 4), (2, 2, 2))
    units, dims = unit_tokens(spec, True)
    assert dims == (2, 2, 2) and units.shape == (64, 8)
    assert np.array_equal(np.sort(units.ravel()), np.arange(spec.L))
    # every window lies in a single block
    assert np.all(spec.token_block[units] == spec.token_block[units[:, :1]])
