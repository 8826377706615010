import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dft_peak_bin, naive_dft
from ts2tc.errors import DataError
from ts2tc.spectrogram import Spectrogram, StftConfig, frame_count, patchify_and_mask, stft, stft_complex


def test_config_validation():
    for bad in (dict(n_fft=1), dict(hop=0), dict(n_fft=8, hop=9), dict(window_fn="tri")):
        with pytest.raises(DataError):
            StftConfig(**bad)


def test_default_grid_shape():
    spec = stft(np.random.default_rng(0).normal(size=700), StftConfig(128, 32))
    assert (spec.frames, spec.bins) == (18, 65)


def test_frame_count_formula_grid():
    for n in (128, 200, 333, 700, 1024):
        for cfg in (StftConfig(128, 32), StftConfig(64, 16), StftConfig(100, 100), StftConfig(16, 5)):
            L = cfg.n_fft - cfg.hop
            assert stft(np.ones(n), cfg).frames == (n - L) // (cfg.n_fft - L) == frame_count(n, cfg)


def test_pure_tone_bin_rect():
    t = np.arange(700) / 125
    x = np.sin(2 * np.pi * 10 * t)
    spec = stft(x, StftConfig(128, 32, "rect"))
    assert np.all(spec.grid.argmax(axis=1) == round(10 * 128 / 125))


def test_frame_content_matches_dft_oracle():
    x = np.random.default_rng(2).normal(size=300)
    cfg = StftConfig(32, 8, "hann")
    X = stft_complex(x, cfg)
    for m in (0, 5, X.shape[0] - 1):
        ref = naive_dft(x[m * 8 : m * 8 + 32] * cfg.window())[:17]
        np.testing.assert_allclose(X[m], ref, atol=1e-9)


def test_zero_signal_zero_grid():
    spec = stft(np.zeros(256))
    np.testing.assert_array_equal(spec.grid, 0.0)


def test_short_signal():
    with pytest.raises(DataError):
        stft(np.ones(100), StftConfig(128, 32))


def test_parseval_rect_nonoverlapping():
    N = 64
    x = np.random.default_rng(3).normal(size=N * 6)
    X = stft_complex(x, StftConfig(N, N, "rect"))
    w = np.full(N // 2 + 1, 2.0)
    w[0] = w[-1] = 1.0  # DC and Nyquist appear once in the full spectrum
    energy = (np.abs(X) ** 2 * w).sum() / N
    assert energy == pytest.approx((x**2).sum(), rel=1e-6)


def test_patch_counts():
    ps = patchify_and_mask(Spectrogram(np.ones((18, 65))), (8, 8), 0.75, seed=0)
    assert ps.padded_shape == (24, 72)
    assert ps.n_patches == 27
    assert ps.masked_idx.size == 20 and ps.visible_idx.size == 7


def test_ratio_zero_all_visible():
    ps = patchify_and_mask(np.ones((18, 65)), (8, 8), 0.0)
    assert ps.masked_idx.size == 0 and ps.visible_idx.size == 27


def test_same_seed_same_mask():
    g = np.ones((18, 65))
    a = patchify_and_mask(g, (8, 8), 0.75, seed=5)
    b = patchify_and_mask(g, (8, 8), 0.75, seed=5)
    np.testing.assert_array_equal(a.masked_idx, b.masked_idx)


def test_distinct_seeds_differ():
    g = np.ones((32, 32))
    a = patchify_and_mask(g, (4, 4), 0.5, seed=1)
    b = patchify_and_mask(g, (4, 4), 0.5, seed=2)
    assert a.n_patches >= 16
    assert not np.array_equal(a.masked_idx, b.masked_idx)


def test_bad_ratio_and_patch():
    with pytest.raises(DataError):
        patchify_and_mask(np.ones((8, 8)), (8, 8), 1.0)
    with pytest.raises(DataError):
        patchify_and_mask(np.ones((8, 8)), (0, 8), 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 8), st.integers(1, 8),
       st.floats(0, 0.95), st.integers(0, 1000))
def test_patch_partition_and_reassembly(r, c, h, w, ratio, seed):
    grid = np.random.default_rng(seed).normal(size=(r, c))
    ps = patchify_and_mask(grid, (h, w), ratio, seed)
    total = ps.n_patches
    assert total == -(-r // h) * -(-c // w)
    assert ps.masked_idx.size == int(np.floor(ratio * total + 0.5))
    both = np.concatenate([ps.visible_idx, ps.masked_idx])
    np.testing.assert_array_equal(np.sort(both), np.arange(total))
    np.testing.assert_array_equal(ps.grid(), grid)
    for i in (0, total - 1):
        row, col = ps.positions[i]
        np.testing.assert_array_equal(ps.patches[i].reshape(h, w), ps.padded_grid()[row * h : (row + 1) * h, col * w : (col + 1) * w])


def test_patch_vs_dft_bin_oracle():
    t = np.arange(512) / 125
    x = np.sin(2 * np.pi * 20 * t)
    cfg = StftConfig(64, 64, "rect")
    spec = stft(x, cfg)
    for m in range(spec.frames):
        assert spec.grid[m].argmax() == dft_peak_bin(x[m * 64 : (m + 1) * 64])
