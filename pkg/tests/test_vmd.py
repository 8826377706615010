import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import two_tone
from oracles import dft_peak_hz
from ts2tc.errors import DataError
from ts2tc.vmd import ModeSet, VmdConfig, dilate, vmd_decompose

CFG2 = VmdConfig(k=2, alpha=2000)


@pytest.fixture(scope="module")
def two_tone_modes():
    return vmd_decompose(two_tone(), CFG2)


def test_config_validation():
    for bad in (dict(k=-1), dict(alpha=0), dict(tau=-1), dict(eps=0), dict(max_iter=0)):
        with pytest.raises(DataError):
            VmdConfig(**bad)


def test_too_short_signal():
    with pytest.raises(DataError):
        vmd_decompose(np.ones(7), VmdConfig(k=1))


def test_constant_signal_single_mode():
    x = np.full(200, 3.0)
    ms = vmd_decompose(x, VmdConfig(k=1))
    assert ms.center_freqs[0] == pytest.approx(0.0, abs=1e-6)
    assert np.linalg.norm(ms.residual) / np.linalg.norm(x) <= 1e-3
    np.testing.assert_allclose(ms.modes[0], 3.0, atol=1e-3)


def test_two_tone_centres_match_dft_oracle(two_tone_modes):
    x = two_tone()
    # the raw-signal DFT locates the dominant tone; remove it to find the other
    f_hi = dft_peak_hz(x, 125)
    t = np.arange(700) / 125
    f_lo = dft_peak_hz(x - np.sin(2 * np.pi * f_hi * t), 125)
    want = np.sort([f_lo, f_hi]) / 125
    got = np.sort(two_tone_modes.center_freqs)
    np.testing.assert_allclose(got, want, rtol=0.05)
    np.testing.assert_allclose(got, [2 / 125, 10 / 125], rtol=0.05)


def test_residual_is_remainder(two_tone_modes):
    x = two_tone()
    np.testing.assert_allclose(two_tone_modes.modes.sum(0) + two_tone_modes.residual, x, atol=1e-12)


def test_interior_residual_small(two_tone_modes):
    # away from the mirror-extension seams the reconstruction is tight
    x = two_tone()
    sl = slice(50, 650)
    err = np.linalg.norm(two_tone_modes.residual[sl]) / np.linalg.norm(x[sl])
    assert err <= 0.05


def test_modes_real_and_centres_in_range(two_tone_modes):
    x = two_tone()
    assert two_tone_modes.max_imag <= 1e-9 * np.linalg.norm(x)
    assert np.all((two_tone_modes.center_freqs >= 0) & (two_tone_modes.center_freqs <= 0.5))
    assert two_tone_modes.modes.shape == (2, 700)


def test_stopping_rule(two_tone_modes):
    ms = two_tone_modes
    assert ms.criterion < CFG2.eps or ms.iterations_used == CFG2.max_iter


def test_time_reversal_symmetry(two_tone_modes):
    rev = vmd_decompose(two_tone()[::-1].copy(), CFG2)
    np.testing.assert_allclose(np.sort(rev.center_freqs), np.sort(two_tone_modes.center_freqs), atol=1e-6)


@settings(max_examples=8, deadline=None)
@given(st.floats(0.01, 100))
def test_scaling_equivariance(c):
    x = two_tone(300)
    base = vmd_decompose(x, CFG2)
    scaled = vmd_decompose(c * x, CFG2)
    rel = np.linalg.norm(scaled.modes - c * base.modes) / np.linalg.norm(c * base.modes)
    assert rel <= 1e-8
    np.testing.assert_allclose(scaled.center_freqs, base.center_freqs, atol=1e-9)


def test_deterministic():
    x = np.random.default_rng(0).normal(size=256)
    a, b = vmd_decompose(x), vmd_decompose(x)
    np.testing.assert_array_equal(a.modes, b.modes)


def test_dilate_shapes():
    x = np.random.default_rng(1).normal(size=700)
    ms = vmd_decompose(x, VmdConfig(k=4))
    d = dilate(x, ms)
    assert d.shape == (5, 700)
    np.testing.assert_array_equal(d[0], x)
    np.testing.assert_array_equal(d[1], ms.modes[0])


def test_dilate_zero_modes():
    x = np.arange(10.0)
    ms = vmd_decompose(x, VmdConfig(k=0))
    d = dilate(x, ms)
    assert d.shape == (1, 10)
    np.testing.assert_array_equal(d[0], x)


def test_dilate_length_mismatch():
    ms = ModeSet(np.zeros((1, 5)), np.zeros(1), np.zeros(5), 1)
    with pytest.raises(DataError):
        dilate(np.zeros(6), ms)
