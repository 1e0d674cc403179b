import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from d2net.dsp import (Spectrogram, StftConfig, cola_envelope, features, frame_count, hann,
                       invert_features, is_cola, istft, stft, stft_adjoint, wiener_filter,
                       wiener_masks)

import _oracles as oracle

DESK = StftConfig.desk()


def rel_l2(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


# ---------------------------------------------------------------------------
# configuration and window
# ---------------------------------------------------------------------------

def test_profiles():
    assert (DESK.window_size, DESK.hop, DESK.sample_rate, DESK.freq_bins) == (128, 32, 8000, 65)
    p = StftConfig.paper()
    assert (p.window_size, p.hop, p.sample_rate, p.freq_bins) == (4096, 1024, 44100, 2049)


@pytest.mark.parametrize("cfg", [StftConfig.desk(), StftConfig.paper()])
def test_hann_three_quarter_overlap_is_cola(cfg):
    env = cola_envelope(hann(cfg.window_size), cfg.hop)
    assert np.ptp(env) <= 1e-10
    assert is_cola(cfg)


def test_non_cola_rejected():
    cfg = StftConfig(window_size=128, hop=100)
    assert not is_cola(cfg)
    with pytest.raises(ValueError, match="COLA"):
        stft(np.ones(500), cfg)
    with pytest.raises(ValueError, match="COLA"):
        istft(Spectrogram(np.zeros((65, 5, 1), complex), cfg, 500))


def test_paper_frame_count():
    assert frame_count(3 * 60 * 44100, 1024) == 7752


# ---------------------------------------------------------------------------
# stft / istft
# ---------------------------------------------------------------------------

def test_zero_signal():
    spec = stft(np.zeros(1000), DESK)
    assert not np.any(spec.values)
    assert not np.any(istft(spec))


def test_shape_and_real_edges(rng):
    x = rng.standard_normal(1001)
    spec = stft(x, DESK)
    assert spec.values.shape == (65, frame_count(1001, 32), 1)
    assert np.all(spec.values[0].imag == 0) and np.all(spec.values[-1].imag == 0)


def test_empty_input():
    with pytest.raises(ValueError):
        stft(np.zeros(0), DESK)


@pytest.mark.parametrize("m", [3, 10, 40])
def test_bin_centered_sinusoid_energy(m):
    sr, N = DESK.sample_rate, DESK.window_size
    t = np.arange(4000) / sr
    x = np.sin(2 * np.pi * (m * sr / N) * t + 0.3)
    spec = stft(x, DESK)
    power = np.abs(spec.values[:, 5:-5, 0]) ** 2
    share = power[m - 1:m + 2].sum(axis=0) / power.sum(axis=0)
    assert np.all(share >= 0.99)
    frame = np.zeros(N)
    start = 20 * DESK.hop - N // 2
    frame[:] = x[start:start + N] * hann(N)
    np.testing.assert_allclose(np.abs(spec.values[:, 20, 0]) ** 2, oracle.dft_frame_energy(frame),
                               rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("n", [1, 31, 128, 1000, 8000])
def test_round_trip(n, rng):
    x = rng.standard_normal(n)
    assert rel_l2(istft(stft(x, DESK)), x) < 1e-6


def test_round_trip_paper_profile(rng):
    x = rng.standard_normal(44100)
    assert rel_l2(istft(stft(x, StftConfig.paper())), x) < 1e-6


def test_round_trip_stereo(rng):
    x = rng.standard_normal((3000, 2))
    y = istft(stft(x, DESK))
    assert y.shape == x.shape and rel_l2(y, x) < 1e-6


def test_istft_linearity(rng):
    spec = stft(rng.standard_normal(2000), DESK)
    a = rng.standard_normal(spec.values.shape) + 1j * rng.standard_normal(spec.values.shape)
    b = rng.standard_normal(spec.values.shape) + 1j * rng.standard_normal(spec.values.shape)
    sa, sb = Spectrogram(a, DESK, 2000), Spectrogram(b, DESK, 2000)
    lhs = istft(Spectrogram(a + b, DESK, 2000))
    np.testing.assert_allclose(lhs, istft(sa) + istft(sb), atol=1e-9)


def test_istft_length_override(rng):
    spec = stft(rng.standard_normal(1000), DESK)
    assert istft(spec, length=1010).shape == (1010,)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 3000), seed=st.integers(0, 2**31))
def test_adjoint_inner_product(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    X = stft(x, DESK).values
    Y = rng.standard_normal(X.shape) + 1j * rng.standard_normal(X.shape)
    weights = np.full(X.shape[0], 2.0)
    weights[[0, -1]] = 1.0
    lhs = np.sum(weights[:, None, None] * (X * Y.conj()).real)
    rhs = np.dot(x, stft_adjoint(Spectrogram(Y, DESK, n)))
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

def test_feature_values():
    np.testing.assert_allclose(features(np.array([0.0, np.e - 1])), [0.0, 1.0], atol=1e-15)


def test_feature_inversion(rng):
    spec = stft(rng.standard_normal(500), DESK)
    np.testing.assert_allclose(invert_features(features(spec)), np.abs(spec.values), atol=1e-6)


# ---------------------------------------------------------------------------
# Wiener
# ---------------------------------------------------------------------------

class TestWiener:

    @settings(max_examples=30, deadline=None)
    @given(S=st.integers(1, 6), seed=st.integers(0, 2**31))
    def test_masks_in_unit_interval_and_sum_to_one(self, S, seed):
        rng = np.random.default_rng(seed)
        mags = rng.random((S, 5, 7, 1)) * rng.choice([0, 1e-8, 1, 1e3], size=(S, 5, 7, 1))
        masks = wiener_masks(list(mags))
        assert np.all((masks >= 0) & (masks <= 1))
        np.testing.assert_allclose(masks.sum(axis=0), 1.0, atol=1e-12)

    def test_conservation(self, rng):
        mix = stft(rng.standard_normal(3000), DESK)
        mags = {s: rng.random(mix.values.shape) for s in "abcd"}
        parts = wiener_filter(mags, mix)
        total = sum(p.values for p in parts.values())
        assert rel_l2(total, mix.values) < 1e-6
        assert list(parts) == list("abcd")

    def test_single_active_source_takes_all(self, rng):
        mix = stft(rng.standard_normal(800), DESK)
        shape = mix.values.shape
        parts = wiener_filter([np.ones(shape), np.zeros(shape), np.zeros(shape)], mix)
        np.testing.assert_allclose(parts[0].values, mix.values, rtol=1e-9)
        assert np.max(np.abs(parts[1].values)) < 1e-9 * np.max(np.abs(mix.values))

    def test_equal_sources_split_evenly(self, rng):
        mix = stft(rng.standard_normal(800), DESK)
        m = rng.random(mix.values.shape) + 0.1
        a, b = wiener_filter([m, m], mix)
        np.testing.assert_allclose(a.values, mix.values / 2, rtol=1e-12)
        np.testing.assert_array_equal(a.values, b.values)

    def test_silent_bins_split_uniformly(self):
        masks = wiener_masks([np.zeros((3, 2))] * 4)
        np.testing.assert_allclose(masks, 0.25)

    def test_shape_mismatch(self, rng):
        mix = stft(rng.standard_normal(800), DESK)
        with pytest.raises(ValueError):
            wiener_filter([np.ones((3, 3, 1))], mix)

    def test_negative_magnitude(self):
        with pytest.raises(ValueError):
            wiener_masks([-np.ones(3)])
