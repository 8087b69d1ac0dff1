import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcse import dsp
from mcse.autodiff import Tensor, precision

CFG = dsp.StftConfig()


def snr_db(ref, est):
    return 10 * np.log10(np.sum(ref ** 2) / np.sum((ref - est) ** 2))


def test_defaults_and_bins():
    assert (CFG.window_len, CFG.hop, CFG.fft_len, CFG.sample_rate) == (400, 100, 400, 16000)
    assert CFG.n_bins == 201
    assert dsp.cola_deviation(CFG) <= 1e-6


@pytest.mark.parametrize("kw", [dict(hop=500), dict(fft_len=200), dict(window="hamming"), dict(compression=0.0)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        dsp.StftConfig(**kw)


def test_zero_wave_frame_count():
    spec = dsp.stft(np.zeros(1600))
    padded = 1600 + 400
    assert spec.shape == (1 + (padded - 400) // 100, 201)
    assert not spec.any()


def test_too_short_input():
    with pytest.raises(dsp.InputTooShortError):
        dsp.stft(np.zeros(399))


def test_bin_centred_tone_concentrates():
    k = 37
    n = np.arange(8000)
    x = np.cos(2 * np.pi * k * 16000 / 400 * n / 16000)
    mag = np.abs(dsp.stft(x))[5:-5]
    peak = mag[:, k]
    others = np.delete(mag, [k - 1, k, k + 1], axis=1)
    assert np.all(20 * np.log10(others.max(axis=1) / peak) < -40)
    assert np.all(mag.argmax(axis=1) == k)


@pytest.mark.parametrize("n", [800, 4000, 16001])
def test_round_trip_60db(n):
    x = np.random.default_rng(n).standard_normal(n)
    y = dsp.istft(dsp.stft(x), CFG, n)
    assert snr_db(x, y) >= 60


def test_istft_zero_spectrum():
    assert not dsp.istft(np.zeros((11, 201), complex), CFG, 1000).any()


def test_single_frame_hand_overlap_add():
    win = dsp.analysis_window(CFG)
    tone = np.sin(2 * np.pi * 440 * np.arange(400) / 16000)
    spec = np.fft.rfft(tone * win, n=400)[None]
    out = dsp.istft(spec, CFG, 200)
    expected = (tone * win * win)[200:400] / (win ** 2)[200:400]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_degenerate_normalisation_raises():
    cfg = dsp.StftConfig(window_len=8, hop=8, fft_len=8)
    with pytest.raises(dsp.NumericalDegeneracyError):
        dsp.istft(np.ones((4, 5), complex), cfg, 24)


def test_istft_op_matches_istft_and_adjoint():
    rng = np.random.default_rng(0)
    spec = rng.standard_normal((12, 201)) + 1j * rng.standard_normal((12, 201))
    spec[:, 0] = spec[:, 0].real
    spec[:, -1] = spec[:, -1].real
    with precision(np.float64):
        out = dsp.istft_op(Tensor(spec.real), Tensor(spec.imag), CFG, 1100)
    np.testing.assert_allclose(out.data, dsp.istft(spec, CFG, 1100), atol=1e-12)


def test_compress_fixed_points_and_identity():
    np.testing.assert_array_equal(dsp.compress_mag(np.array([0.0, 1.0])), [0.0, 1.0])
    x = np.array([0.1, 2.0, 7.5])
    np.testing.assert_array_equal(dsp.compress_mag(x, 1.0), x)


def test_compress_matches_arbitrary_precision():
    mpmath.mp.dps = 40
    oracle = float(mpmath.power(mpmath.mpf(2), mpmath.mpf("0.3")))
    assert abs(dsp.compress_mag(np.array(2.0), 0.3) - oracle) <= 1e-15


def test_compress_negative_raises():
    with pytest.raises(ValueError):
        dsp.compress_mag(np.array([1.0, -0.1]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=2, max_size=20))
def test_compress_monotone_and_invertible(vals):
    x = np.sort(np.asarray(vals))
    c = dsp.compress_mag(x)
    assert np.all(np.diff(c) >= 0)
    assert np.all(c[np.diff(x, prepend=-1) > 0] >= 0)
    back = dsp.decompress_mag(c)
    np.testing.assert_allclose(back, x, rtol=1e-6, atol=1e-300)


def test_analyze_phase_range_and_zero_bins():
    x = np.random.default_rng(1).standard_normal(3000)
    pair = dsp.analyze(x)
    assert pair.pha.max() <= np.pi and pair.pha.min() > -np.pi
    zero = dsp.analyze(np.zeros(1000))
    assert not zero.pha.any() and not zero.cmag.any()


def test_synthesize_inverts_analyze():
    x = np.random.default_rng(2).standard_normal(4000)
    assert snr_db(x, dsp.synthesize(dsp.analyze(x), CFG, 4000)) >= 60


def _pairs(m, t=5, f=7, seed=0):
    rng = np.random.default_rng(seed)
    return [dsp.SpectroPair(rng.random((t, f)), rng.uniform(-3, 3, (t, f))) for _ in range(m)]


def test_pack_layout_and_sizes():
    one = _pairs(1)
    packed = dsp.pack_features(one)
    assert packed.shape == (2, 5, 7)
    np.testing.assert_array_equal(packed[0], one[0].cmag)
    np.testing.assert_array_equal(packed[1], one[0].pha)
    assert dsp.pack_features(_pairs(6)).shape == (12, 5, 7)


def test_pack_permutation_permutes_blocks():
    pairs = _pairs(3)
    perm = [2, 0, 1]
    a = dsp.pack_features(pairs)
    b = dsp.pack_features([pairs[i] for i in perm])
    for new, old in enumerate(perm):
        np.testing.assert_array_equal(b[2 * new:2 * new + 2], a[2 * old:2 * old + 2])


def test_pack_unpack_bijection_and_mismatch():
    pairs = _pairs(4)
    back = dsp.unpack_features(dsp.pack_features(pairs))
    for p, q in zip(pairs, back):
        np.testing.assert_array_equal(p.cmag, q.cmag)
        np.testing.assert_array_equal(p.pha, q.pha)
    bad = _pairs(2) + _pairs(1, t=6)
    with pytest.raises(ValueError):
        dsp.pack_features(bad)


@pytest.mark.parametrize("pcm16", [False, True])
def test_wav_round_trip(tmp_path, pcm16):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, (3, 500))
    dsp.write_wav(tmp_path / "a.wav", x, 16000, pcm16=pcm16)
    y, rate = dsp.read_wav(tmp_path / "a.wav")
    assert rate == 16000 and y.shape == (3, 500)
    np.testing.assert_allclose(y, x, atol=0.5 / 32768 + 1e-12 if pcm16 else 1e-7)
