import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_dct, naive_dft, naive_filterbank, naive_mfcc, naive_power
from stochformer.dsp import (AudioSignal, FeatureConfig, MfccMatrix, dct_mfcc, extract_mfcc,
                             fft_radix2, frame_and_window, frame_signal, mel_filter_energies,
                             mel_filterbank, power_spectrum, read_mfcc, read_wav, write_mfcc,
                             write_wav)
from stochformer.errors import ConfigError, DataLoadError, DimensionError, InputError

FLOOR = math.log(1e-10)


class TestFraming:
    def test_exact_fit(self):
        assert frame_signal(np.ones(400), 400, 160).shape == (1, 400)

    def test_zero_signal(self):
        frames = frame_signal(np.zeros(720), 400, 160)
        assert frames.shape == (3, 400) and not frames.any()

    def test_count_formula(self):
        # floor((720 - 400) / 160) + 1
        assert frame_signal(np.ones(720), 400, 160).shape[0] == 3

    def test_ms_arguments(self):
        sig = AudioSignal(np.zeros(16000), 16000)
        assert frame_and_window(sig, 25.0, 10.0).shape == (98, 400)

    def test_too_short(self):
        with pytest.raises(InputError):
            frame_signal(np.ones(399), 400, 160)

    def test_bad_geometry(self):
        with pytest.raises(ConfigError):
            frame_signal(np.ones(800), 400, 0)

    def test_window_and_preemphasis(self):
        x = np.random.default_rng(0).uniform(-1, 1, 10)
        frames = frame_signal(x, 10, 10, preemphasis=0.97)
        y = np.concatenate([[x[0]], x[1:] - 0.97 * x[:-1]])
        w = 0.54 - 0.46 * np.cos(2 * np.pi * np.arange(10) / 9)
        assert np.allclose(frames[0], y * w, atol=1e-15)

    def test_signal_validation(self):
        with pytest.raises(InputError):
            AudioSignal(np.array([0.5, 1.5]), 16000)
        with pytest.raises(InputError):
            AudioSignal(np.array([0.0, np.nan]), 16000)


class TestSpectrum:
    @pytest.mark.parametrize("n", [1, 2, 8, 64, 512])
    def test_fft_matches_naive(self, n):
        x = np.random.default_rng(n).normal(size=n)
        assert np.max(np.abs(fft_radix2(x) - naive_dft(x))) < 1e-9

    def test_fft_rejects_non_power_of_two(self):
        with pytest.raises(ConfigError):
            power_spectrum(np.ones(10), 100)

    def test_frame_longer_than_nfft(self):
        with pytest.raises(ConfigError):
            power_spectrum(np.ones(600), 512)

    def test_zero(self):
        assert not power_spectrum(np.zeros(400), 512).any()

    def test_cosine_at_bin(self):
        k = 5
        frame = np.cos(2 * np.pi * k * np.arange(64) / 64)
        p = power_spectrum(frame, 64)
        oracle = naive_power(frame, 64)
        assert np.allclose(p, oracle, atol=1e-12)
        assert int(np.argmax(p)) == k
        assert p[k] == pytest.approx(16.0)  # |32|^2 / 64
        assert np.delete(p, k).max() < 1e-20

    def test_constant_frame(self):
        p = power_spectrum(np.ones(64), 64)
        assert p[0] == pytest.approx(64.0)
        assert p[1:].max() < 1e-20
        assert np.allclose(p, naive_power(np.ones(64), 64), atol=1e-12)

    def test_row_wise(self):
        frames = np.random.default_rng(3).normal(size=(4, 400))
        p = power_spectrum(frames, 512)
        assert p.shape == (4, 257)
        assert np.allclose(p[2], naive_power(frames[2], 512), atol=1e-9)


class TestFilterbank:
    def test_matches_oracle(self):
        fb = mel_filterbank(26, 512, 16000, 0.0, 8000.0)
        assert np.max(np.abs(fb.weights - naive_filterbank(26, 512, 16000, 0.0, 8000.0))) < 1e-12

    def test_zero_spectrum(self):
        fb = mel_filterbank()
        assert np.array_equal(mel_filter_energies(np.zeros(257), fb), np.full(26, FLOOR))

    def test_indicator_bin(self):
        fb = mel_filterbank()
        # bins below the second filter's lower edge are covered by filter 0 alone
        j, k = 0, 2
        assert np.count_nonzero(fb.weights[:, k]) == 1
        spec = np.zeros(257)
        spec[k] = 1.0
        Sn = mel_filter_energies(spec, fb)
        oracle = np.log(np.maximum(fb.weights @ spec, 1e-10))
        assert np.array_equal(Sn, oracle)
        assert [i for i in range(26) if Sn[i] > FLOOR] == [j]

    def test_uniform_spectrum(self):
        fb = mel_filterbank()
        Sn = mel_filter_energies(np.ones(257), fb)
        oracle = [math.log(sum(fb.weights[j])) for j in range(26)]
        assert np.allclose(Sn, oracle, atol=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            mel_filter_energies(np.ones(100), mel_filterbank())

    def test_bad_band(self):
        with pytest.raises(ConfigError):
            mel_filterbank(26, 512, 16000, 0.0, 9000.0)


class TestDct:
    def test_c0_is_sum(self):
        Sn = np.random.default_rng(0).normal(size=26)
        assert dct_mfcc(Sn, 12)[0] == pytest.approx(Sn.sum(), abs=1e-12)

    def test_zero(self):
        assert not dct_mfcc(np.zeros(26), 12).any()

    def test_single_term(self):
        assert dct_mfcc(np.array([1.0, 0, 0, 0]), 1)[1] == pytest.approx(0.9238795325112867, abs=1e-15)

    def test_matches_loop_oracle(self):
        Sn = np.random.default_rng(1).normal(size=26)
        assert np.allclose(dct_mfcc(Sn, 12), naive_dct(Sn, 12), atol=1e-12)


class TestExtract:
    def test_zero_signal(self):
        m = extract_mfcc(AudioSignal(np.zeros(8000), 16000))
        assert np.all(m.values == m.values[0])
        assert m.values[0, 0] == pytest.approx(26 * FLOOR)
        assert np.allclose(m.values[0], naive_dct(np.full(26, FLOOR), 12), atol=1e-9)

    def test_tone_shape_and_oracle(self):
        t = np.arange(16000) / 16000
        sig = AudioSignal(0.5 * np.sin(2 * np.pi * 440 * t), 16000)
        m = extract_mfcc(sig)
        assert m.values.shape == (98, 13)
        fb = naive_filterbank(26, 512, 16000, 0.0, 8000.0)
        oracle = naive_mfcc(sig.samples, 16000, filterbank=fb)
        assert np.max(np.abs(m.values - oracle)) < 1e-8

    def test_c0_tracks_amplitude(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.4, 0.4, 4000)
        a = extract_mfcc(AudioSignal(x, 16000)).values
        b = extract_mfcc(AudioSignal(2 * x, 16000)).values
        # scaling by 2 multiplies power by 4: each log energy moves by ln 4
        assert np.allclose(b[:, 0] - a[:, 0], 26 * math.log(4.0), atol=1e-6)
        assert np.allclose(b[:, 1:], a[:, 1:], atol=1e-6)

    def test_hop_shift_drops_one_frame(self):
        x = np.random.default_rng(5).uniform(-0.5, 0.5, 4000)
        a = extract_mfcc(AudioSignal(x, 16000)).values
        # dropping one hop shifts frames by one; the new first sample loses its
        # pre-emphasis predecessor, so only frames from the second on line up
        b = extract_mfcc(AudioSignal(x[160:], 16000)).values
        assert b.shape[0] == a.shape[0] - 1
        assert np.allclose(a[2:], b[1:], atol=1e-9)
        assert not np.allclose(a[1], b[0], atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(400, 3000), st.integers(0, 2 ** 31 - 1))
    def test_frame_count_property(self, n, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, n)
        m = extract_mfcc(AudioSignal(x, 16000))
        assert m.values.shape == ((n - 400) // 160 + 1, 13)
        assert np.all(np.isfinite(m.values))


class TestFiles:
    def test_wav_round_trip(self, tmp_path):
        x = np.random.default_rng(0).uniform(-0.9, 0.9, 1000)
        write_wav(tmp_path / "a.wav", AudioSignal(x, 16000))
        back = read_wav(tmp_path / "a.wav")
        assert back.sample_rate_hz == 16000
        assert np.max(np.abs(back.samples - x)) <= 0.5 / 32768

    def test_wav_bad_file(self, tmp_path):
        (tmp_path / "bad.wav").write_bytes(b"not a wav")
        with pytest.raises(DataLoadError):
            read_wav(tmp_path / "bad.wav")

    def test_mfcc_text_exact_round_trip(self, tmp_path):
        m = MfccMatrix(np.random.default_rng(1).normal(size=(7, 13)), 25.0, 10.0)
        write_mfcc(tmp_path / "m.csv", m)
        back = read_mfcc(tmp_path / "m.csv")
        assert np.array_equal(back.values, m.values)
        assert (back.frame_ms, back.hop_ms) == (25.0, 10.0)

    def test_mfcc_header_mismatch(self, tmp_path):
        (tmp_path / "m.csv").write_text("mfcc,v1,3,2,25,10\n1,2\n")
        with pytest.raises(DataLoadError):
            read_mfcc(tmp_path / "m.csv")

    def test_feature_config_defaults(self):
        cfg = FeatureConfig()
        assert cfg.frame_length(16000) == 400 and cfg.hop_length(16000) == 160
