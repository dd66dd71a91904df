import numpy as np
import pytest

from uselab.audio import SUPPORTED_RATES, AudioBuffer, tone
from uselab.errors import AudioFormatError, ValidationError
from uselab.sfi import (_frame_signal, band_partition, frame_energy, istft, load_grid, save_grid, sfi_params,
                        sqrt_hann, stft)


@pytest.mark.parametrize("fs,win,hop,bins", [(8000, 320, 160, 161), (22050, 882, 441, 442), (44100, 1764, 882, 883)])
def test_params(fs, win, hop, bins):
    p = sfi_params(fs)
    assert (p.win_len, p.hop_len, p.n_bins) == (win, hop, bins)


@pytest.mark.parametrize("fs", SUPPORTED_RATES)
def test_window_is_40ms(fs):
    p = sfi_params(fs)
    assert p.win_len / fs == 0.040 and p.bin_spacing == 25.0


def test_unsupported_rate():
    with pytest.raises(ValidationError):
        sfi_params(11025)  # 441-sample window is odd


def test_frame_counts_rate_independent():
    counts = {fs: stft(AudioBuffer(np.zeros(fs), fs)).n_frames for fs in SUPPORTED_RATES}
    assert len(set(counts.values())) == 1


def test_zero_signal():
    g = stft(AudioBuffer(np.zeros(8000), 16000))
    assert not g.values.any()
    assert not istft(g.with_values(np.zeros(g.shape))).samples.any()


def test_tone_peak_bin():
    g = stft(tone(1000, 1.0, 16000))
    assert int(np.argmax(g.magnitude()[10])) == 40


def test_perfect_reconstruction(rng):
    for i in range(30):
        fs = SUPPORTED_RATES[i % len(SUPPORTED_RATES)]
        x = rng.standard_normal(int(rng.integers(sfi_params(fs).win_len, 2 * fs)))
        y = istft(stft(AudioBuffer(x, fs)))
        assert len(y) == x.size and np.max(np.abs(y.samples - x)) <= 1e-6


def test_parseval(rng):
    buf = AudioBuffer(rng.standard_normal(16000), 16000)
    g = stft(buf)
    frames = _frame_signal(buf.samples, g.params) * sqrt_hann(g.params.win_len)
    np.testing.assert_allclose(frame_energy(g), np.sum(frames ** 2, axis=1), rtol=1e-6)


def test_single_bin_synthesis():
    p = sfi_params(16000)
    n = 16000
    g = stft(AudioBuffer(np.zeros(n), 16000))
    v = np.zeros(g.shape, dtype=complex)
    v[20, 40] = p.win_len / 2
    y = istft(g.with_values(v)).samples
    # oracle: the frame's inverse FFT is a unit cosine at 1 kHz, shaped by the synthesis window
    start = 20 * p.hop_len - p.win_len // 2
    t = np.arange(p.win_len)
    expected = np.cos(2 * np.pi * 40 * t / p.win_len) * sqrt_hann(p.win_len)
    np.testing.assert_allclose(y[start: start + p.win_len], expected, atol=1e-12)
    mask = np.ones(n, bool)
    mask[start: start + p.win_len] = False
    assert not y[mask].any()


def test_short_input_rejected():
    with pytest.raises(ValidationError):
        stft(AudioBuffer(np.zeros(100), 16000))


class TestBands:
    def test_8k_single_band(self):
        b = band_partition(8000)
        assert b.bands == ((0, 161),) and b.edges_hz() == [4000.0]

    def test_22050_three_bands(self):
        b = band_partition(22050)
        assert len(b.bands) == 3 and b.edges_hz() == [4000.0, 8000.0, 11025.0]

    def test_48k_six_equal_bands(self):
        b = band_partition(48000)
        assert len(b.bands) == 6 and b.edges_hz() == [4000.0 * k for k in range(1, 7)]
        assert [hi - lo for lo, hi in b.bands[:-1]] == [160] * 5

    @pytest.mark.parametrize("fs", SUPPORTED_RATES)
    def test_tiling(self, fs):
        b = band_partition(fs)
        covered = np.concatenate([np.arange(lo, hi) for lo, hi in b.bands])
        assert np.array_equal(covered, np.arange(sfi_params(fs).n_bins))

    def test_bad_width(self):
        with pytest.raises(ValidationError):
            band_partition(16000, 0)


class TestGridFile:
    def test_round_trip(self, tmp_path, rng):
        g = stft(AudioBuffer(rng.standard_normal(9000), 22050))
        save_grid(g, tmp_path / "g.sfig")
        h = load_grid(tmp_path / "g.sfig")
        assert h.params == g.params and h.original_length == 9000
        np.testing.assert_array_equal(h.values, g.values.astype(np.complex64))

    def test_corrupt(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"XXXX" + bytes(60))
        with pytest.raises(AudioFormatError):
            load_grid(tmp_path / "bad")
