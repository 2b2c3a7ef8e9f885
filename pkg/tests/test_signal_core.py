import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from remixsep.errors import SignalError
from remixsep.signal_core import Spectrogram, Waveform, analysis_window, istft, read_wav, stft, write_wav


def _random_waveform(seed: int, channels: int = 2, length: int = 2048) -> Waveform:
    return Waveform(np.random.default_rng(seed).standard_normal((channels, length)))


def test_stft_shape_matches_configuration():
    """512-point Hann, hop 128: 257 bins and 1 + L // hop frames."""
    w = Waveform(np.random.default_rng(0).standard_normal(16000), 16000)
    s = stft(w, 512, 128)

    assert s.bins.shape == (1, 257, 1 + 16000 // 128)
    assert s.bins.dtype == np.complex128
    assert (s.n_fft, s.hop, s.window) == (512, 128, "hann")
    print(f"✓ STFT of 1 s at 16 kHz has shape {s.bins.shape}")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), channels=st.integers(1, 4),
       length=st.integers(512, 3000))
def test_round_trip_reconstructs_waveform(seed, channels, length):
    w = _random_waveform(seed, channels, length)
    back = istft(stft(w, 512, 128), length=length)

    error = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
    assert error < 1e-6, f"relative round-trip error {error:.2e}"


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1),
       a=st.floats(-3, 3, allow_nan=False), b=st.floats(-3, 3, allow_nan=False))
def test_stft_is_linear(seed, a, b):
    w1, w2 = _random_waveform(seed), _random_waveform(seed + 1)
    combined = stft(Waveform(a * w1.samples + b * w2.samples))
    expected = a * stft(w1).bins + b * stft(w2).bins

    np.testing.assert_allclose(combined.bins, expected, atol=1e-9)


def test_single_impulse_spreads_across_frames():
    """An impulse in the middle of the signal reaches every frequency bin."""
    samples = np.zeros(4096)
    samples[2048] = 1.0
    s = stft(Waveform(samples), 512, 128)

    centre = 2048 // 128
    assert np.all(np.abs(s.bins[0, :, centre]) > 0)
    back = istft(s, length=4096)
    np.testing.assert_allclose(back.samples[0], samples, atol=1e-10)
    print("✓ impulse is analysed into every bin and reconstructed exactly")


@pytest.mark.parametrize("n_fft,hop,length", [
    (500, 128, 2048),   # not a power of two
    (512, 0, 2048),
    (512, 600, 2048),
    (512, 128, 100),    # shorter than the window
])
def test_stft_rejects_bad_parameters(n_fft, hop, length):
    with pytest.raises(SignalError):
        stft(Waveform(np.ones(length)), n_fft, hop)


def test_stft_rejects_empty_waveform():
    with pytest.raises(SignalError):
        stft(Waveform(np.zeros((1, 0))))


def test_istft_rejects_non_cola_hop():
    """A Hann window with hop = n_fft leaves gaps and cannot be inverted."""
    s = stft(_random_waveform(0, 1), 512, 512)
    with pytest.raises(SignalError, match="overlap-add"):
        istft(s)


def test_spectrogram_validates_frequency_axis():
    with pytest.raises(SignalError):
        Spectrogram(np.zeros((1, 256, 4), dtype=complex), n_fft=512, hop=128)


def test_spectrogram_arithmetic_requires_matching_metadata():
    w = _random_waveform(3)
    a, b = stft(w, 512, 128), stft(w, 512, 256)

    summed = a + a
    np.testing.assert_allclose(summed.bins, 2 * a.bins)
    with pytest.raises(SignalError):
        a + b
    print("✓ spectrograms with different hops refuse to combine")


def test_waveform_rejects_non_finite_samples():
    with pytest.raises(SignalError):
        Waveform(np.array([0.0, np.nan, 1.0]))


@pytest.mark.parametrize("subtype,atol", [("FLOAT", 1e-7), ("PCM_16", 1.0 / 2**15)])
def test_wav_round_trip(tmp_path, subtype, atol):
    w = Waveform(0.5 * np.sin(np.linspace(0, 40 * np.pi, 8000))[None, :].repeat(2, axis=0), 16000)
    path = write_wav(tmp_path / "nested" / "tone.wav", w, subtype=subtype)
    back = read_wav(path)

    assert back.sample_rate == 16000
    assert back.samples.shape == (2, 8000)
    np.testing.assert_allclose(back.samples, w.samples, atol=atol)
    print(f"✓ {subtype} WAV round trip within {atol:.1e}")


def test_bin_centre_sinusoid_matches_direct_dft():
    """An interior frame equals a naive windowed DFT; a bin-centre tone stays within bin k ± 1."""
    n_fft, hop, k = 512, 128, 20
    t = np.arange(4096)
    x = np.cos(2 * np.pi * k * t / n_fft)
    s = stft(Waveform(x), n_fft, hop)

    frame = 10
    start = frame * hop - n_fft // 2
    segment = x[start:start + n_fft] * analysis_window(n_fft)
    basis = np.exp(-2j * np.pi * np.outer(np.arange(n_fft // 2 + 1), np.arange(n_fft)) / n_fft)
    np.testing.assert_allclose(s.bins[0, :, frame], basis @ segment, atol=1e-8)

    power = np.abs(s.bins[0, :, frame]) ** 2
    assert int(np.argmax(power)) == k
    assert power[k - 1:k + 2].sum() / power.sum() > 1 - 1e-12
    print("✓ bin-centre tone is confined to the Hann main lobe")
