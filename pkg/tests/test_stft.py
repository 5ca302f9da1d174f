import numpy as np
import pytest

from farfield.audio import MultichannelAudio
from farfield.errors import DataError
from farfield.stft import StftParams, istft, stft

FS = 16000


def _audio(samples):
    return MultichannelAudio(np.atleast_2d(samples), FS)


def test_zero_signal_gives_zero_tensor():
    tensor = stft(_audio(np.zeros(4000)))
    assert np.all(tensor.values == 0)


def test_linearity():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(5000)
    b = rng.standard_normal(5000)
    sa = stft(_audio(a)).values
    sb = stft(_audio(b)).values
    sab = stft(_audio(a + b)).values
    np.testing.assert_allclose(sab, sa + sb, atol=1e-12)


def test_sinusoid_energy_concentrates_in_bin():
    # bin-center frequency: k * fs / frame_length, frame >= 4 periods
    params = StftParams(1024, 256, "hann", "center")
    k = 32
    freq = k * FS / params.frame_length
    t = np.arange(FS) / FS
    tensor = stft(_audio(np.sin(2 * np.pi * freq * t)), params)
    # interior frame, away from padding edges
    frame = np.abs(tensor.values[0, tensor.num_frames // 2]) ** 2
    # reference: brute-force DFT of the windowed sinusoid frame
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1024) / 1024)
    start = (tensor.num_frames // 2) * 256 - 512  # center-padding offset
    seg = np.sin(2 * np.pi * freq * (np.arange(start, start + 1024) / FS)) * window
    n = np.arange(1024)
    dft = np.array([np.sum(seg * np.exp(-2j * np.pi * kk * n / 1024)) for kk in range(513)])
    np.testing.assert_allclose(tensor.values[0, tensor.num_frames // 2], dft, atol=1e-9)
    assert frame[k] / frame.sum() >= 0.49  # k plus leakage into k+-1 only
    assert (frame[k - 1 : k + 2].sum()) / frame.sum() >= 0.99


@pytest.mark.parametrize("window", ["hann", "sqrt_hann"])
@pytest.mark.parametrize("shift", [256, 512])
def test_round_trip_all_cola_configs(window, shift):
    params = StftParams(1024, shift, window, "center")
    rng = np.random.default_rng(7)
    x = _audio(rng.standard_normal((3, 12345)))
    y = istft(stft(x, params), params)
    assert y.samples.shape == x.samples.shape
    err = np.linalg.norm(y.samples - x.samples) / np.linalg.norm(x.samples)
    assert err < 1e-6


def test_round_trip_sqrt_hann_half_overlap_multichannel():
    params = StftParams(512, 256, "sqrt_hann", "center")
    rng = np.random.default_rng(3)
    x = _audio(rng.standard_normal((3, 8000)))
    y = istft(stft(x, params), params)
    err = np.linalg.norm(y.samples - x.samples) / np.linalg.norm(x.samples)
    assert err < 1e-6


def test_zero_tensor_inverts_to_zero():
    tensor = stft(_audio(np.zeros(4000)))
    y = istft(tensor)
    assert np.all(y.samples == 0)


def test_parseval_per_frame():
    params = StftParams(512, 128, "hann", "center")
    rng = np.random.default_rng(11)
    x = _audio(rng.standard_normal(4000))
    tensor = stft(x, params)
    # windowed-frame time energy equals spectral energy (onesided doubling)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(512) / 512)
    padded = np.pad(x.samples[0], (256, 256))
    t = tensor.num_frames // 2
    frame = padded[t * 128 : t * 128 + 512] * window
    spec = tensor.values[0, t]
    spectral = (np.abs(spec[0]) ** 2 + 2 * np.sum(np.abs(spec[1:-1]) ** 2)
                + np.abs(spec[-1]) ** 2) / 512
    assert abs(np.sum(frame**2) - spectral) <= 1e-6 * max(spectral, 1.0)


def test_channel_order_preserved_and_deterministic():
    rng = np.random.default_rng(5)
    x = _audio(rng.standard_normal((4, 5000)))
    t1 = stft(x)
    t2 = stft(x)
    np.testing.assert_array_equal(t1.values, t2.values)
    single = stft(x.channel(2))
    np.testing.assert_allclose(t1.values[2], single.values[0])


def test_errors():
    with pytest.raises(DataError):
        stft(MultichannelAudio(np.empty((1, 0)), FS))
    with pytest.raises(DataError):
        stft(_audio(np.ones(100)), StftParams(1024, 256, "hann", "none"))
    with pytest.raises(DataError):
        StftParams(256, 512)
    # non-invertible overlap: hann with shift == frame_length
    params = StftParams(512, 512, "hann", "center")
    tensor = stft(_audio(np.ones(4000)), params)
    with pytest.raises(DataError):
        istft(tensor, params)
