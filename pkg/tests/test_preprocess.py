import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpformer.errors import ConfigurationError, InputError
from cpformer.preprocess import (FilterSpec, LeadMask, RawSignal, apply_lead_mask, design_butterworth_bandpass,
                                 filtfilt, normalize_per_lead, preprocess_signal, resample, sos_response)

FS = 500.0


def sine(freq, seconds=10.0, fs=FS, amp=1.0, phase=0.0):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


@pytest.fixture(scope="module")
def sos():
    return design_butterworth_bandpass(FilterSpec())


def test_filter_spec_validation():
    with pytest.raises(ConfigurationError):
        FilterSpec(high_hz=250.0)
    with pytest.raises(ConfigurationError):
        FilterSpec(low_hz=50.0, high_hz=45.0)


def test_frequency_response_from_coefficients(sos):
    gain = np.abs(sos_response(sos, [0.0, 10.0, 60.0], FS))
    assert gain[0] < 1e-3
    assert abs(gain[1] - 1.0) < 0.05
    assert gain[2] < 0.3


def test_frequency_response_matches_polynomial_form(sos):
    from scipy.signal import sosfreqz
    f = np.array([0.2, 1.0, 5.0, 30.0, 45.0, 100.0])
    _, h = sosfreqz(sos, worN=f, fs=FS)
    assert np.allclose(sos_response(sos, f, FS), h, atol=1e-12)


def test_filtfilt_constant_removed(sos):
    y = filtfilt(sos, np.full((12, 2500), 3.0))
    assert np.abs(y).max() < 1e-3 * 3.0


def test_filtfilt_preserves_10hz_with_zero_phase(sos):
    x = sine(10.0)
    y = filtfilt(sos, x)
    core = slice(500, -500)
    amp = np.sqrt(2 * np.mean(y[core] ** 2))
    assert abs(amp - 1.0) <= 0.05
    lags = np.arange(-10, 11)
    xc = [np.dot(x[core], np.roll(y, -k)[core]) for k in lags]
    assert lags[int(np.argmax(xc))] == 0


def test_filtfilt_drift_attenuated(sos):
    x = sine(10.0) + 2.0 * sine(0.2)
    y = filtfilt(sos, x)
    spec_in = np.abs(np.fft.rfft(x)) ** 2
    spec_out = np.abs(np.fft.rfft(y)) ** 2
    freqs = np.fft.rfftfreq(x.size, 1 / FS)
    drift = np.argmin(np.abs(freqs - 0.2))
    assert 10 * np.log10(spec_in[drift] / spec_out[drift]) > 20


def test_filtfilt_linear(sos):
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 12, 1200))
    lhs = filtfilt(sos, 2.5 * x - 0.7 * y)
    rhs = 2.5 * filtfilt(sos, x) - 0.7 * filtfilt(sos, y)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_filtfilt_too_short(sos):
    with pytest.raises(InputError):
        filtfilt(sos, np.ones((12, 10)))


def test_resample_examples():
    x = sine(5.0)
    y = resample(x, 500, 100)
    assert y.shape == (1000,)
    amp = np.abs(np.fft.rfft(y)).max() * 2 / y.size
    assert abs(amp - 1.0) < 0.01
    assert np.fft.rfftfreq(y.size, 1 / 100)[np.argmax(np.abs(np.fft.rfft(y)))] == pytest.approx(5.0)
    assert not np.any(resample(np.zeros((12, 5000)), 500, 100))


@settings(max_examples=40, deadline=None)
@given(st.integers(100, 3000))
def test_resample_length_floor(length):
    assert resample(np.zeros((2, length)), 500, 100).shape[-1] == length // 5
    assert resample(np.zeros((2, length)), 500, 250).shape[-1] == length // 2


def test_resample_rational_and_invalid():
    y = resample(sine(5.0, seconds=4.0), 500, 300)
    assert y.shape == (1200,)
    with pytest.raises(ConfigurationError):
        resample(np.zeros(1000), 500, 500 / np.pi)


def test_normalize_examples():
    out = normalize_per_lead(np.array([[1.0, 2.0, 3.0, 4.0]]))
    assert np.allclose(out, [[-1.3416407865, -0.4472135955, 0.4472135955, 1.3416407865]], atol=1e-9)
    z = normalize_per_lead(np.zeros((2, 50)))
    assert np.array_equal(z, np.zeros((2, 50)))
    x = np.random.default_rng(1).normal(3.0, 5.0, size=(12, 400))
    n = normalize_per_lead(x)
    assert np.abs(n.mean(axis=1)).max() < 1e-10
    assert np.abs(n.std(axis=1) - 1).max() < 1e-9


def test_lead_masks():
    x = np.random.default_rng(2).normal(size=(12, 30))
    assert apply_lead_mask(x, LeadMask.full()) is x
    only_ii = apply_lead_mask(x, LeadMask.from_names(["II"]))
    assert np.array_equal(only_ii[1], x[1])
    assert not np.any(np.delete(only_ii, 1, axis=0))
    limb = apply_lead_mask(x, LeadMask.from_names(["I", "II", "III", "aVR", "aVL", "aVF"]))
    assert np.array_equal(limb[:6], x[:6]) and not np.any(limb[6:])
    with pytest.raises(InputError):
        LeadMask((False,) * 12)
    with pytest.raises(InputError):
        LeadMask.from_names(["V7"])


def test_raw_signal_contract():
    with pytest.raises(InputError):
        RawSignal(np.zeros((11, 1000)))
    with pytest.raises(InputError):
        RawSignal(np.zeros((12, 999)))


def test_pipeline_order_mask_after_normalize():
    rng = np.random.default_rng(3)
    raw = RawSignal(rng.normal(size=(12, 1500)))
    mask = LeadMask.from_names(["V1", "V2"])
    out = preprocess_signal(raw, mask=mask)
    assert out.shape == (12, 300)
    assert not np.any(out[[i for i in range(12) if i not in (6, 7)]])
    full = preprocess_signal(raw)
    assert np.array_equal(out[6:8], full[6:8])
