import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vigicaps.dataio import RawRecording
from vigicaps.errors import NonIntegerDecimation, WrongSampleRate
from vigicaps.preprocess import (bandpass_1_70, minmax_normalize, notch_50hz, preprocess,
                                 resample_to_200hz)

FS = 200.0


def sine(f, n=4000, fs=FS):
    return np.sin(2 * np.pi * f * np.arange(n) / fs)[None, :]


def rms(x):
    return float(np.sqrt(np.mean(x ** 2)))


def core(x):
    return x[..., 400:-400]


def test_resample_1000_to_200():
    x = sine(20.0, 5000, 1000.0)
    y = resample_to_200hz(x, 1000.0)
    assert y.shape == (1, 1000)
    # amplitude from RMS: samples at 200 Hz need not hit the sine's peaks
    assert abs(np.sqrt(2) * rms(core(y)) - 1.0) < 0.01


def test_resample_identity_and_errors():
    x = sine(10.0)
    assert np.array_equal(resample_to_200hz(x, 200.0), x)
    with pytest.raises(NonIntegerDecimation):
        resample_to_200hz(x, 300.0)


def test_notch_attenuates_mains_keeps_alpha():
    assert rms(core(notch_50hz(sine(50.0), FS))) <= 0.0316 * rms(core(sine(50.0)))
    assert rms(core(notch_50hz(sine(10.0), FS))) >= 0.89 * rms(core(sine(10.0)))
    assert not np.any(notch_50hz(np.zeros((2, 1000)), FS))


def test_bandpass_removes_dc_keeps_beta():
    x = 3.0 + sine(30.0)
    y = bandpass_1_70(x, FS)
    assert abs(core(y).mean()) < 1e-3
    gain_db = 20 * np.log10(rms(core(y)) / rms(core(sine(30.0))))
    assert abs(gain_db) <= 1.0


def test_filters_need_200hz():
    with pytest.raises(WrongSampleRate):
        notch_50hz(sine(10.0), 1000.0)
    with pytest.raises(WrongSampleRate):
        bandpass_1_70(sine(10.0), 250.0)


def test_minmax_examples():
    assert np.array_equal(minmax_normalize(np.array([[0.0, 5.0, 10.0]])), [[-1.0, 0.0, 1.0]])
    assert not np.any(minmax_normalize(np.full((2, 5), 3.0)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5), st.floats(-5, 5))
def test_filter_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 1, 600))
    for f in (notch_50hz, bandpass_1_70):
        lhs = f(a * x + b * y, FS)
        rhs = a * f(x, FS) + b * f(y, FS)
        assert np.max(np.abs(lhs - rhs)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_minmax_range_and_idempotence(seed):
    x = np.random.default_rng(seed).standard_normal((3, 50)) * 7
    y = minmax_normalize(x)
    assert y.min() >= -1 and y.max() <= 1
    assert np.allclose(minmax_normalize(y), y, atol=1e-12)


def test_preprocess_chain_on_recording():
    rng = np.random.default_rng(0)
    n = 2000
    rec = RawRecording("x", rng.standard_normal((17, n)), rng.standard_normal((4, n)), 1000.0)
    out = preprocess(rec)
    assert out.sample_rate_hz == 200.0 and out.eeg.shape == (17, 400)
    assert out.eeg.min() == -1.0 and out.eeg.max() == 1.0
