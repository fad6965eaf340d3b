import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from vigicaps.errors import DimensionMismatch, InvalidConfig, TooShort
from vigicaps.features import (BAND_LOW_HZ, DEFAULT_EOG_REGISTRY, EyeEvent, band_power,
                               de_from_variance, detect_eog_events, diff_entropy,
                               eog_features_36, eog_features, fuse, load_feature_cache,
                               parse_registry, psd_log, rolling_variance, save_feature_cache,
                               segment_and_window, select_modality)

FS = 200.0
REG = list(DEFAULT_EOG_REGISTRY)


def test_windowing_counts():
    assert [w.windows.shape for w in segment_and_window(np.zeros((17, 1600)), FS)] == [(15, 17, 200)]
    assert len(segment_and_window(np.zeros((17, 3300)), FS)) == 2
    with pytest.raises(TooShort):
        segment_and_window(np.zeros((17, 1599)), FS)


def test_window_offsets():
    x = np.arange(3200, dtype=float)[None, :]
    segs = segment_and_window(x, FS)
    assert segs[1].windows[0, 0, 0] == 1600 and segs[0].windows[14, 0, -1] == 1599
    assert segs[0].windows[3, 0, 0] == 300


def test_band_power_matches_scipy_periodogram():
    x = np.random.default_rng(0).standard_normal((3, 200))
    f, pxx = signal.periodogram(x, fs=FS, window="hann", detrend=False, scaling="density")
    want = pxx[:, 1:51].reshape(3, 25, 2).mean(axis=-1)
    assert np.allclose(band_power(x), want, rtol=1e-12, atol=0)
    assert np.allclose(f[1:51:2], BAND_LOW_HZ)


def test_psd_examples():
    t = np.arange(200) / FS
    p = psd_log(np.sin(2 * np.pi * 10 * t))
    assert BAND_LOW_HZ[np.argmax(p)] == 9.0
    assert np.all(psd_log(np.zeros(200)) == math.log(1e-12))
    x = np.random.default_rng(1).standard_normal(200)
    assert np.allclose(psd_log(2 * x) - psd_log(x), math.log(4), atol=1e-6)


def test_de_examples():
    assert abs(de_from_variance(1 / (2 * math.pi * math.e))) <= 1e-12
    assert de_from_variance(1.0) == pytest.approx(1.41894, abs=1e-5)
    x = np.random.default_rng(2).standard_normal(200)
    assert np.allclose(diff_entropy(3 * x) - diff_entropy(x), math.log(3), atol=1e-9)


def blink(n=1600, at=4.0, width=0.25, amp=50.0):
    t = np.arange(n) / FS
    sd = width / 2.355
    return np.tile(amp * np.exp(-0.5 * ((t - at) / sd) ** 2), (4, 1))


def test_no_events_in_silence():
    assert detect_eog_events(np.zeros((4, 1600))) == []


def test_single_blink():
    ev = detect_eog_events(blink())
    assert [e.kind for e in ev].count("blink") == 1
    assert [e.kind for e in ev].count("saccade") == 0
    assert abs(ev[0].time_s - 4.0) <= 0.1


def test_two_blinks_two_seconds_apart():
    ev = detect_eog_events(blink(at=3.0) + blink(at=5.0))
    times = sorted(e.time_s for e in ev if e.kind == "blink")
    assert len(times) == 2
    assert abs(times[0] - 3.0) <= 0.1 and abs(times[1] - 5.0) <= 0.1


def test_saccade_step_detected_as_saccade():
    t = np.arange(1600) / FS
    step = np.where(t > 4.0, 1.0, -1.0) * 5
    eog = np.zeros((4, 1600))
    eog[2], eog[3] = step, -step
    kinds = [e.kind for e in detect_eog_events(eog)]
    assert kinds.count("saccade") >= 1 and kinds.count("blink") == 0


def test_eog_features_empty_and_single():
    assert np.array_equal(eog_features_36([]), np.zeros(36))
    v = eog_features_36([EyeEvent("blink", 2.2, 7.0, 0.3)])
    f = dict(zip(REG, v))
    assert f["blink.amplitude.max"] == f["blink.amplitude.min"] == f["blink.amplitude.mean"] == 7.0
    assert f["blink.amplitude.varmax"] == f["blink.amplitude.varmean"] == 0.0
    assert f["blink.count.value"] == 1.0 and f["saccade.count.value"] == 0.0


def test_eog_feature_statistics():
    evs = [EyeEvent("saccade", 1.0, 1.0, 0.05), EyeEvent("saccade", 3.0, 3.0, 0.07)]
    f = dict(zip(REG, eog_features_36(evs)))
    assert (f["saccade.amplitude.mean"], f["saccade.amplitude.max"],
            f["saccade.amplitude.min"]) == (2.0, 3.0, 1.0)
    assert f["saccade.amplitude.power"] == 10.0


def test_rolling_variance():
    assert np.allclose(rolling_variance([1, 2, 3, 10]), [np.var([1, 2, 3]), np.var([2, 3, 10])])
    assert rolling_variance([4.0]).tolist() == [0.0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["blink", "saccade"]), st.floats(0, 8),
                          st.floats(0.01, 10), st.floats(0.01, 1)), max_size=12),
       st.randoms(use_true_random=False))
def test_eog_features_permutation_invariant(rows, rnd):
    evs = [EyeEvent(*r) for r in rows]
    shuffled = list(evs)
    rnd.shuffle(shuffled)
    assert np.array_equal(eog_features_36(evs), eog_features_36(shuffled))


def test_registry_validation():
    with pytest.raises(InvalidConfig):
        parse_registry(["blink.count.max"])
    with pytest.raises(InvalidConfig):
        parse_registry(["wink.rate.max"])
    assert eog_features([], ["blink.rate.max", "saccade.count.value"]).shape == (2,)


def test_fuse_shape_and_errors():
    eeg = np.random.default_rng(0).standard_normal((15, 850))
    out = fuse(eeg, np.zeros(36))
    assert out.shape == (15, 886) and not np.any(out[:, 850:])
    assert np.array_equal(out[:, :850], eeg)
    with pytest.raises(DimensionMismatch):
        fuse(np.zeros((14, 850)), np.zeros(36))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fuse_injective(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 15, 850))
    e1, e2 = rng.standard_normal((2, 36))
    assert not np.array_equal(fuse(a, e1), fuse(b, e1))
    assert not np.array_equal(fuse(a, e1), fuse(a, e2))


def test_modality_selection():
    X = np.arange(2 * 15 * 886, dtype=float).reshape(2, 15, 886)
    assert select_modality(X, "eeg").shape[2] == 850
    assert select_modality(X, "eog").shape[2] == 36
    with pytest.raises(InvalidConfig):
        select_modality(X, "ecg")


def test_feature_cache_roundtrip(tmp_path):
    X = np.random.default_rng(3).standard_normal((3, 15, 886))
    y = np.array([0.1, 0.5, 0.9])
    save_feature_cache(tmp_path, "P01", X, y)
    X2, y2 = load_feature_cache(tmp_path, "P01")
    assert np.array_equal(X, X2) and np.array_equal(y, y2)
