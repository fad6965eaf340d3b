"""Signal conditioning: decimation to 200 Hz, 50 Hz notch, 1-70 Hz band-pass, min-max scaling.

Each stage accepts a `RawRecording` (both modalities are processed) or a
plain [channels, samples] array together with its sample rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .dataio import RawRecording
from .errors import InvalidConfig, NonIntegerDecimation, WrongSampleRate

TARGET_RATE_HZ = 200.0


@dataclass(frozen=True)
class FilterSpec:
    """An IIR design request.

    ``kind`` is "notch" (``freqs`` = (centre,), uses ``quality``) or
    "bandpass" (``freqs`` = (low, high), Butterworth of ``order``).
    """

    kind: str
    freqs: tuple[float, ...]
    order: int = 2
    quality: float = 30.0

    def validate(self, fs: float) -> None:
        nyq = fs / 2
        if self.order < 1:
            raise InvalidConfig("filter order must be >= 1")
        if not all(0 < f < nyq for f in self.freqs):
            raise InvalidConfig(f"edge frequencies {self.freqs} must lie inside (0, {nyq})")
        if self.kind == "notch":
            if len(self.freqs) != 1 or self.quality <= 0:
                raise InvalidConfig("notch needs one centre frequency and quality > 0")
        elif self.kind == "bandpass":
            if len(self.freqs) != 2 or not self.freqs[0] < self.freqs[1]:
                raise InvalidConfig("band-pass needs increasing (low, high) edges")
        else:
            raise InvalidConfig(f"unknown filter kind {self.kind!r}")

    def sos(self, fs: float) -> np.ndarray:
        self.validate(fs)
        if self.kind == "notch":
            b, a = signal.iirnotch(self.freqs[0], self.quality, fs=fs)
            return signal.tf2sos(b, a)
        return signal.butter(self.order, self.freqs, btype="bandpass", fs=fs, output="sos")


NOTCH_50 = FilterSpec("notch", (50.0,), order=2, quality=30.0)
BANDPASS_1_70 = FilterSpec("bandpass", (1.0, 70.0), order=4)
ANTI_ALIAS_HZ = 80.0


def _apply(x, fs, fn):
    if isinstance(x, RawRecording):
        return x.replace(eeg=fn(x.eeg, x.sample_rate_hz), eog=fn(x.eog, x.sample_rate_hz))
    if fs is None:
        raise InvalidConfig("sample rate required for array input")
    return fn(np.asarray(x, dtype=np.float64), fs)


def _rate(x, fs) -> float:
    return x.sample_rate_hz if isinstance(x, RawRecording) else fs


def _zero_phase(sos: np.ndarray, data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    # sosfiltfilt's default edge padding needs a few filter lengths of signal
    padlen = min(3 * (2 * len(sos) + 1), data.shape[-1] - 1)
    return signal.sosfiltfilt(sos, data, axis=-1, padlen=max(padlen, 0))


def resample_to_200hz(x, fs: float | None = None):
    """Integer decimation to 200 Hz after a zero-phase 80 Hz low-pass."""
    rate = _rate(x, fs)
    if rate == TARGET_RATE_HZ:
        return x
    ratio = rate / TARGET_RATE_HZ
    q = int(round(ratio))
    if q < 1 or abs(ratio - q) > 1e-9:
        raise NonIntegerDecimation(f"cannot decimate {rate} Hz to 200 Hz by an integer factor")
    sos = signal.butter(8, ANTI_ALIAS_HZ, btype="lowpass", fs=rate, output="sos")

    def run(data, fs_):
        return _zero_phase(sos, data)[..., ::q]

    out = _apply(x, fs, run)
    if isinstance(out, RawRecording):
        return out.replace(sample_rate_hz=TARGET_RATE_HZ)
    return out


def _filter_200(x, fs, spec: FilterSpec):
    rate = _rate(x, fs)
    if rate != TARGET_RATE_HZ:
        raise WrongSampleRate(f"expected 200 Hz input, got {rate}")
    sos = spec.sos(rate)
    return _apply(x, fs, lambda data, fs_: _zero_phase(sos, data))


def notch_50hz(x, fs: float | None = None):
    """Remove 50 Hz mains with a Q=30 notch applied forward and backward."""
    return _filter_200(x, fs, NOTCH_50)


def bandpass_1_70(x, fs: float | None = None):
    """Zero-phase 4th-order Butterworth band-pass, 1-70 Hz."""
    return _filter_200(x, fs, BANDPASS_1_70)


def _minmax(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    lo = data.min(axis=-1, keepdims=True)
    hi = data.max(axis=-1, keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (data - lo) / safe - 1.0
    out = np.where(span > 0, out, 0.0)
    return np.clip(out, -1.0, 1.0)


def minmax_normalize(x, fs: float | None = None):
    """Map each channel's min to -1 and max to +1; constant channels become zeros."""
    if isinstance(x, RawRecording):
        return x.replace(eeg=_minmax(x.eeg), eog=_minmax(x.eog))
    return _minmax(x)


def preprocess(rec: RawRecording) -> RawRecording:
    """The full conditioning chain in its fixed order."""
    rec = resample_to_200hz(rec)
    rec = notch_50hz(rec)
    rec = bandpass_1_70(rec)
    return minmax_normalize(rec)
