"""Segment-level features: EEG log-PSD and DE per window, EOG event statistics, fusion.

An 8 s segment at 200 Hz is cut into 15 one-second Hann windows with 50%
overlap. Each window gives 17 channels x 25 bands x (log-PSD, DE) = 850
values; the segment's 36 EOG statistics are appended to every window,
giving a [15, 886] sequence per segment.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .dataio import EEG_CHANNELS, RawRecording
from .errors import DimensionMismatch, FormatError, InvalidConfig, TooShort, WrongSampleRate

FS = 200
SEGMENT = 1600
WINDOW = 200
HOP = 100
N_WINDOWS = (SEGMENT - WINDOW) // HOP + 1
N_BANDS = 25
BAND_LOW_HZ = 1.0 + 2.0 * np.arange(N_BANDS)
EEG_DIM = len(EEG_CHANNELS) * N_BANDS * 2
EOG_DIM = 36
FUSED_DIM = EEG_DIM + EOG_DIM
POWER_FLOOR = 1e-12

BLINK_SCALE_S = 0.25
SACCADE_SCALE_S = 0.06
MAD_FACTOR = 3.0
ABS_THRESHOLD = 1e-6


@dataclass
class SegmentWindows:
    segment_index: int
    windows: np.ndarray  # [15, channels, 200]


def _check_rate(fs):
    if fs != FS:
        raise WrongSampleRate(f"features expect {FS} Hz input, got {fs}")


def window_array(data: np.ndarray) -> np.ndarray:
    """[channels, n] -> [segments, 15, channels, 200] (views are copied out)."""
    data = np.asarray(data)
    n_seg = data.shape[-1] // SEGMENT
    if n_seg < 1:
        raise TooShort(f"need at least {SEGMENT} samples, got {data.shape[-1]}")
    segs = data[:, :n_seg * SEGMENT].reshape(data.shape[0], n_seg, SEGMENT)
    win = np.lib.stride_tricks.sliding_window_view(segs, WINDOW, axis=-1)[..., ::HOP, :]
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3))


def segment_and_window(rec, fs: float | None = None) -> list[SegmentWindows]:
    """Non-overlapping 8 s segments, each cut into 15 overlapping 1 s windows.

    Accepts a recording (its EEG is windowed) or a [channels, n] array. The
    trailing partial segment is dropped.
    """
    if isinstance(rec, RawRecording):
        _check_rate(rec.sample_rate_hz)
        data = rec.eeg
    else:
        if fs is not None:
            _check_rate(fs)
        data = np.atleast_2d(rec)
    win = window_array(data)
    return [SegmentWindows(k, win[k]) for k in range(win.shape[0])]


_HANN = signal.get_window("hann", WINDOW)
_HANN_POWER = float((_HANN ** 2).sum())


def band_power(window: np.ndarray) -> np.ndarray:
    """Hann periodogram (power spectral density) averaged over 2 Hz bands.

    ``window`` is [..., 200]; returns [..., 25] in units^2/Hz. Band k covers
    bins [1 + 2k, 3 + 2k) Hz, i.e. two 1 Hz bins.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-1] != WINDOW:
        raise DimensionMismatch(f"windows must have {WINDOW} samples")
    spec = np.fft.rfft(window * _HANN, axis=-1)
    psd = (spec.real ** 2 + spec.imag ** 2) / (FS * _HANN_POWER)
    psd[..., 1:-1] *= 2.0  # one-sided
    bins = psd[..., 1:1 + 2 * N_BANDS]
    return bins.reshape(*bins.shape[:-1], N_BANDS, 2).mean(axis=-1)


def psd_log(window: np.ndarray) -> np.ndarray:
    """Natural log of mean band power, floored at 1e-12 before the log."""
    return np.log(np.maximum(band_power(window), POWER_FLOOR))


def de_from_variance(var) -> np.ndarray:
    """Differential entropy of a Gaussian: 0.5 * ln(2 pi e var)."""
    return 0.5 * np.log(2.0 * np.pi * np.e * np.maximum(np.asarray(var, dtype=np.float64),
                                                        POWER_FLOOR))


def diff_entropy(window: np.ndarray) -> np.ndarray:
    """DE per band, with the band-limited variance taken as band power x 2 Hz."""
    return de_from_variance(band_power(window) * 2.0)


def eeg_window_features(windows: np.ndarray) -> np.ndarray:
    """[..., 17, 200] -> [..., 850] laid out channel-major as [17, 25, (psd, de)]."""
    p = band_power(windows)
    feats = np.stack([np.log(np.maximum(p, POWER_FLOOR)), de_from_variance(p * 2.0)], axis=-1)
    return feats.reshape(*feats.shape[:-3], -1)


# ------------------------------------------------------------- EOG events

@dataclass(frozen=True)
class EyeEvent:
    kind: str          # "blink" or "saccade"
    time_s: float      # time of the coefficient peak from segment start
    amplitude: float   # peak wavelet coefficient (absolute value for saccades)
    duration_s: float  # width of the above-threshold run containing the peak


def ricker(points: int, sigma: float) -> np.ndarray:
    """Mexican-hat wavelet with standard deviation ``sigma`` samples, unit L2 norm."""
    t = np.arange(points) - (points - 1) / 2.0
    x = t / sigma
    w = (1.0 - x * x) * np.exp(-0.5 * x * x)
    return w / np.sqrt((w * w).sum())


def cwt_coefficients(trace: np.ndarray, scale_s: float, fs: float = FS) -> np.ndarray:
    """Ricker continuous-wavelet coefficients of a 1-D trace at one scale.

    The scale is the distance between the wavelet's two zero crossings,
    i.e. twice its standard deviation.
    """
    sigma = 0.5 * scale_s * fs
    points = int(min(10 * sigma, len(trace)))
    points += 1 - points % 2
    return np.convolve(trace, ricker(points, sigma), mode="same")


def _threshold(c: np.ndarray) -> float:
    mad = np.median(np.abs(c - np.median(c)))
    return max(MAD_FACTOR * mad, ABS_THRESHOLD)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) index ranges where ``mask`` is True."""
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)))


def _events_from(c: np.ndarray, thr: float, kind: str, fs: float, exclude=None
                 ) -> list[EyeEvent]:
    out = []
    for lo, hi in _runs(c > thr):
        if exclude is not None and exclude[lo:hi].any():
            continue
        k = lo + int(np.argmax(c[lo:hi]))
        # only local maxima strictly inside the segment count as peaks
        if k == 0 or k == len(c) - 1:
            continue
        out.append(EyeEvent(kind, k / fs, float(c[k]), (hi - lo) / fs))
    return out


def _suppress(events: list[EyeEvent], spacing_s: float) -> list[EyeEvent]:
    """Keep the strongest of any events closer than ``spacing_s``.

    A Ricker response has side lobes of opposite sign next to its main lobe;
    this folds them (and other overlapping detections) into the main event.
    """
    kept: list[EyeEvent] = []
    for e in sorted(events, key=lambda e: (-e.amplitude, e.time_s)):
        if all(abs(e.time_s - k.time_s) >= spacing_s for k in kept):
            kept.append(e)
    return sorted(kept, key=lambda e: e.time_s)


def eog_traces(eog: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertical (blink) and horizontal (saccade) traces of the forehead montage.

    Blinks deflect all four electrodes the same way, so their mean keeps them;
    horizontal movements push the two lateral electrodes (3 and 4) in
    opposite directions, so their half-difference keeps saccades and cancels
    blinks.
    """
    eog = np.asarray(eog, dtype=np.float64)
    if eog.ndim != 2 or eog.shape[0] != 4:
        raise DimensionMismatch(f"EOG segment must be [4, n], got {eog.shape}")
    return eog.mean(axis=0), 0.5 * (eog[2] - eog[3])


def detect_eog_events(eog_segment: np.ndarray, fs: float = FS) -> list[EyeEvent]:
    """Blinks and saccades from peaks of Ricker wavelet coefficients.

    Blinks are positive peaks of the vertical trace's coefficients at the
    blink scale; saccades are peaks of either sign in the horizontal
    coefficients at the saccade scale that do not fall inside a blink. A peak counts when it
    exceeds max(3 x MAD of the coefficients, a small absolute floor).
    """
    _check_rate(fs)
    vertical, horizontal = eog_traces(eog_segment)
    cb = cwt_coefficients(vertical, BLINK_SCALE_S, fs)
    blinks = _events_from(cb, _threshold(cb), "blink", fs)
    in_blink = np.zeros(len(cb), dtype=bool)
    for e in blinks:
        k = int(round(e.time_s * fs))
        half = int(round(e.duration_s * fs / 2))
        in_blink[max(k - half, 0):k + half + 1] = True
    cs = cwt_coefficients(horizontal, SACCADE_SCALE_S, fs)
    thr = _threshold(cs)
    # leftward and rightward movements give opposite-signed main lobes
    saccades = (_events_from(cs, thr, "saccade", fs, exclude=in_blink)
                + _events_from(-cs, thr, "saccade", fs, exclude=in_blink))
    saccades = _suppress(saccades, 2 * SACCADE_SCALE_S)
    return sorted(blinks + saccades, key=lambda e: (e.time_s, e.kind))


# ----------------------------------------------------------- EOG features

DEFAULT_EOG_REGISTRY: tuple[str, ...] = (
    # blink
    "blink.rate.max", "blink.rate.mean", "blink.rate.sum", "blink.rate.varmax",
    "blink.rate.varmean",
    "blink.amplitude.max", "blink.amplitude.min", "blink.amplitude.mean",
    "blink.amplitude.varmax", "blink.amplitude.varmean", "blink.amplitude.power",
    "blink.amplitude.meanpower",
    # saccade
    "saccade.rate.max", "saccade.rate.mean", "saccade.rate.min", "saccade.rate.varmax",
    "saccade.rate.varmean",
    "saccade.amplitude.max", "saccade.amplitude.mean", "saccade.amplitude.min",
    "saccade.amplitude.varmax", "saccade.amplitude.varmean", "saccade.amplitude.power",
    "saccade.amplitude.meanpower",
    # counts and durations
    "blink.count.value", "saccade.count.value",
    "blink.duration.varmax", "blink.duration.varmean",
    "saccade.duration.varmax", "saccade.duration.varmean",
    "blink.duration.max", "blink.duration.mean", "blink.duration.min",
    "saccade.duration.max", "saccade.duration.mean", "saccade.duration.min",
)

_KINDS = ("blink", "saccade")
_QUANTITIES = ("rate", "amplitude", "duration", "count")
_STATS = ("max", "min", "mean", "sum", "varmax", "varmean", "power", "meanpower", "value")


def parse_registry(names) -> tuple[tuple[str, str, str], ...]:
    out = []
    for name in names:
        parts = str(name).split(".")
        if (len(parts) != 3 or parts[0] not in _KINDS or parts[1] not in _QUANTITIES
                or parts[2] not in _STATS):
            raise InvalidConfig(f"bad EOG feature name {name!r}")
        if (parts[1] == "count") != (parts[2] == "value"):
            raise InvalidConfig(f"{name!r}: counts take the 'value' statistic only")
        out.append(tuple(parts))
    return tuple(out)


def rolling_variance(x: np.ndarray, width: int = 3) -> np.ndarray:
    """Population variance of each run of ``width`` consecutive values.

    Shorter inputs give a single variance over all values; empty gives empty.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    if x.size <= width:
        return np.array([x.var()])
    return np.lib.stride_tricks.sliding_window_view(x, width).var(axis=-1)


def _stat(x: np.ndarray, stat: str) -> float:
    if x.size == 0:
        return 0.0
    if stat == "max":
        return float(x.max())
    if stat == "min":
        return float(x.min())
    if stat == "mean":
        return float(x.mean())
    if stat == "sum":
        return float(x.sum())
    if stat == "varmax":
        return float(rolling_variance(x).max())
    if stat == "varmean":
        return float(rolling_variance(x).mean())
    if stat == "power":
        return float((x * x).sum())
    if stat == "meanpower":
        return float((x * x).mean())
    raise InvalidConfig(f"unknown statistic {stat!r}")


def _rate_series(times: np.ndarray) -> np.ndarray:
    """Events per second in each of the 15 one-second windows (hop 0.5 s)."""
    starts = np.arange(N_WINDOWS) * (HOP / FS)
    t = np.asarray(times)[None, :]
    inside = (t >= starts[:, None]) & (t < starts[:, None] + WINDOW / FS)
    return inside.sum(axis=1) / (WINDOW / FS)


def eog_features(events, registry=DEFAULT_EOG_REGISTRY) -> np.ndarray:
    """Segment statistics of detected eye events, one value per registry entry.

    Sequences are ordered by event time first, so the result does not depend
    on the order of ``events``. A kind with no events contributes zeros.
    """
    spec = parse_registry(registry)
    by_kind = {}
    for kind in _KINDS:
        evs = sorted((e for e in events if e.kind == kind),
                     key=lambda e: (e.time_s, e.amplitude, e.duration_s))
        by_kind[kind] = {
            "time": np.array([e.time_s for e in evs]),
            "amplitude": np.array([e.amplitude for e in evs]),
            "duration": np.array([e.duration_s for e in evs]),
        }
    out = np.zeros(len(spec))
    for k, (kind, quantity, stat) in enumerate(spec):
        d = by_kind[kind]
        if quantity == "count":
            out[k] = float(d["time"].size)
            continue
        if d["time"].size == 0:
            continue
        series = _rate_series(d["time"]) if quantity == "rate" else d[quantity]
        out[k] = _stat(series, stat)
    return out


def eog_features_36(events) -> np.ndarray:
    """The default 36-value EOG feature vector."""
    return eog_features(events, DEFAULT_EOG_REGISTRY)


# ----------------------------------------------------------------- fusion

def fuse(eeg: np.ndarray, eog: np.ndarray) -> np.ndarray:
    """Append the segment's EOG vector to each of its 15 EEG window vectors."""
    eeg = np.asarray(eeg, dtype=np.float64)
    eog = np.asarray(eog, dtype=np.float64).reshape(-1)
    if eeg.ndim != 2 or eeg.shape[0] != N_WINDOWS:
        raise DimensionMismatch(f"expected {N_WINDOWS} EEG window vectors, got {eeg.shape}")
    return np.concatenate([eeg, np.broadcast_to(eog, (eeg.shape[0], eog.size))], axis=1)


def recording_features(rec: RawRecording, registry=DEFAULT_EOG_REGISTRY) -> np.ndarray:
    """Fused sequences [segments, 15, 850 + len(registry)] of a conditioned recording."""
    _check_rate(rec.sample_rate_hz)
    eeg = eeg_window_features(window_array(rec.eeg))        # [S, 15, 850]
    n_seg = eeg.shape[0]
    eog = np.asarray(rec.eog, dtype=np.float64)
    eog_feats = np.stack([
        eog_features(detect_eog_events(eog[:, s * SEGMENT:(s + 1) * SEGMENT]), registry)
        for s in range(n_seg)])
    return np.concatenate(
        [eeg, np.broadcast_to(eog_feats[:, None, :], (n_seg, N_WINDOWS, eog_feats.shape[1]))],
        axis=2)


MODALITY_SLICES = {"fused": slice(0, None), "eeg": slice(0, EEG_DIM), "eog": slice(EEG_DIM, None)}


def select_modality(X: np.ndarray, modality: str) -> np.ndarray:
    if modality not in MODALITY_SLICES:
        raise InvalidConfig(f"unknown modality {modality!r}")
    return X[..., MODALITY_SLICES[modality]]


# ------------------------------------------------------------------ cache

def save_feature_cache(directory, participant_id: str, X: np.ndarray, y: np.ndarray
                       ) -> tuple[Path, Path]:
    """Exact sequences as ``<id>.features.npy`` plus a timestep-averaged CSV for inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 3 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch("features and labels disagree")
    npy = directory / f"{participant_id}.features.npy"
    np.save(npy, X)
    csv_path = directory / f"{participant_id}.features.csv"
    mean = X.mean(axis=1)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_index", "perclos"] + [f"f_{k}" for k in range(X.shape[2])])
        for s in range(X.shape[0]):
            w.writerow([s, repr(float(y[s]))] + [repr(float(v)) for v in mean[s]])
    return npy, csv_path


def load_feature_cache(directory, participant_id: str) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    npy = directory / f"{participant_id}.features.npy"
    csv_path = directory / f"{participant_id}.features.csv"
    X = np.load(npy)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["segment_index", "perclos"]:
            raise FormatError(f"{csv_path}: bad header")
        y = np.array([float(row[1]) for row in reader])
    if X.ndim != 3 or X.shape[0] != y.shape[0]:
        raise FormatError(f"{directory}: cache for {participant_id} is inconsistent")
    return X, y
