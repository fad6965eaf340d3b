"""Recordings, synthetic sessions, on-disk formats and PERCLOS labels.

A recording directory holds, per participant::

    P01.eeg.f32   P01.eeg.json     17 x n little-endian float32, channel-major
    P01.eog.f32   P01.eog.json      4 x n
    P01.labels.csv                 segment_index,perclos

plus ``manifest.json`` listing every participant.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ChannelMismatch, FormatError, InvalidConfig, ZeroTotalDuration

EEG_CHANNELS = ("FT7", "FT8", "T7", "T8", "TP7", "TP8", "CP1", "CP2", "P1", "PZ", "P2",
                "PO3", "POZ", "PO4", "O1", "OZ", "O2")
EOG_CHANNELS = ("EOG1", "EOG2", "EOG3", "EOG4")
SEGMENT_S = 8.0
FORMAT_VERSION = 1


@dataclass
class RawRecording:
    """EEG [17, n] and EOG [4, n] sampled together at ``sample_rate_hz``."""

    participant_id: str
    eeg: np.ndarray
    eog: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        self.eeg = np.asarray(self.eeg)
        self.eog = np.asarray(self.eog)
        if self.eeg.ndim != 2 or self.eeg.shape[0] != len(EEG_CHANNELS):
            raise ChannelMismatch(f"EEG must be [{len(EEG_CHANNELS)}, n], got {self.eeg.shape}")
        if self.eog.ndim != 2 or self.eog.shape[0] != len(EOG_CHANNELS):
            raise ChannelMismatch(f"EOG must be [{len(EOG_CHANNELS)}, n], got {self.eog.shape}")
        if self.eeg.shape[1] != self.eog.shape[1]:
            raise ChannelMismatch("EEG and EOG sample counts differ")
        if not self.sample_rate_hz > 0:
            raise InvalidConfig("sample rate must be positive")

    @property
    def n_samples(self) -> int:
        return self.eeg.shape[1]

    def replace(self, eeg=None, eog=None, sample_rate_hz=None) -> "RawRecording":
        return RawRecording(self.participant_id,
                            self.eeg if eeg is None else eeg,
                            self.eog if eog is None else eog,
                            self.sample_rate_hz if sample_rate_hz is None else sample_rate_hz)


@dataclass(frozen=True)
class EyeEventLog:
    """Time spent in each eye state during one segment, in seconds."""

    blink_s: float = 0.0
    clos_s: float = 0.0
    fixation_s: float = 0.0
    saccade_s: float = 0.0

    def __post_init__(self):
        if min(self.blink_s, self.clos_s, self.fixation_s, self.saccade_s) < 0:
            raise InvalidConfig("eye-state durations must be nonnegative")


@dataclass(frozen=True)
class VigilanceLabel:
    perclos: float
    segment_index: int


def compute_perclos(events: EyeEventLog, segment_index: int = 0) -> VigilanceLabel:
    """PERCLOS = (blink + CLOS) / (blink + fixation + saccade + CLOS)."""
    total = events.blink_s + events.fixation_s + events.saccade_s + events.clos_s
    if total <= 0:
        raise ZeroTotalDuration("all eye-state durations are zero")
    value = (events.blink_s + events.clos_s) / total
    return VigilanceLabel(min(max(value, 0.0), 1.0), segment_index)


# -------------------------------------------------------------- synthesis

@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic session generator.

    The latent vigilance v(t) in [0, 1] is drowsiness-oriented like PERCLOS:
    high v means long and frequent eye closures, more 5-17 Hz power and less
    35-51 Hz power.
    """

    duration_min: float = 30.0
    sample_rate_hz: float = 200.0
    latent_mean: float = 0.45
    latent_sd: float = 0.22
    latent_tau_s: float = 60.0
    latent_smooth_s: float = 8.0
    eeg_noise: float = 0.5
    line_noise: float = 0.3
    eog_noise: float = 0.05
    blink_amplitude: float = 4.0
    saccade_amplitude: float = 1.5
    open_mean_s: float = 1.6
    closed_mean_s: float = 0.15

    def __post_init__(self):
        positive = ("duration_min", "sample_rate_hz", "latent_sd", "latent_tau_s",
                    "latent_smooth_s", "blink_amplitude", "saccade_amplitude", "open_mean_s",
                    "closed_mean_s")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidConfig(f"{name} must be positive")
        for name in ("eeg_noise", "line_noise", "eog_noise"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be nonnegative")
        if not 0 <= self.latent_mean <= 1:
            raise InvalidConfig("latent_mean must lie in [0, 1]")
        if self.duration_min * 60 < SEGMENT_S:
            raise InvalidConfig("session shorter than one segment")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_min * 60 * self.sample_rate_hz))

    @property
    def n_segments(self) -> int:
        return int(self.duration_min * 60 // SEGMENT_S)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown synth keys: {sorted(unknown)}")
        return cls(**d)


# per-channel gains of the drowsy (5-17 Hz) and alert (35-51 Hz) rhythms:
# posterior sites carry more of the slow rhythm, temporal sites more of the fast
_SLOW_GAIN = {"FT": 0.6, "T": 0.5, "TP": 0.7, "CP": 0.9, "P": 1.1, "PO": 1.3, "O": 1.4}
_FAST_GAIN = {"FT": 1.2, "T": 1.3, "TP": 1.1, "CP": 0.8, "P": 0.7, "PO": 0.6, "O": 0.6}
_EOG_BLINK_GAIN = np.array([1.0, 0.9, 0.55, 0.5])
_EOG_SACCADE_GAIN = np.array([0.2, -0.2, 1.0, -1.0])


def channel_region(name: str) -> str:
    """Scalp region from the channel-name prefix; midline sites join their prefix group."""
    prefix = name.rstrip("0123456789").upper()
    if prefix.endswith("Z") and len(prefix) > 1:
        prefix = prefix[:-1]
    return prefix


def _latent(cfg: SynthConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    """Smoothed OU process at 1 Hz, clipped to [0, 1], interpolated to n samples."""
    secs = int(np.ceil(n / cfg.sample_rate_hz)) + 2
    a = np.exp(-1.0 / cfg.latent_tau_s)
    noise = rng.standard_normal(secs) * cfg.latent_sd * np.sqrt(1 - a * a)
    x = np.empty(secs)
    x[0] = cfg.latent_mean + cfg.latent_sd * rng.standard_normal()
    for k in range(1, secs):
        x[k] = cfg.latent_mean + a * (x[k - 1] - cfg.latent_mean) + noise[k]
    w = max(1, int(round(cfg.latent_smooth_s)))
    x = np.convolve(np.pad(x, (w // 2, w - 1 - w // 2), mode="edge"), np.ones(w) / w, "valid")
    x = np.clip(x, 0.0, 1.0)
    t = np.arange(n) / cfg.sample_rate_hz
    return np.interp(t, np.arange(secs), x)


def _band_noise(rng: np.random.Generator, shape, fs: float, lo: float, hi: float) -> np.ndarray:
    """Unit-variance Gaussian noise restricted to [lo, hi) Hz by FFT masking."""
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[..., (f < lo) | (f >= hi)] = 0.0
    x = np.fft.irfft(spec, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _eye_timeline(cfg: SynthConfig, rng: np.random.Generator, v_at, total_s: float):
    """Alternating open and closed intervals driven by the latent state.

    Open intervals are fixations split by saccades; closed intervals are
    blinks, or CLOS when they last longer than 0.4 s. Returns a list of
    (kind, start_s, duration_s) with kind in {fixation, saccade, blink, clos}.
    """
    events = []
    t = 0.0
    while t < total_s:
        v = v_at(t)
        open_s = rng.gamma(16.0, (cfg.open_mean_s * (1.0 - v) + 0.3) / 16.0)
        end_open = t + open_s
        while t < end_open:
            fix = rng.gamma(3.0, (0.5 + 0.6 * v) / 3.0)
            fix = min(fix, end_open - t)
            events.append(("fixation", t, fix))
            t += fix
            if t < end_open:
                sac = min(0.03 + 0.03 * rng.random(), end_open - t)
                events.append(("saccade", t, sac))
                t += sac
        v = v_at(t)
        closed = rng.gamma(16.0, (cfg.closed_mean_s + 0.6 * v) / 16.0)
        closed = max(closed, 0.06)
        events.append(("clos" if closed > 0.4 else "blink", t, closed))
        t += closed
    return events


def _segment_durations(events, n_segments: int) -> np.ndarray:
    """Seconds per (segment, kind) with kinds ordered blink, clos, fixation, saccade."""
    kinds = {"blink": 0, "clos": 1, "fixation": 2, "saccade": 3}
    out = np.zeros((n_segments, 4))
    for kind, start, dur in events:
        end = start + dur
        k = kinds[kind]
        seg = int(start // SEGMENT_S)
        while seg < n_segments and seg * SEGMENT_S < end:
            lo = max(start, seg * SEGMENT_S)
            hi = min(end, (seg + 1) * SEGMENT_S)
            out[seg, k] += max(hi - lo, 0.0)
            seg += 1
    return out


def _eog_signal(cfg: SynthConfig, rng: np.random.Generator, events, n: int) -> np.ndarray:
    fs = cfg.sample_rate_hz
    eog = np.zeros((len(EOG_CHANNELS), n))
    trace_blink = np.zeros(n)
    trace_sacc = np.zeros(n)
    for kind, start, dur in events:
        if kind in ("blink", "clos"):
            # eyelid closure: Gaussian bump whose half-maximum width equals the closure
            sigma = dur / 2.3548
            centre = start + dur / 2
            lo = max(int((centre - 4 * sigma) * fs), 0)
            hi = min(int((centre + 4 * sigma) * fs) + 1, n)
            if lo >= hi:
                continue
            t = np.arange(lo, hi) / fs
            amp = cfg.blink_amplitude * (1.0 + 0.1 * rng.standard_normal())
            trace_blink[lo:hi] += amp * np.exp(-0.5 * ((t - centre) / sigma) ** 2)
        elif kind == "saccade":
            sigma = 0.02
            centre = start + dur / 2
            lo = max(int((centre - 4 * sigma) * fs), 0)
            hi = min(int((centre + 4 * sigma) * fs) + 1, n)
            if lo >= hi:
                continue
            t = np.arange(lo, hi) / fs
            amp = cfg.saccade_amplitude * (1.0 + 0.1 * rng.standard_normal())
            amp *= 1.0 if rng.random() < 0.5 else -1.0
            trace_sacc[lo:hi] += amp * np.exp(-0.5 * ((t - centre) / sigma) ** 2)
    eog += _EOG_BLINK_GAIN[:, None] * trace_blink + _EOG_SACCADE_GAIN[:, None] * trace_sacc
    eog += cfg.eog_noise * rng.standard_normal(eog.shape)
    eog += 0.2 * _band_noise(rng, eog.shape, fs, 0.05, 0.5)  # electrode drift
    return eog


def synth_session(config: SynthConfig, seed: int, participant_id: str = "P01"
                  ) -> tuple[RawRecording, list[VigilanceLabel]]:
    """Generate one synthetic session and its per-segment PERCLOS labels.

    The output is a pure function of (config, seed); ``participant_id`` is
    only a label. EEG and EOG are returned as float32, which is also the
    on-disk precision, so a save/load round trip is exact.
    """
    rec, labels, _ = synth_session_with_truth(config, seed, participant_id)
    return rec, labels


def synth_session_with_truth(config: SynthConfig, seed: int, participant_id: str = "P01"):
    """`synth_session` plus the generator's ground truth.

    The third value is a dict with the latent trajectory ``v`` (one value per
    sample) and the eye-event timeline ``events`` as (kind, start_s, duration_s).
    """
    cfg = config
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    fs = cfg.sample_rate_hz
    n = cfg.n_samples
    v = _latent(cfg, rng, n)

    regions = [channel_region(c) for c in EEG_CHANNELS]
    slow_gain = np.array([_SLOW_GAIN[r] for r in regions])[:, None]
    fast_gain = np.array([_FAST_GAIN[r] for r in regions])[:, None]
    shape = (len(EEG_CHANNELS), n)
    nyq = fs / 2
    background = _band_noise(rng, shape, fs, 1.0, min(70.0, nyq))
    slow = _band_noise(rng, shape, fs, 5.0, 17.0)
    fast = _band_noise(rng, shape, fs, 35.0, min(51.0, nyq))
    eeg = 0.7 * background
    eeg += slow_gain * (0.3 + 1.7 * v) * slow
    eeg += fast_gain * (1.6 - 1.3 * v) * fast
    eeg += cfg.eeg_noise * rng.standard_normal(shape)
    t = np.arange(n) / fs
    if 50.0 < nyq:
        eeg += cfg.line_noise * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi, (shape[0], 1)))
    eeg += rng.normal(0.0, 2.0, (shape[0], 1))  # electrode offsets

    def v_at(sec: float) -> float:
        return float(v[min(int(sec * fs), n - 1)])

    events = _eye_timeline(cfg, rng, v_at, n / fs)
    eog = _eog_signal(cfg, rng, events, n)

    durations = _segment_durations(events, cfg.n_segments)
    labels = [compute_perclos(EyeEventLog(*row), k) for k, row in enumerate(durations)]
    rec = RawRecording(participant_id, eeg.astype(np.float32), eog.astype(np.float32), fs)
    return rec, labels, {"v": v, "events": events}


# ---------------------------------------------------------------- formats

def _sidecar(path: Path) -> Path:
    s = str(path)
    return Path(s[:-4] + ".json") if s.endswith(".f32") else Path(s + ".json")


def _read_signal(path: Path, expected: tuple[str, ...]) -> tuple[np.ndarray, dict]:
    side = _sidecar(path)
    try:
        with open(side) as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: malformed header ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{side}: header must be a JSON object")
    for key in ("channels", "n_samples", "sample_rate_hz", "participant_id", "version"):
        if key not in header:
            raise FormatError(f"{side}: header lacks {key!r}")
    if header["version"] != FORMAT_VERSION:
        raise FormatError(f"{side}: unsupported version {header['version']}")
    channels = tuple(header["channels"])
    if len(channels) != len(expected):
        raise ChannelMismatch(f"{side}: {len(channels)} channels, expected {len(expected)}")
    raw = np.fromfile(path, dtype="<f4")
    n = int(header["n_samples"])
    if raw.size == 0 or raw.size != n * len(channels):
        raise FormatError(f"{path}: {raw.size} values, header implies {n * len(channels)}")
    return raw.reshape(len(channels), n).astype(np.float32), header


def save_recording(rec: RawRecording, directory, stem: str | None = None) -> tuple[Path, Path]:
    """Write EEG and EOG as float32 binaries with JSON sidecars; returns the two data paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or rec.participant_id
    paths = []
    for kind, data, names in (("eeg", rec.eeg, EEG_CHANNELS), ("eog", rec.eog, EOG_CHANNELS)):
        path = directory / f"{stem}.{kind}.f32"
        np.ascontiguousarray(data, dtype="<f4").tofile(path)
        header = {"version": FORMAT_VERSION, "participant_id": rec.participant_id,
                  "sample_rate_hz": float(rec.sample_rate_hz), "channels": list(names),
                  "n_samples": int(data.shape[1]), "dtype": "float32-le", "layout": "channel-major"}
        with open(_sidecar(path), "w") as fh:
            json.dump(header, fh, indent=1, sort_keys=True)
            fh.write("\n")
        paths.append(path)
    return paths[0], paths[1]


def load_recording(eeg_path, eog_path=None) -> RawRecording:
    """Read a recording written by `save_recording`.

    ``eog_path`` defaults to the EEG path with ``.eeg.`` replaced by ``.eog.``.
    """
    eeg_path = Path(eeg_path)
    if eog_path is None:
        eog_path = Path(str(eeg_path).replace(".eeg.", ".eog."))
    eeg, h1 = _read_signal(eeg_path, EEG_CHANNELS)
    eog, h2 = _read_signal(Path(eog_path), EOG_CHANNELS)
    if h1["sample_rate_hz"] != h2["sample_rate_hz"] or h1["participant_id"] != h2["participant_id"]:
        raise FormatError("EEG and EOG headers disagree")
    return RawRecording(h1["participant_id"], eeg, eog, float(h1["sample_rate_hz"]))


def save_labels(labels: list[VigilanceLabel], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment_index", "perclos"])
        for lab in labels:
            w.writerow([lab.segment_index, repr(float(lab.perclos))])


def load_labels(path) -> list[VigilanceLabel]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["segment_index", "perclos"]:
        raise FormatError(f"{path}: expected header segment_index,perclos")
    out = []
    for row in rows[1:]:
        try:
            k, p = int(row[0]), float(row[1])
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: bad label row {row!r}") from exc
        if not 0.0 <= p <= 1.0:
            raise FormatError(f"{path}: PERCLOS {p} outside [0, 1]")
        out.append(VigilanceLabel(p, k))
    return out


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    eeg_path: str
    eog_path: str
    labels_path: str


@dataclass(frozen=True)
class DatasetManifest:
    participants: tuple[ManifestEntry, ...]
    sample_rate_hz: float
    eeg_channels: tuple[str, ...] = EEG_CHANNELS
    eog_channels: tuple[str, ...] = EOG_CHANNELS
    root: Path = Path(".")
    preprocessed: bool = False

    def __post_init__(self):
        ids = [p.id for p in self.participants]
        if len(set(ids)) != len(ids):
            raise FormatError("participant ids in manifest are not unique")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load(self, entry: ManifestEntry) -> tuple[RawRecording, list[VigilanceLabel]]:
        rec = load_recording(self.resolve(entry.eeg_path), self.resolve(entry.eog_path))
        return rec, load_labels(self.resolve(entry.labels_path))


def write_manifest(manifest: DatasetManifest, directory) -> Path:
    path = Path(directory) / "manifest.json"
    doc = {"participants": [asdict(p) for p in manifest.participants],
           "sample_rate_hz": float(manifest.sample_rate_hz),
           "eeg_channels": list(manifest.eeg_channels),
           "eog_channels": list(manifest.eog_channels),
           "preprocessed": bool(manifest.preprocessed)}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    try:
        entries = tuple(ManifestEntry(str(p["id"]), str(p["eeg_path"]), str(p["eog_path"]),
                                      str(p["labels_path"])) for p in doc["participants"])
        rate = float(doc["sample_rate_hz"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest missing fields ({exc})") from exc
    return DatasetManifest(entries, rate,
                           tuple(doc.get("eeg_channels", EEG_CHANNELS)),
                           tuple(doc.get("eog_channels", EOG_CHANNELS)),
                           path.parent, bool(doc.get("preprocessed", False)))


def synth_dataset(directory, n_participants: int, config: SynthConfig, seed: int
                  ) -> DatasetManifest:
    """Write ``n_participants`` synthetic sessions plus a manifest into ``directory``.

    Participant k gets the k-th child of ``SeedSequence(seed)``.
    """
    if n_participants < 1:
        raise InvalidConfig("need at least one participant")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(int(seed) & (2**64 - 1)).spawn(n_participants)
    entries = []
    for k, child in enumerate(children):
        pid = f"P{k + 1:02d}"
        rec, labels = synth_session(config, int(child.generate_state(1, np.uint64)[0]), pid)
        eeg_p, eog_p = save_recording(rec, directory, pid)
        lab_p = directory / f"{pid}.labels.csv"
        save_labels(labels, lab_p)
        entries.append(ManifestEntry(pid, eeg_p.name, eog_p.name, lab_p.name))
    manifest = DatasetManifest(tuple(entries), config.sample_rate_hz, root=directory)
    write_manifest(manifest, directory)
    return manifest


def participant_seed(seed: int, index: int, count: int) -> int:
    """Seed that `synth_dataset` hands to participant ``index`` of ``count``."""
    child = np.random.SeedSequence(int(seed) & (2**64 - 1)).spawn(count)[index]
    return int(child.generate_state(1, np.uint64)[0])

