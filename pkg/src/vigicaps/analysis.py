"""Post-hoc studies: band/region correlation maps, one-way ANOVA, noise sweeps, capsule embeddings."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .dataio import EEG_CHANNELS, channel_region
from .errors import DegenerateGroups, DimensionMismatch, InvalidConfig, TooFewSamples, ZeroVariance
from .features import BAND_LOW_HZ, EEG_DIM, N_BANDS, N_WINDOWS
from .model import ModelParams, clip_predictions, predict
from .training import Standardizer, pcc, rmse

NOISE_LEVELS = (0.0, 0.2, 0.4, 0.6, 0.8)
REGION_ORDER = ("FT", "T", "TP", "CP", "P", "PO", "O")


# ------------------------------------------------------- band correlation

def segment_de(X: np.ndarray) -> np.ndarray:
    """Window-averaged DE features [n, 17, 25] from fused or EEG sequences [n, 15, >=850]."""
    if X.ndim != 3 or X.shape[2] < EEG_DIM:
        raise DimensionMismatch(f"expected [n, {N_WINDOWS}, >= {EEG_DIM}] sequences")
    eeg = X[:, :, :EEG_DIM].reshape(X.shape[0], X.shape[1], len(EEG_CHANNELS), N_BANDS, 2)
    return eeg[..., 1].mean(axis=1)


def band_correlation(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """PCC between each (channel, band) feature series and the labels.

    ``features`` is [n_segments, channels, bands]. A constant feature series
    has no defined correlation and is reported as 0.
    """
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] != y.shape[0]:
        raise DimensionMismatch("features must be [n, channels, bands] matching the labels")
    if y.size < 2:
        raise TooFewSamples("band correlation needs at least two segments")
    yc = y - y.mean()
    sy = np.sqrt((yc * yc).sum())
    if sy == 0:
        raise ZeroVariance("labels are constant")
    fc = f - f.mean(axis=0)
    sf = np.sqrt((fc * fc).sum(axis=0))
    num = np.einsum("n,ncb->cb", yc, fc)
    out = np.where(sf > 0, num / (np.where(sf > 0, sf, 1.0) * sy), 0.0)
    return np.clip(out, -1.0, 1.0)


def average_maps(maps) -> np.ndarray:
    return np.mean(np.stack(list(maps)), axis=0)


def band_range_mean(corr_map: np.ndarray, lo_hz: float, hi_hz: float) -> float:
    """Mean PCC over bands whose [low, low + 2) range lies inside [lo_hz, hi_hz)."""
    sel = (BAND_LOW_HZ >= lo_hz) & (BAND_LOW_HZ + 2.0 <= hi_hz)
    return float(corr_map[..., sel].mean())


def write_band_corr(path, corr_map: np.ndarray, channels=EEG_CHANNELS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "band_low_hz", "pcc"])
        for c, name in enumerate(channels):
            for b in range(corr_map.shape[1]):
                w.writerow([name, f"{BAND_LOW_HZ[b]:g}", repr(float(corr_map[c, b]))])


# ------------------------------------------------------------------ ANOVA

def anova_f(groups) -> tuple[float, float]:
    """One-way ANOVA: F = (SSB / (k - 1)) / (SSW / (N - k)), p from the F upper tail."""
    groups = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    if len(groups) < 2:
        raise DegenerateGroups("ANOVA needs at least two groups")
    if any(g.size < 2 for g in groups):
        raise DegenerateGroups("every ANOVA group needs at least two values")
    allv = np.concatenate(groups)
    grand = allv.mean()
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(((g - g.mean()) ** 2).sum() for g in groups)
    k, n = len(groups), allv.size
    if ssw == 0:
        raise DegenerateGroups("zero within-group variance")
    df1, df2 = k - 1, n - k
    f = (ssb / df1) / (ssw / df2)
    return float(f), float(stats.f.sf(f, df1, df2))


def region_groups(values, channels=EEG_CHANNELS) -> dict[str, np.ndarray]:
    """Split channel-indexed values [..., channels] into scalp-region groups.

    Regions come from channel-name prefixes (FT, T, TP, CP, P, PO, O);
    midline sites such as PZ, POZ and OZ join their prefix group.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != len(channels):
        raise DimensionMismatch("last axis must index channels")
    regions = [channel_region(c) for c in channels]
    out = {}
    for r in REGION_ORDER + tuple(sorted(set(regions) - set(REGION_ORDER))):
        idx = [i for i, x in enumerate(regions) if x == r]
        if idx:
            out[r] = values[..., idx].reshape(-1)
    return out


def region_anova(values, channels=EEG_CHANNELS) -> tuple[float, float, dict[str, np.ndarray]]:
    groups = region_groups(values, channels)
    f, p = anova_f(list(groups.values()))
    return f, p, groups


# ------------------------------------------------------------ noise sweep

@dataclass(frozen=True)
class NoisePoint:
    sigma: float
    rmse: float
    pcc: float


def eval_metrics(y, pred) -> tuple[float, float]:
    """RMSE and PCC of predictions; PCC is NaN when either series is constant."""
    try:
        r = pcc(y, pred)
    except ZeroVariance:
        r = float("nan")
    return rmse(y, pred), r


def noise_sweep(params: ModelParams, standardizer: Standardizer, X: np.ndarray, y: np.ndarray,
                sigmas=NOISE_LEVELS, seed: int = 0) -> list[NoisePoint]:
    """Test metrics after adding N(0, sigma^2) noise to the model's input features.

    Noise is added after standardization, so sigma is in units of each
    feature's training SD. Every level reuses one seeded standard-normal draw
    scaled by sigma; sigma = 0 adds nothing and reproduces plain evaluation.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise InvalidConfig("noise levels must be nonnegative")
    Z = standardizer.apply(np.asarray(X, dtype=np.float64))
    z = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**63 - 1))).standard_normal(Z.shape)
    out = []
    for s in sigmas:
        inputs = Z if s == 0 else Z + s * z
        pred = clip_predictions(predict(params, inputs))
        out.append(NoisePoint(s, *eval_metrics(y, pred)))
    return out


def clean_metrics(params: ModelParams, standardizer: Standardizer, X, y) -> tuple[float, float]:
    pred = clip_predictions(predict(params, standardizer.apply(np.asarray(X, dtype=np.float64))))
    return eval_metrics(y, pred)


def write_noise_sweep(path, points) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sigma", "rmse", "pcc"])
        for p in points:
            w.writerow([f"{p.sigma:g}", repr(p.rmse), repr(p.pcc)])


# ------------------------------------------------------------- embeddings

def first_principal_scores(M: np.ndarray, iters: int = 1000, tol: float = 1e-12,
                           seed: int = 0) -> np.ndarray:
    """Scores of the rows of ``M`` [n, p] on the first principal axis (power iteration).

    The sign is fixed so the largest-magnitude loading is positive.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] < 1:
        raise DimensionMismatch("PCA input must be a nonempty matrix")
    C = M - M.mean(axis=0)
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(C.shape[1])
    w /= np.linalg.norm(w)
    for _ in range(iters):
        nxt = C.T @ (C @ w)
        norm = np.linalg.norm(nxt)
        if norm == 0:
            return np.zeros(M.shape[0])
        nxt /= norm
        done = np.linalg.norm(nxt - w) < tol
        w = nxt
        if done:
            break
    if w[np.argmax(np.abs(w))] < 0:
        w = -w
    return C @ w


def minmax01(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    span = x.max() - x.min() if x.size else 0.0
    if span == 0:
        return np.zeros_like(x)
    return np.clip((x - x.min()) / span, 0.0, 1.0)


@dataclass
class EmbeddingExport:
    u: np.ndarray               # [n, N, d] lower capsules
    v: np.ndarray               # [n, K, H] higher capsules
    lower_projections: np.ndarray   # [d, n], each in [0, 1]
    higher_projection: np.ndarray   # [n] in [0, 1]
    predictions: np.ndarray     # [n] clipped


def export_embeddings(params: ModelParams, standardizer: Standardizer, X: np.ndarray
                      ) -> EmbeddingExport:
    """Capsule embeddings per sample with 1-D PCA projections normalized to [0, 1].

    Each lower-capsule dimension k contributes the matrix u[:, :, k] (one
    column per lower capsule); the higher capsules contribute flattened v.
    """
    emb: dict = {}
    pred = predict(params, standardizer.apply(np.asarray(X, dtype=np.float64)), embeddings=emb)
    u, v = emb["u"], emb["v"]
    lower = np.stack([minmax01(first_principal_scores(u[:, :, k])) for k in range(u.shape[2])])
    higher = minmax01(first_principal_scores(v.reshape(v.shape[0], -1)))
    return EmbeddingExport(u, v, lower, higher, clip_predictions(pred))


def write_embeddings(directory, export: EmbeddingExport, labels=None, prefix: str = "") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / f"{prefix}embeddings_u.npy", export.u)
    np.save(directory / f"{prefix}embeddings_v.npy", export.v)
    path = directory / f"{prefix}embeddings.csv"
    d = export.lower_projections.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "perclos"] + [f"lower_caps_d{k + 1}" for k in range(d)]
                   + ["higher_caps", "prediction"])
        for i in range(export.higher_projection.size):
            lab = "" if labels is None else repr(float(labels[i]))
            w.writerow([i, lab] + [repr(float(export.lower_projections[k, i])) for k in range(d)]
                       + [repr(float(export.higher_projection[i])),
                          repr(float(export.predictions[i]))])
    return path
