"""Loss, Adam, fold plans, metrics and the per-fold training loop."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import Tape, Tensor, ops
from .errors import (EmptyBatch, InvalidConfig, ShapeMismatch, TooFewParticipants,
                     TooFewSamples, ZeroVariance)
from .model import ModelConfig, ModelParams, clip_predictions, forward, predict

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 20240501

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfig("batch_size and epochs must be >= 1")
        if not (self.learning_rate > 0 and self.eps > 0 and 0 <= self.beta1 < 1
                and 0 <= self.beta2 < 1):
            raise InvalidConfig("bad optimizer constants")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ losses

def mse_loss(pred, target) -> Tensor:
    """Mean squared error as a tape scalar; ``target`` is treated as a constant."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0 or target.size == 0:
        raise EmptyBatch("loss over an empty batch")
    if pred.shape != target.shape:
        raise ShapeMismatch(f"predictions {pred.shape} vs targets {target.shape}")
    d = pred - target
    return ops.mean(d * d)


# --------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState, t: int, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing (None) gradient counts as zero: moments still decay.
    """
    if t < 1:
        raise InvalidConfig("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        v *= beta2
        if g is not None:
            m += (1.0 - beta1) * g
            v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t


# ----------------------------------------------------------------- metrics

def rmse(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeMismatch("rmse arguments differ in shape")
    if y.size == 0:
        raise EmptyBatch("rmse of nothing")
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def pcc(y, yhat) -> float:
    """Pearson correlation; constant input raises ZeroVariance."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ShapeMismatch("pcc arguments differ in shape")
    if y.size < 2:
        raise TooFewSamples("pcc needs at least two samples")
    a = y - y.mean()
    b = yhat - yhat.mean()
    sa = np.sqrt((a * a).sum())
    sb = np.sqrt((b * b).sum())
    if sa == 0 or sb == 0:
        raise ZeroVariance("pcc of a constant series")
    return float(np.clip((a * b).sum() / (sa * sb), -1.0, 1.0))


# ------------------------------------------------------------------- folds

@dataclass(frozen=True)
class Fold:
    name: str
    train: tuple[tuple[str, int], ...]
    test: tuple[tuple[str, int], ...]


@dataclass(frozen=True)
class FoldPlan:
    """Train/test partitions; sample ids are (participant, segment index) pairs."""

    scheme: str
    folds: tuple[Fold, ...]

    def check(self, all_ids) -> None:
        """Raise unless every fold is disjoint and the test sets cover ``all_ids`` once."""
        seen: list = []
        for f in self.folds:
            if set(f.train) & set(f.test):
                raise InvalidConfig(f"fold {f.name} overlaps")
            seen.extend(f.test)
        if sorted(seen) != sorted(all_ids) or len(set(seen)) != len(seen):
            raise InvalidConfig("test sets do not cover the samples exactly once")


def fold_sizes(n: int, k: int) -> list[int]:
    """k near-equal contiguous blocks; the remainder goes to the earliest blocks."""
    if n < k:
        raise TooFewSamples(f"{n} samples cannot fill {k} folds")
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def make_folds(counts: dict[str, int], scheme: str, k: int | None = 5,
               seed: int | None = None) -> FoldPlan:
    """Fold plan over participants with ``counts[id]`` segments each.

    intra: each participant's segments are split into k contiguous time
    blocks; fold "P/j" trains on that participant's other blocks.
    loso: experiment h tests participant h and trains on all others.
    Plans are deterministic; ``seed`` is accepted for interface symmetry.
    """
    ids = list(counts)
    if scheme == "intra":
        k = 5 if k is None else int(k)
        if k < 2:
            raise InvalidConfig("intra scheme needs k >= 2")
        folds = []
        for pid in ids:
            sizes = fold_sizes(counts[pid], k)
            bounds = np.concatenate([[0], np.cumsum(sizes)])
            for j in range(k):
                test = tuple((pid, s) for s in range(bounds[j], bounds[j + 1]))
                train = tuple((pid, s) for s in range(counts[pid])
                              if not bounds[j] <= s < bounds[j + 1])
                folds.append(Fold(f"{pid}/{j + 1}", train, test))
        return FoldPlan("intra", tuple(folds))
    if scheme == "loso":
        if len(ids) < 2:
            raise TooFewParticipants("LOSO needs at least two participants")
        folds = []
        for pid in ids:
            test = tuple((pid, s) for s in range(counts[pid]))
            train = tuple((q, s) for q in ids if q != pid for s in range(counts[q]))
            folds.append(Fold(pid, train, test))
        return FoldPlan("loso", tuple(folds))
    raise InvalidConfig(f"unknown scheme {scheme!r}")


# ----------------------------------------------------------- standardizing

@dataclass
class Standardizer:
    """Per-feature z-scoring with statistics from training samples only."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        flat = X.reshape(-1, X.shape[-1])
        mean = flat.mean(axis=0)
        sd = flat.std(axis=0)
        return cls(mean, np.where(sd > 0, sd, 1.0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


# ------------------------------------------------------------------ training

@dataclass
class FoldResult:
    name: str
    rmse: float
    pcc: float
    baseline_rmse: float
    predictions: np.ndarray
    targets: np.ndarray
    loss_history: list[float]
    params: ModelParams | None
    standardizer: Standardizer


@dataclass
class RunResult:
    scheme: str
    folds: list[FoldResult]

    def _vals(self, attr):
        return np.array([getattr(f, attr) for f in self.folds], dtype=np.float64)

    def mean(self, attr: str) -> float:
        return float(np.nanmean(self._vals(attr)))

    def sd(self, attr: str) -> float:
        """Population SD over folds."""
        return float(np.nanstd(self._vals(attr)))


def fold_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & (2**63 - 1), int(index)])


def train_model(X: np.ndarray, y: np.ndarray, model_cfg: ModelConfig, train_cfg: TrainConfig,
                seed_seq: np.random.SeedSequence, on_epoch=None) -> tuple[ModelParams, list[float]]:
    """Fit fresh parameters on standardized inputs ``X`` [n, L, D] and labels ``y``."""
    if len(X) == 0:
        raise EmptyBatch("no training samples")
    init_ss, shuffle_ss = seed_seq.spawn(2)
    params = ModelParams.init(model_cfg, np.random.default_rng(init_ss))
    shuffle = np.random.default_rng(shuffle_ss)
    state = AdamState()
    names = list(params.tensors)
    values = {k: params[k].data for k in names}
    t = 0
    history = []
    for epoch in range(train_cfg.epochs):
        order = shuffle.permutation(len(X))
        total = 0.0
        for lo in range(0, len(X), train_cfg.batch_size):
            idx = order[lo:lo + train_cfg.batch_size]
            params.zero_grad()
            tape = Tape()
            out = forward(X[idx], params, training=True, tape=tape)
            loss = mse_loss(out, y[idx])
            loss.backward()
            t += 1
            adam_step(values, {k: params[k].grad for k in names}, state, t,
                      train_cfg.learning_rate, train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            total += float(loss.data) * len(idx)
        history.append(total / len(X))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    params.zero_grad()
    return params, history


def _safe_pcc(y, p) -> float:
    try:
        return pcc(y, p)
    except ZeroVariance:
        return float("nan")


def run_fold(name: str, index: int, X_train, y_train, X_test, y_test,
             model_cfg: ModelConfig, train_cfg: TrainConfig) -> FoldResult:
    std = Standardizer.fit(X_train)
    params, history = train_model(std.apply(X_train), y_train, model_cfg, train_cfg,
                                  fold_seed(train_cfg.seed, index))
    pred = clip_predictions(predict(params, std.apply(X_test)))
    base = rmse(y_test, np.full_like(y_test, y_train.mean()))
    log.info("fold %s: rmse %.4f pcc %.4f (baseline rmse %.4f)", name, rmse(y_test, pred),
             _safe_pcc(y_test, pred), base)
    return FoldResult(name, rmse(y_test, pred), _safe_pcc(y_test, pred), base, pred,
                      np.asarray(y_test), history, params, std)


def worker_count() -> int:
    """Worker threads allowed by VIGICAPS_THREADS (default 1)."""
    raw = os.environ.get("VIGICAPS_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidConfig(f"VIGICAPS_THREADS={raw!r} is not an integer") from None


def gather(data: dict[str, tuple[np.ndarray, np.ndarray]], ids) -> tuple[np.ndarray, np.ndarray]:
    """Stack (X, y) rows for a list of (participant, segment) ids."""
    X = np.stack([data[p][0][s] for p, s in ids])
    y = np.array([data[p][1][s] for p, s in ids], dtype=np.float64)
    return X, y


def train_and_evaluate(data: dict[str, tuple[np.ndarray, np.ndarray]], model_cfg: ModelConfig,
                       train_cfg: TrainConfig, plan: FoldPlan,
                       workers: int | None = None, on_fold=None,
                       keep_params: bool = True) -> RunResult:
    """Train a fresh model per fold and score its eval-mode test predictions.

    ``data`` maps participant id to (sequences [n, L, D], labels [n]). Each
    fold's initial weights and batch order come from (train_cfg.seed, fold
    position), so results do not depend on how folds are scheduled.

    ``on_fold(index, fold, result)`` runs as each fold finishes, e.g. to write
    a checkpoint; with ``keep_params=False`` the trained parameters are
    dropped afterwards to bound memory on long plans.
    """
    if not data:
        raise EmptyBatch("empty dataset")
    workers = worker_count() if workers is None else workers
    jobs = list(enumerate(plan.folds))

    def run(job):
        i, fold = job
        Xtr, ytr = gather(data, fold.train)
        Xte, yte = gather(data, fold.test)
        res = run_fold(fold.name, i, Xtr, ytr, Xte, yte, model_cfg, train_cfg)
        if on_fold is not None:
            on_fold(i, fold, res)
        if not keep_params:
            res.params = None
        return res

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    return RunResult(plan.scheme, results)
