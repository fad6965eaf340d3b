"""Command-line entry point: ``vigicaps <subcommand> [flags]``.

Exit codes: 0 success, 2 usage, 3 missing or unreadable files, 4 domain
errors. Failures print one JSON line to stderr, e.g.
``{"error": "io", "exit_code": 3, "type": "FileNotFoundError", "message": "..."}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, checkpoint
from .dataio import (EEG_CHANNELS, DatasetManifest, ManifestEntry, SynthConfig, read_manifest,
                     save_labels, save_recording, synth_dataset, write_manifest)
from .errors import DimensionMismatch, FormatError, InvalidConfig, IOFormatError, VigilanceError
from .features import (FUSED_DIM, load_feature_cache, recording_features, save_feature_cache,
                       select_modality)
from .model import ModelConfig, clip_predictions, predict
from .preprocess import preprocess
from .training import (RunResult, TrainConfig, gather, make_folds, train_and_evaluate)

log = logging.getLogger("vigicaps")

DEFAULT_SEED = 20240501
EXIT_USAGE, EXIT_IO, EXIT_DOMAIN = 2, 3, 4
FEATURE_INDEX = "features.json"

# approximate 2-D scalp positions (nose at +y, left at -x, unit radius at the
# ear line) for external topographic plotting: (polar angle from vertex, azimuth)
_POLAR = {"FT7": (90, -72), "FT8": (90, 72), "T7": (90, -90), "T8": (90, 90),
          "TP7": (90, -108), "TP8": (90, 108), "CP1": (34, -140), "CP2": (34, 140),
          "P1": (50, -157), "PZ": (45, 180), "P2": (50, 157), "PO3": (67, -159),
          "POZ": (67.5, 180), "PO4": (67, 159), "O1": (90, -162), "OZ": (90, 180),
          "O2": (90, 162)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ config

def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    doc = checkpoint.load_toml(path)
    allowed = {"seed", "synth", "model", "training", "protocol"}
    unknown = set(doc) - allowed
    if unknown:
        raise InvalidConfig(f"{path}: unknown config keys {sorted(unknown)}")
    return doc


def pick(flag, table: dict, key: str, default):
    """Flag value if given, else the config-file value, else the default."""
    if flag is not None:
        return flag
    return table.get(key, default)


def _seed(args, cfg) -> int:
    return int(pick(args.seed, cfg, "seed", DEFAULT_SEED))


def model_config(args, cfg, input_dim: int) -> ModelConfig:
    d = dict(cfg.get("model", {}))
    d["input_dim"] = input_dim
    if getattr(args, "routing_iters", None) is not None:
        d["routing_iters"] = args.routing_iters
    return ModelConfig.from_dict(d)


def train_config(args, cfg) -> TrainConfig:
    d = dict(cfg.get("training", {}))
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    d["seed"] = _seed(args, cfg)
    return TrainConfig.from_dict(d)


# --------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_features(directory) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    directory = Path(directory)
    index = directory / FEATURE_INDEX
    if not index.is_file():
        raise FileNotFoundError(f"feature index {index} not found")
    with open(index) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{index}: {exc}") from exc
    return {pid: load_feature_cache(directory, pid) for pid in doc["participants"]}


def _fold_file(name: str, scheme: str) -> str:
    tag = name.replace("/", "_f")
    return f"{scheme}_{tag}.bin"


def _checkpoints(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("*.bin"))
        if not found:
            raise FileNotFoundError(f"no checkpoints in {path}")
        return found
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return [path]


def _test_set(ckpt: checkpoint.Checkpoint, data, participant: str | None):
    if participant is not None:
        if participant not in data:
            raise InvalidConfig(f"participant {participant!r} not in feature set")
        ids = [(participant, s) for s in range(len(data[participant][1]))]
    else:
        ids = ckpt.test_ids
        missing = {p for p, _ in ids} - set(data)
        if missing:
            raise InvalidConfig(f"feature set lacks participants {sorted(missing)}")
    if not ids:
        raise InvalidConfig("checkpoint names no test samples; pass --participant")
    X, y = gather(data, ids)
    X = select_modality(X, ckpt.modality)
    if X.shape[2] != ckpt.params.config.input_dim:
        raise DimensionMismatch("features do not match the checkpoint's input dimension")
    return ids, X, y


# ------------------------------------------------------------ subcommands

def cmd_synth(args, cfg) -> int:
    sd = dict(cfg.get("synth", {}))
    n = int(pick(args.participants, sd, "participants", 23))
    sd.pop("participants", None)
    if args.minutes is not None:
        sd["duration_min"] = args.minutes
    synth_cfg = SynthConfig.from_dict(sd)
    out = _out_dir(args)
    manifest = synth_dataset(out, n, synth_cfg, _seed(args, cfg))
    print(f"wrote {len(manifest.participants)} participants to {out}")
    return 0


def cmd_preprocess(args, cfg) -> int:
    manifest = read_manifest(args.data)
    out = _out_dir(args)
    entries = []
    for e in manifest.participants:
        rec, labels = manifest.load(e)
        clean = rec if manifest.preprocessed else preprocess(rec)
        eeg_p, eog_p = save_recording(clean, out, e.id)
        lab_p = out / f"{e.id}.labels.csv"
        save_labels(labels, lab_p)
        entries.append(ManifestEntry(e.id, eeg_p.name, eog_p.name, lab_p.name))
        log.info("preprocessed %s", e.id)
    write_manifest(DatasetManifest(tuple(entries), 200.0, root=out, preprocessed=True), out)
    print(f"preprocessed {len(entries)} participants into {out}")
    return 0


def cmd_features(args, cfg) -> int:
    manifest = read_manifest(args.data)
    out = _out_dir(args)
    ids = []
    for e in manifest.participants:
        rec, labels = manifest.load(e)
        if not manifest.preprocessed:
            rec = preprocess(rec)
        X = recording_features(rec)
        y = np.array([lab.perclos for lab in sorted(labels, key=lambda l: l.segment_index)])
        if len(y) != len(X):
            raise DimensionMismatch(f"{e.id}: {len(X)} segments but {len(y)} labels")
        save_feature_cache(out, e.id, X, y)
        ids.append(e.id)
        log.info("features %s: %s", e.id, X.shape)
    with open(out / FEATURE_INDEX, "w") as fh:
        json.dump({"participants": ids, "feature_dim": FUSED_DIM}, fh, indent=1)
        fh.write("\n")
    print(f"wrote features for {len(ids)} participants to {out}")
    return 0


def write_results(path, run: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "fold", "rmse", "pcc"])
        for f in run.folds:
            w.writerow([run.scheme, f.name, repr(f.rmse), repr(f.pcc)])
        w.writerow([run.scheme, "aggregate", repr(run.mean("rmse")), repr(run.mean("pcc"))])


def cmd_train(args, cfg) -> int:
    proto = cfg.get("protocol", {})
    scheme = pick(args.scheme, proto, "scheme", "intra")
    k = int(pick(args.folds, proto, "folds", 5))
    modality = pick(args.modality, proto, "modality", "fused")
    if scheme not in ("intra", "loso"):
        raise InvalidConfig(f"unknown scheme {scheme!r}")
    data = load_features(args.features)
    data = {p: (select_modality(X, modality), y) for p, (X, y) in data.items()}
    dim = next(iter(data.values()))[0].shape[2]
    mcfg = model_config(args, cfg, dim)
    tcfg = train_config(args, cfg)
    plan = make_folds({p: len(y) for p, (_, y) in data.items()}, scheme, k)
    out = _out_dir(args)
    ckdir = out / "checkpoints"

    def save(i, fold, res):
        checkpoint.save_checkpoint(ckdir / _fold_file(fold.name, scheme), checkpoint.Checkpoint(
            res.params, res.standardizer, tcfg, fold.name, modality, list(fold.test)))

    t0 = time.time()
    run = train_and_evaluate(data, mcfg, tcfg, plan, on_fold=save, keep_params=False)
    write_results(out / "results.csv", run)
    summary = {"scheme": scheme, "modality": modality, "folds": len(run.folds),
               "rmse_mean": run.mean("rmse"), "rmse_sd": run.sd("rmse"),
               "pcc_mean": run.mean("pcc"), "pcc_sd": run.sd("pcc"),
               "baseline_rmse_mean": run.mean("baseline_rmse")}
    log.info("trained %d folds in %.1f s", len(run.folds), time.time() - t0)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")
    print(f"{scheme}/{modality}: RMSE {summary['rmse_mean']:.4f} +- {summary['rmse_sd']:.4f}, "
          f"PCC {summary['pcc_mean']:.4f} +- {summary['pcc_sd']:.4f}")
    return 0


def cmd_eval(args, cfg) -> int:
    paths = _checkpoints(args.checkpoint)
    data = load_features(args.features)
    out = _out_dir(args)
    rows = []
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "participant", "segment_index", "perclos", "prediction"])
        for path in paths:
            ckpt = checkpoint.load_checkpoint(path)
            ids, X, y = _test_set(ckpt, data, args.participant)
            pred = clip_predictions(predict(ckpt.params, ckpt.standardizer.apply(X)))
            for (pid, s), yy, pp in zip(ids, y, pred):
                w.writerow([path.stem, pid, s, repr(float(yy)), repr(float(pp))])
            r, p = analysis.eval_metrics(y, pred)
            rows.append((path.stem, r, p))
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["checkpoint", "rmse", "pcc"])
        for name, r, p in rows:
            w.writerow([name, repr(r), repr(p)])
    for name, r, p in rows:
        print(f"{name}: RMSE {r:.4f} PCC {p:.4f}")
    return 0


def cmd_analyze_bands(args, cfg) -> int:
    data = load_features(args.features)
    out = _out_dir(args)
    maps = {}
    for pid, (X, y) in data.items():
        maps[pid] = analysis.band_correlation(analysis.segment_de(X), y)
        analysis.write_band_corr(out / f"band_corr_{pid}.csv", maps[pid])
    avg = analysis.average_maps(maps.values())
    analysis.write_band_corr(out / "band_corr.csv", avg)
    with open(out / "channel_coords.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "x", "y"])
        for ch in EEG_CHANNELS:
            theta, az = _POLAR[ch]
            r, a = theta / 90.0, np.deg2rad(az)
            w.writerow([ch, f"{r * np.sin(a):.4f}", f"{r * np.cos(a):.4f}"])
    # region ANOVA on per-participant channel means over the selected band range
    lo, hi = args.band_range
    sel = (analysis.BAND_LOW_HZ >= lo) & (analysis.BAND_LOW_HZ + 2.0 <= hi)
    if not sel.any():
        raise InvalidConfig(f"no 2 Hz band lies inside {lo}-{hi} Hz")
    per_channel = np.stack([m[:, sel].mean(axis=1) for m in maps.values()])
    f, p, groups = analysis.region_anova(per_channel)
    with open(out / "region_anova.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region", "n", "mean_pcc", "sd_pcc"])
        for region, vals in groups.items():
            w.writerow([region, vals.size, repr(float(vals.mean())), repr(float(vals.std()))])
        w.writerow(["F", "", repr(f), ""])
        w.writerow(["p", "", repr(p), ""])
    print(f"mean PCC 5-17 Hz {analysis.band_range_mean(avg, 5, 17):.4f}, "
          f"17-35 Hz {analysis.band_range_mean(avg, 17, 35):.4f}; "
          f"region ANOVA F={f:.4f} p={p:.3g}")
    return 0


def _nanmean(values) -> float:
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def cmd_noise_sweep(args, cfg) -> int:
    paths = _checkpoints(args.checkpoint)
    data = load_features(args.features)
    out = _out_dir(args)
    seed = _seed(args, cfg)
    sigmas = args.sigmas
    if any(b <= a for a, b in zip(sigmas, sigmas[1:])):
        raise InvalidConfig("noise levels must be strictly increasing")
    curves = []
    for path in paths:
        ckpt = checkpoint.load_checkpoint(path)
        _, X, y = _test_set(ckpt, data, args.participant)
        curves.append(analysis.noise_sweep(ckpt.params, ckpt.standardizer, X, y, sigmas, seed))
    points = [analysis.NoisePoint(s, float(np.mean([c[i].rmse for c in curves])),
                                  _nanmean([c[i].pcc for c in curves]))
              for i, s in enumerate(sigmas)]
    analysis.write_noise_sweep(out / "noise_sweep.csv", points)
    for pt in points:
        print(f"sigma {pt.sigma:g}: RMSE {pt.rmse:.4f} PCC {pt.pcc:.4f}")
    return 0


def cmd_export_embeddings(args, cfg) -> int:
    paths = _checkpoints(args.checkpoint)
    data = load_features(args.features)
    out = _out_dir(args)
    for path in paths:
        ckpt = checkpoint.load_checkpoint(path)
        ids, X, y = _test_set(ckpt, data, args.participant)
        exp = analysis.export_embeddings(ckpt.params, ckpt.standardizer, X)
        prefix = "" if len(paths) == 1 else f"{path.stem}_"
        analysis.write_embeddings(out, exp, y, prefix)
        print(f"{path.stem}: {len(ids)} samples exported")
    return 0


# ------------------------------------------------------------------ parser

def _sigma_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad noise level list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("noise levels must be nonnegative")
    return vals


def _band_range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"band range must look like 5-17, got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file with [synth], [model], [training], [protocol] tables")
    common.add_argument("--seed", type=int, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--out-dir", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="vigicaps", description="Vigilance regression from EEG/EOG with an "
                     "LSTM-capsule network.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p.add_argument("--participants", type=int, help="number of sessions (default 23)")
    p.add_argument("--minutes", type=float, help="session length in minutes (default 30)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="resample, notch, band-pass, scale")
    p.add_argument("--data", required=True, help="dataset manifest or its directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("features", parents=[common], help="extract fused 15x886 sequences")
    p.add_argument("--data", required=True, help="dataset manifest or its directory")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", parents=[common], help="cross-validated training")
    p.add_argument("--features", required=True, help="feature directory")
    p.add_argument("--scheme", choices=("intra", "loso"), help="fold scheme (default intra)")
    p.add_argument("--folds", type=int, help="folds per participant for intra (default 5)")
    p.add_argument("--epochs", type=int, help="training epochs (default 30)")
    p.add_argument("--routing-iters", type=int, help="dynamic routing iterations (default 3)")
    p.add_argument("--modality", choices=("eeg", "eog", "fused"),
                   help="input features (default fused)")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score checkpoints on their test folds"),
                                 ("noise-sweep", cmd_noise_sweep,
                                  "metrics under Gaussian feature noise"),
                                 ("export-embeddings", cmd_export_embeddings,
                                  "capsule embeddings and 1-D projections")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True, help="checkpoint file or directory of them")
        p.add_argument("--features", required=True, help="feature directory")
        p.add_argument("--participant", help="evaluate all segments of this participant "
                       "instead of the checkpoint's test fold")
        if name == "noise-sweep":
            p.add_argument("--sigmas", type=_sigma_list, default=list(analysis.NOISE_LEVELS),
                           help="comma-separated noise SDs (default 0,0.2,0.4,0.6,0.8)")
        p.set_defaults(func=func)

    p = sub.add_parser("analyze-bands", parents=[common], help="DE/PERCLOS correlation maps")
    p.add_argument("--features", required=True, help="feature directory")
    p.add_argument("--band-range", type=_band_range, default=(5.0, 17.0),
                   help="band range (Hz) averaged for the region ANOVA (default 5-17)")
    p.set_defaults(func=cmd_analyze_bands)
    return parser


def _fail(kind: str, code: int, exc: BaseException) -> int:
    line = {"error": kind, "exit_code": code, "type": type(exc).__name__, "message": str(exc)}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (IOFormatError, OSError) as exc:
        return _fail("io", EXIT_IO, exc)
    except VigilanceError as exc:
        return _fail("domain", EXIT_DOMAIN, exc)


def run() -> None:
    """Console-script entry point."""
    sys.exit(main())


if __name__ == "__main__":
    run()
