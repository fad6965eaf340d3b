"""Fold checkpoints: a shape-tagged little-endian float64 binary and a TOML config sidecar.

Binary layout (all integers little-endian)::

    magic  b"VGCAPSCK"
    u32    format version
    u32    section count
    per section:
        u32 name length, UTF-8 name
        u32 ndim, ndim x u64 dims
        prod(dims) x float64
"""

from __future__ import annotations

import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import FormatError, ShapeMismatch
from .model import ModelConfig, ModelParams
from .training import Standardizer, TrainConfig

MAGIC = b"VGCAPSCK"
VERSION = 1


def write_sections(path, sections: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(sections)))
        for name, arr in sections.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_sections(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise FormatError(f"{path}: truncated checkpoint")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(buf):
            raise FormatError(f"{path}: truncated section {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after last section")
    return out


# ------------------------------------------------------------- config text

def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} as TOML")


def dump_toml(doc: dict) -> str:
    """Serialize a dict of scalars and one level of tables."""
    lines = [f"{k} = {_toml_value(v)}" for k, v in doc.items() if not isinstance(v, dict)]
    for k, v in doc.items():
        if isinstance(v, dict):
            lines.append("")
            lines.append(f"[{k}]")
            lines.extend(f"{kk} = {_toml_value(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: ModelParams
    standardizer: Standardizer
    train_config: TrainConfig
    fold: str = ""
    modality: str = "fused"
    test_ids: list[tuple[str, int]] = field(default_factory=list)


def _ranges(ids) -> list[str]:
    """Compress (participant, segment) ids into "P01:0-176" strings."""
    out: list[str] = []
    for pid, s in ids:
        if out:
            last_pid, span = out[-1].rsplit(":", 1)
            lo, hi = (int(x) for x in span.split("-"))
            if last_pid == pid and s == hi + 1:
                out[-1] = f"{pid}:{lo}-{s}"
                continue
        out.append(f"{pid}:{s}-{s}")
    return out


def _expand(ranges) -> list[tuple[str, int]]:
    out = []
    for r in ranges:
        try:
            pid, span = r.rsplit(":", 1)
            lo, hi = (int(x) for x in span.split("-"))
        except ValueError as exc:
            raise FormatError(f"bad test range {r!r}") from exc
        out.extend((pid, s) for s in range(lo, hi + 1))
    return out


def config_path_for(path) -> Path:
    return Path(path).with_suffix(".toml")


def save_checkpoint(path, ckpt: Checkpoint) -> tuple[Path, Path]:
    """Write ``path`` (binary) and the matching ``.toml`` config; returns both paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sections = dict(ckpt.params.state_arrays())
    sections["standardizer.mean"] = ckpt.standardizer.mean
    sections["standardizer.scale"] = ckpt.standardizer.scale
    write_sections(path, sections)
    doc = {"format_version": VERSION, "fold": ckpt.fold, "modality": ckpt.modality,
           "model": ckpt.params.config.to_dict(), "training": ckpt.train_config.to_dict(),
           "evaluation": {"test_ranges": _ranges(ckpt.test_ids)}}
    cfg = config_path_for(path)
    cfg.write_text(dump_toml(doc))
    return path, cfg


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    cfg = config_path_for(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    if not cfg.is_file():
        raise FileNotFoundError(f"checkpoint config {cfg} not found")
    doc = load_toml(cfg)
    if doc.get("format_version") != VERSION:
        raise FormatError(f"{cfg}: unsupported format_version {doc.get('format_version')}")
    try:
        model_cfg = ModelConfig.from_dict(doc["model"])
        train_cfg = TrainConfig.from_dict(doc["training"])
    except KeyError as exc:
        raise FormatError(f"{cfg}: missing table {exc}") from exc
    arrays = read_sections(path)
    try:
        std = Standardizer(arrays.pop("standardizer.mean"), arrays.pop("standardizer.scale"))
    except KeyError as exc:
        raise FormatError(f"{path}: missing standardizer section") from exc
    try:
        params = ModelParams.from_state_arrays(model_cfg, arrays)
    except (KeyError, ShapeMismatch) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    ranges = doc.get("evaluation", {}).get("test_ranges", [])
    return Checkpoint(params, std, train_cfg, str(doc.get("fold", "")),
                      str(doc.get("modality", "fused")), _expand(ranges))
