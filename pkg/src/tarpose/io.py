"""Checkpoints, run configs, and PGM/PPM/CSV export.

Checkpoint layout (all integers little-endian)::

    b"TARV"  u32 version  u32 count
    count x { u32 name_len, name (UTF-8), u32 ndim, u64 dims[ndim], float32 payload }
"""
from __future__ import annotations

import configparser
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .fusion import FusionConfig
from .model import ModelConfig

MAGIC = b"TARV"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        data = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(parts)


def write_checkpoint(path, tensors) -> None:
    """Write named tensors (arrays or :class:`Tensor`) as float32, atomically."""
    _atomic_write(Path(path), encode_checkpoint(tensors))


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes for {what} at offset {pos}, "
                                  f"only {len(view) - pos} left")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic at offset 0: not a TARV checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"invalid UTF-8 tensor name at offset {start + 4}") from exc
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r} at offset {start}")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        if ndim > 32:
            raise CheckpointError(f"implausible ndim {ndim} for {name!r} at offset {pos - 4}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
        size = int(np.prod(dims, dtype=np.uint64)) if ndim else 1
        if size * 4 > len(view) - pos:
            raise CheckpointError(f"truncated checkpoint: tensor {name!r} needs {size * 4} bytes at offset {pos}, "
                                  f"only {len(view) - pos} left")
        payload = take(size * 4, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} unexpected trailing bytes at offset {pos}")
    return out


def read_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------
# PGM / PPM
# --------------------------------------------------------------------------

def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """``[3, H, W]`` floats in [0, 1] -> binary P6."""
    img = _to_bytes(image)
    _, h, w = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.transpose(img, (1, 2, 0)).tobytes())


def _parse_pnm(blob: bytes, magic: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        tokens.append(blob[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"expected {magic!r} image, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return w, h, blob[pos + 1:]


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> ``[3, H, W]`` float32 in [0, 1]."""
    w, h, body = _parse_pnm(Path(path).read_bytes(), b"P6")
    arr = np.frombuffer(body[:w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return np.transpose(arr, (2, 0, 1)).astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    """Binary P5 -> ``[H, W]`` uint8."""
    w, h, body = _parse_pnm(Path(path).read_bytes(), b"P5")
    return np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w).copy()


def export_heatmap_pgm(heatmap: np.ndarray, path) -> None:
    """P5 image of one map, min-max normalised; a constant map becomes all zeros."""
    m = np.asarray(getattr(heatmap, "data", heatmap), dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    img = _to_bytes(scaled)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def _draw_line(img: np.ndarray, a, b, color) -> None:
    _, h, w = img.shape
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1]))) + 1
    for t in np.linspace(0.0, 1.0, n + 1):
        x = int(round(a[0] + t * (b[0] - a[0])))
        y = int(round(a[1] + t * (b[1] - a[1])))
        if 0 <= x < w and 0 <= y < h:
            img[:, y, x] = color


def export_overlay_ppm(frame: np.ndarray, keypoints: np.ndarray, path, parents=None,
                       marker=(1.0, 0.0, 0.0), bone=(1.0, 1.0, 0.0)) -> None:
    """Frame ``[3, H, W]`` with parent-bone segments and 3x3 keypoint markers."""
    img = np.array(frame, dtype=np.float32, copy=True)
    _, h, w = img.shape
    kp = np.asarray(keypoints, dtype=np.float64)
    if parents is not None:
        for j, p in enumerate(parents):
            if p >= 0:
                _draw_line(img, kp[p, :2], kp[j, :2], np.array(bone, dtype=np.float32))
    for x, y in kp[:, :2]:
        cx, cy = int(round(x)), int(round(y))
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if 0 <= cx + dx < w and 0 <= cy + dy < h:
                    img[:, cy + dy, cx + dx] = marker
    write_ppm(path, img)


def write_keypoints_csv(path, keypoints: np.ndarray, scores: np.ndarray) -> None:
    rows = ["joint,x,y,score"]
    rows += [f"{j},{x:.3f},{y:.3f},{s:.6f}" for j, ((x, y), s) in enumerate(zip(keypoints[:, :2], scores))]
    Path(path).write_text("\n".join(rows) + "\n")


# --------------------------------------------------------------------------
# run configs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    base_lr: float = 1e-3
    lr_decay_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    augment: bool = True
    sigma: float = 2.0
    eval_every: int = 0  # steps; 0 = only at the end
    max_steps: int = 0  # 0 = no cap
    supervise_occluded: bool = False


@dataclass(frozen=True)
class DataConfig:
    kind: str = "plain"
    count: int = 8
    seed: int = 0
    eval_kind: str = ""  # empty = same as kind
    eval_count: int = 0  # 0 = evaluate on the training clips
    eval_seed: int = 1


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


_MODEL_KEYS = {f.name for f in fields(BackboneConfig)} | {"fusion_variant", "variant_layers"}
_SECTIONS = {
    "model": _MODEL_KEYS,
    "fusion": {f.name for f in fields(FusionConfig)},
    "train": {f.name for f in fields(TrainConfig)},
    "data": {f.name for f in fields(DataConfig)},
}


def _field_types(cls) -> dict[str, type]:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


_TYPES = {
    "model": {**_field_types(BackboneConfig), "fusion_variant": str, "variant_layers": int},
    "fusion": {**_field_types(FusionConfig), "heads": int, "attn_dim": int},
    "train": _field_types(TrainConfig),
    "data": _field_types(DataConfig),
}


def _line_of(text: str, section: str | None, key: str | None) -> int:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return i
    return 0


def _convert(raw: str, typ: type, where: str):
    raw = raw.strip().strip('"').strip("'")
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if typ is int:
        if raw.lower() in ("none", "auto"):
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None
    if typ is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {raw!r}") from None
    return raw


def parse_config(text: str) -> RunConfig:
    """Parse an INI-style run config; every error names its line and key."""
    parser = configparser.ConfigParser(interpolation=None, strict=True, default_section="__none__",
                                       inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", 0)
        raise ConfigError(f"line {line}: {exc.message if hasattr(exc, 'message') else exc}") from None
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"line {_line_of(text, section, None)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            line = _line_of(text, section, key)
            if key not in _SECTIONS[section]:
                raise ConfigError(f"line {line}: unknown key {key!r} in [{section}]")
            values[section][key] = _convert(raw, _TYPES[section][key], f"line {line}: [{section}] {key}")

    def build(cls, section, kv):
        try:
            return cls(**kv)
        except (TypeError, ValueError) as exc:
            key = next(iter(kv), None)
            raise ConfigError(f"line {_line_of(text, section, key)}: [{section}] {exc}") from None

    m = dict(values["model"])
    variant = {k: m.pop(k) for k in ("fusion_variant", "variant_layers") if k in m}
    backbone = build(BackboneConfig, "model", m)
    fusion = build(FusionConfig, "fusion", values["fusion"])
    try:
        model = ModelConfig(backbone=backbone, fusion=fusion, **variant)
    except ValueError as exc:
        raise ConfigError(f"line {_line_of(text, 'model', 'fusion_variant')}: [model] {exc}") from None
    return RunConfig(model=model, train=build(TrainConfig, "train", values["train"]),
                     data=build(DataConfig, "data", values["data"]))


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """Serialise a RunConfig back into the text grammar ``parse_config`` reads."""
    def section(name, obj, keys):
        out = [f"[{name}]"]
        for k in keys:
            v = getattr(obj, k)
            out.append(f"{k} = {'none' if v is None else v}")
        return out

    lines = section("model", cfg.model.backbone, [f.name for f in fields(BackboneConfig)])
    lines += [f"fusion_variant = {cfg.model.fusion_variant}", f"variant_layers = {cfg.model.variant_layers}", ""]
    lines += section("fusion", cfg.model.fusion, [f.name for f in fields(FusionConfig)]) + [""]
    lines += section("train", cfg.train, [f.name for f in fields(TrainConfig)]) + [""]
    lines += section("data", cfg.data, [f.name for f in fields(DataConfig)])
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **train_overrides) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, **train_overrides))
