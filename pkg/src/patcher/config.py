"""Run configuration: a flat ``key = value`` text format with dotted section keys.

Grammar::

    line    := blank | comment | entry
    comment := "#" anything
    entry   := key "=" value
    key     := section "." field  |  "seed"  |  "out"
    value   := scalar | scalar ("," scalar)+

Sections are ``model``, ``decoder``, ``data``, ``data.synth`` and ``train``.
``model.preset`` (``tiny`` or ``default``) picks the base architecture; any
other ``model.*``/``decoder.*`` key overrides a single field of it.
``data.synth.channels`` defaults to ``model.in_channels``.  Lists are
comma separated, booleans are ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthSpec
from .decoder import DecoderConfig
from .encoder import PatcherConfig
from .patching import GeometryError
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"
    root: str = ""
    split: tuple[float, ...] = (0.8, 0.1, 0.1)  # empty tuple = no split (train on everything)
    split_seed: int = 0


@dataclass
class RunConfig:
    model: PatcherConfig = field(default_factory=PatcherConfig.tiny)
    decoder: DecoderConfig = field(default_factory=DecoderConfig.tiny)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "tiny"
    seed: int = 0
    out: str = "runs/default"
    source_text: str | None = None

    def hash(self) -> int:
        """CRC-32 of the config file bytes (canonical text when built in code)."""
        text = self.source_text if self.source_text is not None else self.to_text()
        return zlib.crc32(text.encode("utf-8")) & 0xFFFFFFFF

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"out = {self.out}", f"model.preset = {self.preset}"]
        for prefix, obj in (("model", self.model), ("decoder", self.decoder), ("data", self.data),
                            ("data.synth", self.synth), ("train", self.train)):
            for f in dataclasses.fields(obj):
                lines.append(f"{prefix}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


_SECTIONS = {"model": "model", "decoder": "decoder", "data": "data", "data.synth": "synth", "train": "train"}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value) if value else "none"
    return str(value)


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, tuple):
            if raw.lower() in ("none", ""):
                return ()
            elem = default[0] if default else 0.0
            return tuple(_coerce(part.strip(), elem, key) for part in raw.split(","))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> RunConfig:
    entries: dict[str, tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in stripped.split("=", 1))
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = (lineno, value)

    preset = entries.pop("model.preset", (0, "tiny"))[1]
    if preset == "tiny":
        channels = int(entries["model.in_channels"][1]) if "model.in_channels" in entries else 1
        base = RunConfig(model=PatcherConfig.tiny(channels), decoder=DecoderConfig.tiny(), preset=preset)
    elif preset == "default":
        base = RunConfig(model=PatcherConfig(), decoder=DecoderConfig(), preset=preset)
    else:
        raise ConfigError(f"model.preset: unknown preset {preset!r}")

    updates: dict[str, dict] = {name: {} for name in _SECTIONS.values()}
    for key, (lineno, raw) in entries.items():
        if key == "seed":
            base.seed = _coerce(raw, 0, key)
            continue
        if key == "out":
            base.out = raw
            continue
        section, _, name = key.rpartition(".")
        attr = _SECTIONS.get(section)
        if attr is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        obj = getattr(base, attr)
        fields = {f.name: f for f in dataclasses.fields(obj)}
        if name not in fields:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[attr][name] = _coerce(raw, getattr(obj, name), key)

    for attr, changes in updates.items():
        if not changes:
            continue
        try:
            setattr(base, attr, dataclasses.replace(getattr(base, attr), **changes))
        except (ValueError, TypeError, GeometryError) as exc:
            raise ConfigError(f"invalid {attr} settings: {exc}") from exc
    if "channels" not in updates["synth"]:
        base.synth = dataclasses.replace(base.synth, channels=base.model.in_channels)
    _validate(base)
    base.source_text = text
    return base


def _validate(cfg: RunConfig) -> None:
    if cfg.data.source not in ("synth", "dir"):
        raise ConfigError(f"data.source must be 'synth' or 'dir', got {cfg.data.source!r}")
    if cfg.data.source == "dir" and not cfg.data.root:
        raise ConfigError("data.root is required when data.source = dir")
    if cfg.data.split and len(cfg.data.split) != 3:
        raise ConfigError(f"data.split needs three ratios or 'none', got {cfg.data.split}")
    if cfg.train.optimizer not in ("adam", "adamw"):
        raise ConfigError(f"train.optimizer must be adam or adamw, got {cfg.train.optimizer!r}")
    if cfg.train.loss not in ("bce", "bce+iou"):
        raise ConfigError(f"train.loss must be bce or bce+iou, got {cfg.train.loss!r}")
    if cfg.train.epochs <= 0 or cfg.train.batch_size <= 0 or cfg.train.lr <= 0:
        raise ConfigError("train.epochs, train.batch_size and train.lr must be positive")
    if len(cfg.train.scale) != 2 or not 0 < cfg.train.scale[0] <= cfg.train.scale[1]:
        raise ConfigError(f"train.scale must be 'lo,hi' with 0 < lo <= hi, got {cfg.train.scale}")
    if cfg.synth.channels != cfg.model.in_channels and cfg.data.source == "synth":
        raise ConfigError(f"data.synth.channels ({cfg.synth.channels}) != model.in_channels "
                          f"({cfg.model.in_channels})")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
