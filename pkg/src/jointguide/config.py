"""Run configuration: INI-style sections, named profiles and key=value overrides.

Precedence, lowest first: profile defaults, config file, command-line overrides.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datasets import DEFAULT_CLASS_NAMES, ConfusablePair, SyntheticSpec
from .errors import ConfigurationError
from .model import ModelConfig


@dataclass(frozen=True)
class DataConfig:
    dir: str = ""                 # load train.jgds/test.jgds from here instead of generating
    num_classes: int = 8
    frames: int = 48
    frames_out: int = 32
    train_per_class: int = 200
    test_per_class: int = 50
    noise: float = 0.5
    delta: float = 0.12
    pairs: str = "0-1:3,4; 4-5:10,11"
    seed: int = 0


@dataclass(frozen=True)
class NetConfig:
    channels: tuple[int, ...] = (16, 16, 32, 64)
    strides: tuple[int, ...] = (1, 2, 2)
    temporal_kernel: int = 9
    embed_dim: int = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    tau: float = 0.1
    k: int = 10
    alpha: float = 0.2
    beta: float = 0.5
    refresh_period: int = 10
    context_refresh: bool = True
    seed: int = 0


@dataclass(frozen=True)
class GuidanceConfig:
    client: str = "scripted"      # scripted | chat
    script: str = ""              # fixture script; empty = packaged desk script
    model: str = "gpt-4o"
    endpoint: str = "https://api.openai.com/v1"
    rate: float = 1.0             # live-client requests per second
    parallelism: int = 1
    embedder: str = "hash"
    cache: str = "transcripts.cache"
    descriptions: str = ""        # description store to reuse; empty = run the chain


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        t = self.train
        if t.alpha < 0 or t.beta < 0:
            raise ConfigurationError("alpha and beta must be >= 0")
        if not t.tau > 0:
            raise ConfigurationError("tau must be > 0")
        if t.k < 1 or t.refresh_period < 1 or t.batch_size < 1 or t.epochs < 1:
            raise ConfigurationError("k, refresh_period, batch_size and epochs must be >= 1")
        if self.guidance.client not in ("scripted", "chat"):
            raise ConfigurationError(f"unknown client {self.guidance.client!r}")
        if self.guidance.embedder != "hash":
            raise ConfigurationError(f"unknown embedder {self.guidance.embedder!r}")
        self.synthetic_spec().validate()
        self.model_config(12)
        return self

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.data
        names = DEFAULT_CLASS_NAMES[:d.num_classes]
        if len(names) < d.num_classes:
            names = names + tuple(f"action {i}" for i in range(len(names), d.num_classes))
        return SyntheticSpec(
            num_classes=d.num_classes, frames=d.frames,
            train_per_class=d.train_per_class, test_per_class=d.test_per_class,
            pairs=parse_pairs(d.pairs, d.delta), noise=d.noise, seed=d.seed,
            class_names=names,
        )

    def model_config(self, num_joints: int, num_classes: int | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(
            in_channels=3, num_joints=num_joints,
            num_classes=num_classes or self.data.num_classes,
            channels=m.channels, strides=m.strides,
            temporal_kernel=m.temporal_kernel, embed_dim=m.embed_dim,
        )

    def dumps(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section in SECTIONS:
            obj = getattr(self, section)
            cp[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
        cp["run"] = {"out_dir": self.out_dir}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory excluded)."""
        return hashlib.sha256(replace(self, out_dir="").dumps().encode()).hexdigest()[:16]


SECTIONS = ("data", "model", "train", "guidance")

PROFILES: dict[str, dict[str, str]] = {
    "desk": {},
    "long": {
        "train.epochs": "150", "train.batch_size": "64", "train.lr": "0.1",
        "data.frames_out": "100", "data.frames": "120",
    },
    # component ladder; text reaches the recognizer only through the two losses
    "baseline": {"train.alpha": "0", "train.beta": "0", "train.context_refresh": "false"},
    "csp": {"train.alpha": "0", "train.beta": "0.5", "train.context_refresh": "false"},
    "cag": {"train.alpha": "0", "train.beta": "0.5", "train.context_refresh": "true"},
    "l_con": {"train.alpha": "0.2", "train.beta": "0", "train.context_refresh": "true"},
    "l_align": {"train.alpha": "0", "train.beta": "0.5", "train.context_refresh": "true"},
    "full": {"train.alpha": "0.2", "train.beta": "0.5", "train.context_refresh": "true"},
}
LADDER = ("baseline", "csp", "cag", "l_con", "l_align", "full")


def parse_pairs(text: str, delta: float) -> tuple[ConfusablePair, ...]:
    """``"0-1:3,4; 4-5:10,11"`` -> pairs (0, 1) on joints 3, 4 and (4, 5) on 10, 11."""
    pairs = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        try:
            classes, joints = chunk.split(":")
            a, b = (int(x) for x in classes.split("-"))
            js = tuple(int(j) for j in joints.split(","))
        except ValueError:
            raise ConfigurationError(f"cannot parse confusable pair {chunk!r}") from None
        pairs.append(ConfusablePair(a, b, js, float(delta)))
    return tuple(pairs)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _convert(section: str, name: str, default, raw: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError:
        raise ConfigurationError(f"{section}.{name}: cannot parse {raw!r}") from None


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply ``{"section.key": "value"}`` overrides; unknown keys are rejected."""
    updates: dict[str, dict] = {}
    out_dir = cfg.out_dir
    for key, raw in overrides.items():
        if key in ("run.out_dir", "out_dir"):
            out_dir = raw
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigurationError(f"unknown config key {key!r}")
        obj = getattr(cfg, section)
        known = {f.name for f in fields(obj)}
        if name not in known:
            raise ConfigurationError(f"unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _convert(section, name, getattr(obj, name), raw)
    new = {s: replace(getattr(cfg, s), **u) for s, u in updates.items()}
    return replace(cfg, out_dir=out_dir, **new)


def read_config_file(path) -> dict[str, str]:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(Path(path).read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    flat = {}
    for section in cp.sections():
        for key, value in cp[section].items():
            flat[f"{section}.{key}"] = value
    return flat


def parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"override {text!r} is not key=value")
    return key.strip(), value.strip()


def load_config(path=None, profile: str = "desk", overrides=()) -> RunConfig:
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = apply_overrides(RunConfig(), PROFILES[profile])
    if path:
        cfg = apply_overrides(cfg, read_config_file(path))
    cfg = apply_overrides(cfg, dict(parse_override(o) if isinstance(o, str) else o for o in overrides))
    return cfg.validate()
