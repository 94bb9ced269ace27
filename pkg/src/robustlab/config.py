"""Experiment configuration: nested dataclasses loaded from one JSON document,
with dotted ``key=value`` overrides and rejection of unknown keys."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_args, get_type_hints

KINDS = ("train", "attack", "augment", "gen-conjugates", "train-generator", "ifa", "uncertainty", "spectra")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "mnist-idx"            # mnist-idx | cifar10-bin | synthetic
    images: str = "data/mnist5k/images-idx3-ubyte.gz"
    labels: str = "data/mnist5k/labels-idx1-ubyte.gz"
    path: str = ""                       # cifar10-bin file
    n_train: int = 2000
    n_test: int = 1000
    # synthetic sets
    kind: str = "gaussian-blobs"
    dimension: int = 2
    per_class: int = 100
    noise: float = 0.5
    classes: int = 2
    separation: float = 2.0


@dataclass
class ModelConfig:
    kind: str = "convnet"
    widths: list = field(default_factory=lambda: [1, 8, 16])
    input_shape: list = field(default_factory=lambda: [1, 28, 28])
    activation: str = "relu"
    classes: int = 10
    hidden: int = 64
    depth: int = 3


@dataclass
class TrainSettings:
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class AttackConfig:
    epsilon: float = 0.1
    alpha: float = 0.025
    steps: int = 4
    target: str = "true-label"
    target_class: int | None = None
    clip_perturbation: bool = True
    clamp_to_valid_range: bool = True


@dataclass
class ConjugateConfig:
    epsilon: float = 0.1
    steps: int = 50
    batch_size: int = 500
    clamp: bool = False
    # opposite-FGSM trend: evaluate accuracy every this many steps
    eval_every: int = 10
    # RA of the augmented images: clamp the PGD result to the valid range?
    ra_clamp: bool = False


@dataclass
class GeneratorConfig:
    widths: list = field(default_factory=lambda: [1, 4, 8, 16])
    depth: int = 3
    activation: str = "leaky_relu"
    train: TrainSettings = field(default_factory=lambda: TrainSettings(epochs=5))


@dataclass
class IfaConfig:
    checkpoint_epochs: list = field(default_factory=lambda: [1, 5, 15])


@dataclass
class PacketConfig:
    nodes: int = 256
    window_taper: float | None = 0.25
    checkpoint_epochs: list = field(default_factory=lambda: [1, 5, 20])


@dataclass
class SpectralSettings:
    checkpoint_epochs: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    epsilon: float = 0.1
    probe_size: int = 500
    lf_rows: list | None = None
    lf_cols: list | None = None
    grayscale: bool = True


@dataclass
class ExperimentConfig:
    kind: str = "ifa"
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    attack: AttackConfig = field(default_factory=AttackConfig)
    conjugate: ConjugateConfig = field(default_factory=ConjugateConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    ifa: IfaConfig = field(default_factory=IfaConfig)
    packet: PacketConfig = field(default_factory=PacketConfig)
    spectral: SpectralSettings = field(default_factory=SpectralSettings)
    # inputs produced by earlier stages (optional)
    checkpoint: str = ""
    conjugates: str = ""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """sha256 of the canonical JSON, excluding the output directory."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# construction ---------------------------------------------------------------

def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, where + name)
    return cls(**kwargs)


_CHECKS = {
    bool: (lambda v: isinstance(v, bool), "true/false"),
    int: (lambda v: isinstance(v, int) and not isinstance(v, bool), "an integer"),
    float: (lambda v: isinstance(v, (int, float)) and not isinstance(v, bool), "a number"),
    str: (lambda v: isinstance(v, str), "a string"),
    list: (lambda v: isinstance(v, list), "a list"),
}


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where + ".")
    args = get_args(tp)
    if args:                                # Optional[...]
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
    ok, what = _CHECKS[tp]
    if not ok(value):
        raise ConfigError(f"{where}: expected {what}, got {json.dumps(value)}")
    return float(value) if tp is float else value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p} is not a section")
        node[parts[-1]] = _parse_value(text)
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                kind: str | None = None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file, then overrides, then explicit arguments.

    Relative data paths in a file are taken relative to that file's
    directory; relative paths from defaults or overrides to the working
    directory.
    """
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path}: top level must be an object")
        base = path.resolve().parent
        raw = _resolve_paths(raw, base)
    raw = apply_overrides(raw, overrides or [])
    if kind is not None:
        raw["kind"] = kind
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    cfg = _build(ExperimentConfig, raw, "")
    _default_data_root(cfg)
    validate(cfg)
    return cfg


_PATH_KEYS = (("data", "images"), ("data", "labels"), ("data", "path"), ("checkpoint",), ("conjugates",))


def _resolve_paths(raw: dict, base: Path) -> dict:
    raw = copy.deepcopy(raw)
    for keys in _PATH_KEYS:
        node = raw
        for k in keys[:-1]:
            node = node.get(k, {}) if isinstance(node, dict) else {}
        if isinstance(node, dict) and isinstance(node.get(keys[-1]), str) and node[keys[-1]]:
            p = Path(node[keys[-1]])
            if not p.is_absolute():
                node[keys[-1]] = str(base / p)
    return raw


# a source checkout keeps the bundled MNIST subset next to src/
REPO_ROOT = Path(__file__).resolve().parents[2]


def _default_data_root(cfg: ExperimentConfig) -> None:
    """Relative MNIST paths missing from the working directory fall back to
    the source checkout, so the defaults work from any directory."""
    for attr in ("images", "labels"):
        p = Path(getattr(cfg.data, attr))
        if not p.is_absolute() and not p.exists() and (REPO_ROOT / p).exists():
            setattr(cfg.data, attr, str(REPO_ROOT / p))


def validate(cfg: ExperimentConfig) -> None:
    if cfg.kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {cfg.kind!r}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0 or cfg.seed >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    d = cfg.data
    if d.source not in ("mnist-idx", "cifar10-bin", "synthetic"):
        raise ConfigError(f"unknown data source {d.source!r}")
    if d.source == "mnist-idx":
        for p in (d.images, d.labels):
            if not Path(p).exists():
                raise ConfigError(f"data file {p} not found")
    if d.source == "cifar10-bin" and not Path(d.path).exists():
        raise ConfigError(f"data file {d.path!r} not found")
    for p in (cfg.checkpoint, cfg.conjugates):
        if p and not Path(p).with_suffix(".json").exists():
            raise ConfigError(f"input {p} not found")
    if d.n_train < 0 or d.n_test < 0:
        raise ConfigError("subset sizes must be non-negative")
    if cfg.conjugate.steps < 0 or cfg.conjugate.epsilon < 0 or cfg.conjugate.eval_every < 1:
        raise ConfigError("conjugate steps/epsilon must be >= 0 and eval_every >= 1")
    for name, epochs in (("ifa", cfg.ifa.checkpoint_epochs), ("packet", cfg.packet.checkpoint_epochs),
                         ("spectral", cfg.spectral.checkpoint_epochs)):
        if not epochs or any(not isinstance(e, int) or e < 0 for e in epochs):
            raise ConfigError(f"{name}.checkpoint_epochs must be non-negative integers")
    if cfg.kind == "spectra" and len(cfg.spectral.checkpoint_epochs) < 2:
        raise ConfigError("spectral study: need >= 2 checkpoints")
