"""Run configuration: dataclasses, defaults, and the key=value file format.

Config files are INI-style with sections ``[learner]``, ``[classifier]``,
``[loss]``, ``[train]``, ``[synth]`` and ``[run]``.  A JSON echo written by
:func:`dump_json` is accepted as input too.  Unknown keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

__all__ = [
    "ConfigError",
    "LearnerConfig",
    "ClassifierConfig",
    "LossWeights",
    "TrainConfig",
    "SyntheticSpec",
    "RunConfig",
    "window_count",
    "load_config",
    "apply_overrides",
    "dump_json",
    "config_from_dict",
    "config_to_dict",
]


MAX_SPECTRAL_RADIUS = 0.95


class ConfigError(ValueError):
    pass


def window_count(n_timepoints: int, window_length: int, stride: int) -> int:
    """Number of snapshots, floor((T' - 2(P-1) - 1)/S + 1)."""
    return (n_timepoints - 2 * (window_length - 1) - 1) // stride + 1


@dataclass(frozen=True)
class LearnerConfig:
    n_regions: int = 0  # 0: taken from the dataset
    n_timepoints: int = 0  # 0: taken from the crop length
    window_length: int = 50
    window_stride: int = 3
    n_layers: int = 4
    embed_dim: int = 64
    kernel_sizes: tuple[int, ...] = (4, 8, 16)
    attn_dim: int = 16
    undirected: bool = True
    use_inception: bool = True
    use_self_attention: bool = True
    use_sparsity: bool = True
    threshold_init: float = -10.0

    @property
    def n_snapshots(self) -> int:
        return window_count(self.n_timepoints, self.window_length, self.window_stride)

    @property
    def n_branches(self) -> int:
        return len(self.kernel_sizes)

    def validate(self) -> None:
        p, s, tp = self.window_length, self.window_stride, self.n_timepoints
        if self.n_regions < 1:
            raise ConfigError("n_regions must be ≥ 1")
        if not (1 <= p <= tp and 1 <= s <= tp):
            raise ConfigError(f"need 1 ≤ P, S ≤ T' (P={p}, S={s}, T'={tp})")
        if p < 2:
            raise ConfigError("window_length P must be ≥ 2 for correlation node features")
        if tp < 2 * p - 1:
            raise ConfigError(f"T' ≥ 2P - 1 is required for at least one window (T'={tp}, P={p})")
        ks = tuple(self.kernel_sizes)
        if not ks or any(b <= a for a, b in zip(ks, ks[1:])) or ks[0] < 1:
            raise ConfigError(f"kernel sizes must be positive and strictly increasing, got {ks}")
        if min(self.embed_dim, self.attn_dim, self.n_layers) < 1:
            raise ConfigError("embed_dim, attn_dim and n_layers must be ≥ 1")
        if self.use_inception and self.embed_dim < len(ks):
            raise ConfigError("embed_dim must be at least the number of inception branches")


@dataclass(frozen=True)
class ClassifierConfig:
    n_snapshots: int = 0  # fixed by the learner's windowing
    n_layers: int = 3
    hidden_dim: int = 64
    tau: float = 0.5
    n_classes: int = 2
    use_temporal_attention: bool = True

    @property
    def bottleneck(self) -> int:
        return math.ceil(self.tau * self.n_snapshots)

    def validate(self) -> None:
        if self.n_layers < 1 or self.hidden_dim < 1:
            raise ConfigError("classifier n_layers and hidden_dim must be ≥ 1")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if not (0 < self.tau <= 1):
            raise ConfigError("tau must lie in (0, 1]")
        if self.n_snapshots < 1 or self.bottleneck < 1:
            raise ConfigError("snapshot count must be ≥ 1")


@dataclass(frozen=True)
class LossWeights:
    feature_smoothness: float = 1e-4
    temporal_smoothness: float = 1e-3
    sparsity: float = 1e-3

    def validate(self) -> None:
        for name, value in dataclasses.asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight {name} must be ≥ 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 20
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 5000
    patience: int = 15
    crop_length: int = 0  # 0: full series
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    deterministic: bool = False
    precision: str = "float32"

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be ≥ 1")
        if self.patience < 1:
            raise ConfigError("patience must be ≥ 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay ≥ 0")
        if len(self.split) != 3 or any(r < 0 for r in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {self.split}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int = 200
    n_regions: int = 16
    n_timepoints: int = 120
    n_classes: int = 2
    n_regimes: int = 3
    density: float = 0.15
    coupling: float = 0.8
    noise: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be ≥ 1")
        if self.n_classes != 2:
            raise ConfigError("the synthetic generator produces exactly two classes")
        if self.n_regions < 2 or self.n_timepoints < 2:
            raise ConfigError("need at least two regions and two timepoints")
        if not (1 <= self.n_regimes <= self.n_timepoints):
            raise ConfigError("n_regimes must be between 1 and n_timepoints")
        if not (0 <= self.density <= 1):
            raise ConfigError("density must lie in [0, 1]")
        if self.coupling < 0 or self.noise <= 0:
            raise ConfigError("coupling must be ≥ 0 and noise > 0")
        if self.coupling >= MAX_SPECTRAL_RADIUS:
            raise ConfigError(f"coupling must stay below {MAX_SPECTRAL_RADIUS} to keep the process stable")


@dataclass(frozen=True)
class RunConfig:
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    seed: int = 0

    def validate(self) -> None:
        self.loss.validate()
        self.train.validate()
        self.synth.validate()


SECTIONS = ("learner", "classifier", "loss", "train", "synth")

# symbol-style aliases usable in config files and --set
ALIASES = {
    "P": ("learner", "window_length"),
    "S": ("learner", "window_stride"),
    "L_G": ("learner", "n_layers"),
    "K_E": ("learner", "embed_dim"),
    "S_m": ("learner", "kernel_sizes"),
    "K_S": ("learner", "attn_dim"),
    "L_C": ("classifier", "n_layers"),
    "K_C": ("classifier", "hidden_dim"),
    "tau": ("classifier", "tau"),
    "C": ("classifier", "n_classes"),
    "lambda_FS": ("loss", "feature_smoothness"),
    "lambda_TS": ("loss", "temporal_smoothness"),
    "lambda_SP": ("loss", "sparsity"),
    "batch_size": ("train", "batch_size"),
    "lr": ("train", "lr"),
    "weight_decay": ("train", "weight_decay"),
    "max_epochs": ("train", "max_epochs"),
    "patience": ("train", "patience"),
    "crop_length": ("train", "crop_length"),
    "N": ("synth", "n_subjects"),
    "V": ("synth", "n_regions"),
    "T'": ("synth", "n_timepoints"),
    "R": ("synth", "n_regimes"),
    "rho": ("synth", "density"),
    "gamma": ("synth", "coupling"),
    "sigma": ("synth", "noise"),
    "seed": ("run", "seed"),
}


def _field_types(cls) -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


_SECTION_CLASSES = {
    "learner": LearnerConfig,
    "classifier": ClassifierConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "synth": SyntheticSpec,
}


def _coerce(raw: Any, current: Any, key: str) -> Any:
    """Parse ``raw`` into the type of the existing default ``current``."""
    try:
        if isinstance(current, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            return int(str(raw).strip()) if not isinstance(raw, (int, float)) else int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            if isinstance(raw, (list, tuple)):
                items = list(raw)
            else:
                items = [s for s in str(raw).replace("{", "").replace("}", "").replace(",", " ").split() if s]
            kind = type(current[0]) if current else float
            return tuple(kind(x) for x in items)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"cannot parse {key}={raw!r} as {type(current).__name__}") from None


def _resolve_key(section: str | None, key: str) -> tuple[str, str]:
    if "." in key and section is None:
        section, key = key.split(".", 1)
    if section is None or section == "run":
        if key in ALIASES:
            return ALIASES[key]
        matches = [s for s, cls in _SECTION_CLASSES.items() if key in _field_types(cls)]
        if key == "seed":
            return ("run", "seed")
        if len(matches) == 1:
            return matches[0], key
        if len(matches) > 1:
            raise ConfigError(f"ambiguous key {key!r}; qualify it as one of {[m + '.' + key for m in matches]}")
        raise ConfigError(f"unknown config key {key!r}")
    if section not in _SECTION_CLASSES:
        raise ConfigError(f"unknown config section [{section}]")
    if key in _field_types(_SECTION_CLASSES[section]):
        return section, key
    if key in ALIASES and ALIASES[key][0] == section:
        return ALIASES[key]
    raise ConfigError(f"unknown config key {key!r} in section [{section}]")


def _apply(cfg: RunConfig, section: str, key: str, raw: Any) -> RunConfig:
    section, key = _resolve_key(section, key)
    if section == "run":
        return dataclasses.replace(cfg, seed=_coerce(raw, cfg.seed, key))
    sub = getattr(cfg, section)
    value = _coerce(raw, getattr(sub, key), f"{section}.{key}")
    return dataclasses.replace(cfg, **{section: dataclasses.replace(sub, **{key: value})})


def apply_overrides(cfg: RunConfig, overrides: list[str] | None) -> RunConfig:
    """Apply ``KEY=VALUE`` strings (``--set``); keys may be ``section.key``."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        cfg = _apply(cfg, None, key.strip(), raw)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    return json.loads(json.dumps(out))  # tuples -> lists


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for section, values in data.items():
        if section == "seed":
            cfg = _apply(cfg, "run", "seed", values)
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, raw in values.items():
            cfg = _apply(cfg, section, key, raw)
    return cfg


def dump_json(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def load_config(path: str | Path | None) -> RunConfig:
    """Read an INI-style or JSON config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if text.lstrip().startswith("{"):
        try:
            return config_from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON config {path}: {exc}") from None
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keep case: P, K_E, ...
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg = _apply(cfg, section, key, raw)
    return cfg
