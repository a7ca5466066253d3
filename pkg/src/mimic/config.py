"""Experiment configuration: one JSON document, strictly validated.

Named presets are fragments of the ``inversion`` block, deep-merged over it
in the order given.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .engine import InversionConfig
from .metrics import MetricOptions
from .modelzoo import PromptSpec
from .objective import ObjectiveOptions, ObjectiveWeights, TargetSpec


class ConfigError(ValueError):
    pass


def _weights(a1=0.0, a2=0.0, a3=0.0, b1=0.0, b2=0.0, g1=1.0, g2=0.0):
    return {"alpha1": a1, "alpha2": a2, "alpha3": a3, "beta1": b1, "beta2": b2, "gamma1": g1, "gamma2": g2}


CLASSIFIER_WEIGHTS = _weights(a1=3e-4, a2=1e-4, a3=1e-5, b1=1e-4, b2=4e-3, g1=0.3, g2=5e-5)

# Cumulative objective rows; the partial rows use unit scales.
PARTIAL_PRESETS = {
    "baseline": {"weights": _weights()},
    "+base": {"weights": _weights(g2=1.0)},
    "+patch": {"weights": _weights(g2=1.0, b2=1.0)},
    "+prior": {"weights": _weights(g2=1.0, b2=1.0, a1=1.0, a2=1.0, a3=1.0)},
    "+rv": {"weights": _weights(g2=1.0, b2=1.0, a1=1.0, a2=1.0, a3=1.0, b1=1.0)},
    "aggregated": {"weights": CLASSIFIER_WEIGHTS},
}
ABLATION_ORDER = tuple(PARTIAL_PRESETS)
PRESET_LABELS = {
    "baseline": "Baseline (L_SCE)",
    "+base": "+ Base Feature Loss (L_base)",
    "+patch": "+ Patch Regularizer R_patch",
    "+prior": "+ Prior Regularizer R_prior",
    "+rv": "+ Feat. Dist. Regularizer R_V",
    "aggregated": "Aggregated Objective",
}

BUILTIN_PRESETS = {
    **PARTIAL_PRESETS,
    "vlm_full": {"mode": "vlm", "iterations": 5000, "seeds": [0, 1, 2]},
    "classifier": {"mode": "vit", "iterations": 3000, "batch_size": 32, "schedule": "cosine",
                   "weights": CLASSIFIER_WEIGHTS},
    "kl_base": {"iterations": 3000, "target": {"base_variant": "kl"},
                "weights": _weights(1.0, 1.0, 1.0, 1e-4, 1.0, 1.0, 1.0)},
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 3e-3
    seed: int = 0


@dataclass(frozen=True)
class SuiteConfig:
    source: str = "toy"   # toy | oracle | file
    seed: int = 0
    path: str | None = None
    image_size: int = 32
    train: TrainConfig | None = None

    def __post_init__(self):
        if self.source not in ("toy", "oracle", "file"):
            raise ValueError(f"source must be 'toy', 'oracle' or 'file', got {self.source!r}")
        if self.source == "file" and not self.path:
            raise ValueError("source 'file' needs a path")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    per_class: int = 64
    image_dir: str | None = None
    noise: float = 0.3
    amplitude: float = 1.5

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")


@dataclass(frozen=True)
class StatsConfig:
    encoder_path: str | None = None
    bn_path: str | None = None
    layers: tuple[int, ...] | None = None
    mode: str = "average-then-stats"
    label: int | None = None


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    label: int | None = None
    target: str | None = None
    template: str | None = None

    @property
    def target_text(self):
        return self.target or self.name

    @property
    def key(self):
        text = self.target_text
        return self.name if text == self.name else f"{self.name}-{'_'.join(text.split())}"


@dataclass(frozen=True)
class AblationSpec:
    presets: tuple[str, ...] = ABLATION_ORDER
    concepts: tuple[ConceptSpec, ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not self.presets or not self.concepts or not self.seeds:
            raise ValueError("ablation needs presets, concepts and seeds")
        keys = [c.key for c in self.concepts]
        if len(set(keys)) != len(keys) or len(set(self.presets)) != len(self.presets):
            raise ValueError("ablation presets and concept targets must be unique")


@dataclass(frozen=True)
class ExperimentConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    data: DataConfig = field(default_factory=DataConfig)
    inversion: dict = field(default_factory=dict)
    stats: StatsConfig = field(default_factory=StatsConfig)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    ablation: AblationSpec | None = None
    presets: dict = field(default_factory=dict)
    preset: tuple[str, ...] = ()

    def preset_fragment(self, name):
        table = {**BUILTIN_PRESETS, **self.presets}
        if name not in table:
            raise ConfigError(f"unknown preset {name!r}; known: {sorted(table)}")
        return table[name]

    def inversion_config(self, presets=None, concept: ConceptSpec | None = None, seed=None) -> InversionConfig:
        names = self.preset if presets is None else presets
        raw = copy.deepcopy(self.inversion)
        for name in names:
            raw = deep_merge(raw, self.preset_fragment(name))
        if concept is not None:
            target = dict(raw.get("target") or {})
            target.update({"target_text": concept.target_text, "class_label": concept.label})
            raw["target"] = target
            if concept.template:
                raw["prompt"] = {**(raw.get("prompt") or {}), "template": concept.template}
        if seed is not None:
            raw["seeds"] = [seed]
        return build_inversion(raw, "inversion")

    def to_dict(self):
        return dataclasses.asdict(self)


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# ---------------------------------------------------------------------------
# strict conversion


def _is_union(tp):
    return typing.get_origin(tp) in (typing.Union, types.UnionType)


def _convert(tp, value, path):
    if tp is typing.Any or tp is object:
        return value
    if _is_union(tp):
        args = typing.get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: must not be null")
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, path)
    if dataclasses.is_dataclass(tp):
        return build(tp, value, path)
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_convert(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {tp}")


def build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.init]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}; allowed: {names}")
    kwargs = {k: _convert(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from None


def build_inversion(raw: dict, path="inversion") -> InversionConfig:
    raw = copy.deepcopy(raw)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    mode = raw.get("mode", "vlm")
    target = raw.get("target")
    if isinstance(target, dict):
        target.setdefault("mode", mode)
        if mode == "vlm" and isinstance(raw.get("prompt"), dict):
            raw["prompt"].setdefault("target_text", target.get("target_text"))
    if mode == "vlm" and isinstance(target, dict) and "prompt" not in raw and target.get("target_text"):
        raw["prompt"] = {"target_text": target["target_text"]}
    return build(InversionConfig, raw, path)


def _validate(cfg: ExperimentConfig):
    for name in cfg.preset:
        cfg.preset_fragment(name)
    if cfg.ablation is not None:
        for p in cfg.ablation.presets:
            for c in cfg.ablation.concepts:
                try:
                    cfg.inversion_config((*cfg.preset, p), c)
                except ConfigError as e:
                    raise ConfigError(f"ablation cell ({p}, {c.key}): {e}") from None
    elif cfg.inversion:
        cfg.inversion_config()


def parse_config_dict(doc: dict, source="<config>") -> ExperimentConfig:
    cfg = build(ExperimentConfig, doc, source)
    for name, frag in cfg.presets.items():
        if not isinstance(frag, dict):
            raise ConfigError(f"{source}.presets.{name}: expected an object")
    _validate(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    """Read and validate an experiment config; errors name the line or field."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    return parse_config_dict(doc, str(path))
