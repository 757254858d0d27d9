"""Strict parsing of the single-JSON run configuration.

The document combines the data-generator settings, the model profile and
variant, the training hyper-parameters, an output directory, and a seed
list. Every section is optional and falls back to the desk-scale defaults;
unknown keys are rejected anywhere in the tree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .model import PROFILES, VARIANTS, ModelProfile
from .synthdata import GeneratorConfig, ObjectSpec
from .training import TrainConfig

__all__ = ["ConfigError", "ModelConfig", "RunConfig", "parse_run_config", "load_run_config"]


class ConfigError(ValueError):
    """Configuration file is invalid; the message names the offending key."""


def _mapping(obj, ctx: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{ctx} must be a JSON object, got {type(obj).__name__}")
    return obj


def _reject_unknown(d: dict, allowed: set[str], ctx: str) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {ctx}: {', '.join(unknown)}")


def _int(d: dict, key: str, default: int, ctx: str) -> int:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{ctx}.{key} must be an integer, got {v!r}")
    return v


def _number(d: dict, key: str, default: float, ctx: str) -> float:
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{ctx}.{key} must be a number, got {v!r}")
    return float(v)


def _pair(d: dict, key: str, default: tuple[int, int], ctx: str) -> tuple[int, int]:
    v = d.get(key, list(default))
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(e, int) and not isinstance(e, bool) and e > 0 for e in v)):
        raise ConfigError(f"{ctx}.{key} must be a pair of positive integers, got {v!r}")
    return (v[0], v[1])


_OBJECT_KEYS = {"label", "size_class", "texture_richness", "shape_seed", "role"}


def _parse_object(entry, ctx: str) -> tuple[ObjectSpec, str]:
    entry = _mapping(entry, ctx)
    _reject_unknown(entry, _OBJECT_KEYS, ctx)
    for key in _OBJECT_KEYS:
        if key not in entry:
            raise ConfigError(f"{ctx} is missing required key {key!r}")
    role = entry["role"]
    if role not in ("known", "unknown"):
        raise ConfigError(f"{ctx}.role must be 'known' or 'unknown', got {role!r}")
    try:
        spec = ObjectSpec(
            str(entry["label"]),
            float(entry["size_class"]),
            float(entry["texture_richness"]),
            int(entry["shape_seed"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{ctx}: {exc}") from exc
    return spec, role


_DATASET_KEYS = {
    "image_hw",
    "tactile_hw",
    "sequence_length",
    "rate_hz",
    "translation_sequences",
    "rotation_sequences",
    "combined_sequences",
    "known_objects",
    "unknown_objects",
    "objects",
}


def _parse_dataset(d: dict) -> GeneratorConfig:
    ctx = "dataset"
    _reject_unknown(d, _DATASET_KEYS, ctx)
    objects = None
    if d.get("objects") is not None:
        raw = d["objects"]
        if not isinstance(raw, list):
            raise ConfigError(f"{ctx}.objects must be a list or null, got {type(raw).__name__}")
        objects = tuple(_parse_object(e, f"{ctx}.objects[{i}]") for i, e in enumerate(raw))
    cfg = GeneratorConfig(
        image_hw=_pair(d, "image_hw", (20, 30), ctx),
        tactile_hw=_pair(d, "tactile_hw", (40, 30), ctx),
        sequence_length=_int(d, "sequence_length", 40, ctx),
        rate_hz=_number(d, "rate_hz", 15.0, ctx),
        translation_sequences=_int(d, "translation_sequences", 5, ctx),
        rotation_sequences=_int(d, "rotation_sequences", 5, ctx),
        combined_sequences=_int(d, "combined_sequences", 6, ctx),
        known_objects=_int(d, "known_objects", 11, ctx),
        unknown_objects=_int(d, "unknown_objects", 4, ctx),
        objects=objects,
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{ctx}: {exc}") from exc
    return cfg


_PROFILE_KEYS = {"name", "image_hw", "tactile_hw", "conv_channels", "lstm_hidden"}


def _parse_profile(v, ctx: str) -> ModelProfile:
    if isinstance(v, str):
        if v not in PROFILES:
            raise ConfigError(f"{ctx}.profile must be one of {sorted(PROFILES)} or an object, got {v!r}")
        return PROFILES[v]
    d = _mapping(v, f"{ctx}.profile")
    _reject_unknown(d, _PROFILE_KEYS, f"{ctx}.profile")
    try:
        return ModelProfile(
            name=str(d.get("name", "custom")),
            image_hw=_pair(d, "image_hw", (20, 30), f"{ctx}.profile"),
            tactile_hw=_pair(d, "tactile_hw", (40, 30), f"{ctx}.profile"),
            conv_channels=_int(d, "conv_channels", 8, f"{ctx}.profile"),
            lstm_hidden=_int(d, "lstm_hidden", 32, f"{ctx}.profile"),
        )
    except ValueError as exc:
        raise ConfigError(f"{ctx}.profile: {exc}") from exc


@dataclass(frozen=True)
class ModelConfig:
    profile: ModelProfile
    variant: str = "dgml"


def _parse_model(d: dict) -> ModelConfig:
    ctx = "model"
    _reject_unknown(d, {"profile", "variant"}, ctx)
    variant = d.get("variant", "dgml")
    if variant not in VARIANTS:
        raise ConfigError(f"{ctx}.variant must be one of {VARIANTS}, got {variant!r}")
    return ModelConfig(profile=_parse_profile(d.get("profile", "desk"), ctx), variant=variant)


_TRAIN_KEYS = {
    "epochs",
    "batch_sequences",
    "tbptt_window",
    "learning_rate",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "huber_delta",
    "seed",
    "target_scales",
}


def _parse_train(d: dict) -> TrainConfig:
    ctx = "train"
    _reject_unknown(d, _TRAIN_KEYS, ctx)
    scales = d.get("target_scales", [30.0, 30.0, 40.0])
    if not (isinstance(scales, list) and len(scales) == 3 and all(isinstance(s, (int, float)) and not isinstance(s, bool) for s in scales)):
        raise ConfigError(f"{ctx}.target_scales must be a list of 3 numbers, got {scales!r}")
    cfg = TrainConfig(
        epochs=_int(d, "epochs", 60, ctx),
        batch_sequences=_int(d, "batch_sequences", 8, ctx),
        tbptt_window=_int(d, "tbptt_window", 20, ctx),
        learning_rate=_number(d, "learning_rate", 1e-3, ctx),
        adam_beta1=_number(d, "adam_beta1", 0.9, ctx),
        adam_beta2=_number(d, "adam_beta2", 0.999, ctx),
        adam_eps=_number(d, "adam_eps", 1e-8, ctx),
        huber_delta=_number(d, "huber_delta", 1.0, ctx),
        seed=_int(d, "seed", 0, ctx),
        target_scales=tuple(float(s) for s in scales),
    )
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{ctx}: {exc}") from exc
    return cfg


@dataclass(frozen=True)
class RunConfig:
    dataset: GeneratorConfig
    model: ModelConfig
    train: TrainConfig
    out_dir: str | None
    seeds: tuple[int, ...]


def parse_run_config(doc) -> RunConfig:
    doc = _mapping(doc, "config")
    _reject_unknown(doc, {"dataset", "model", "train", "out_dir", "seeds"}, "config")
    seeds = doc.get("seeds", [0])
    if not (isinstance(seeds, list) and seeds and all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)):
        raise ConfigError(f"config.seeds must be a non-empty list of non-negative integers, got {seeds!r}")
    out_dir = doc.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError(f"config.out_dir must be a string or null, got {out_dir!r}")
    return RunConfig(
        dataset=_parse_dataset(_mapping(doc.get("dataset", {}), "dataset")),
        model=_parse_model(_mapping(doc.get("model", {}), "model")),
        train=_parse_train(_mapping(doc.get("train", {}), "train")),
        out_dir=out_dir,
        seeds=tuple(seeds),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at byte {exc.pos}: {exc.msg}") from exc
    return parse_run_config(doc)
