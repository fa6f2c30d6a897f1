"""TOML run configuration with strict key checking.

Sections map one-to-one onto the dataclasses they configure::

    [data]        SyntheticSpec fields (recipes as [[data.recipes]] tables)
    [model]       patching, mixer and Transformer sizes
    [objective]   ObjectiveWeights
    [controller]  ControllerConfig
    [train]       optimisation loop settings
    [output]      file names
"""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .controller import ControllerConfig
from .datagen import SourceRecipe, SyntheticSpec, case_study_recipes
from .objective import ObjectiveWeights
from .strformer import ArchConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


MODEL_KEYS = {"n_sources", "patch_sizes", "stride_ratio", "mask_ratio", "mixer",
              "mixer_hidden", "standardize_input", "init_scale",
              "d_model", "n_heads", "n_layers", "d_ff"}
TRAIN_KEYS = {"max_iters", "lr", "scheduler", "warmup_steps", "clip_norm", "seed",
              "deterministic", "diagnostics_every"}
DATA_KEYS = {"length", "n_sources", "n_channels", "recipes", "mixing", "noise_std", "seed",
             "mixing_matrix", "check_distinct"}


@dataclass
class OutputConfig:
    checkpoint: str = "checkpoint.strt"
    diagnostics: str = "diagnostics.jsonl"
    estimate: str = "S_hat.csv"


@dataclass
class RunConfig:
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def _check_keys(section: str, given: dict, allowed) -> None:
    for key in given:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [{section}]")


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def from_mapping(doc: dict) -> RunConfig:
    _check_keys("top level", doc, {"data", "model", "objective", "controller", "train", "output"})
    for name, section in doc.items():
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
    data = dict(doc.get("data", {}))
    model = dict(doc.get("model", {}))
    train = dict(doc.get("train", {}))
    _check_keys("data", data, DATA_KEYS)
    _check_keys("model", model, MODEL_KEYS)
    _check_keys("train", train, TRAIN_KEYS)
    _check_keys("objective", doc.get("objective", {}), _field_names(ObjectiveWeights))
    _check_keys("controller", doc.get("controller", {}), _field_names(ControllerConfig))
    _check_keys("output", doc.get("output", {}), _field_names(OutputConfig))

    try:
        recipes = data.pop("recipes", None)
        if recipes is not None:
            for i, r in enumerate(recipes):
                _check_keys(f"data.recipes[{i}]", r, _field_names(SourceRecipe))
            data["recipes"] = [SourceRecipe(**r) for r in recipes]
        elif "n_sources" in data and data["n_sources"] != 3:
            raise ConfigError("[data] recipes are required when n_sources != 3")
        else:
            data["recipes"] = case_study_recipes()
        spec = SyntheticSpec(**data)
        spec.validate()

        arch = ArchConfig(**{k: model.pop(k) for k in ("d_model", "n_heads", "n_layers", "d_ff")
                             if k in model})
        if "patch_sizes" in model:
            model["patch_sizes"] = tuple(int(p) for p in model["patch_sizes"])
        model.setdefault("n_sources", spec.n_sources)
        if train.get("clip_norm") is not None and train["clip_norm"] <= 0:
            train["clip_norm"] = None
        cfg = TrainConfig(arch=arch, weights=ObjectiveWeights(**doc.get("objective", {})),
                          controller=ControllerConfig(**doc.get("controller", {})),
                          **model, **train)
        cfg.validate()
        out = OutputConfig(**doc.get("output", {}))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(spec, cfg, out)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_mapping({})
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_mapping(doc)
