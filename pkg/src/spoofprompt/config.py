"""Nested key-value run configuration: defaults, file loading, overrides.

The config document is YAML with sections ``data``, ``synth``, ``encoder``
and ``train`` (see README for the full schema).  CLI flags override file
values which override defaults.
"""

from __future__ import annotations

import copy
import hashlib
from pathlib import Path

import yaml

from .encoders import EncoderConfig
from .errors import ConfigError
from .training import TrainConfig

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "data": {
        "manifest": None,
        "train_fraction": 0.8,
    },
    "synth": {
        "live": 600,
        "physical": 300,
        "digital": 300,
        "image_size": 32,
        "alpha": 0.8,
    },
    "encoder": {
        "image_size": 32,
        "patch_size": 8,
        "embed_dim": 32,
        "depth": 4,
        "heads": 4,
        "text_width": 32,
        "image_width": 48,
        "max_text_len": 16,
        "temperature": 0.05,
        "mlp_ratio": 4.0,
        "init_std": 0.02,
    },
    "train": {
        "steps": 300,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "lambda_consistency": 0.1,
        "caa_quantile": 0.3,
        "caa_weight": 2.0,
        "context_clusters": 4,
        "text_prompt_len": 4,
        "visual_prompt_len": 4,
        "prompt_depth": None,
        "eval_every": 50,
        "threshold": 0.5,
        "scpg": True,
        "caa": True,
    },
    "vocab": None,          # optional vocabulary file path
    "class_prompts": None,  # optional class-prompt YAML path
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults merged with an optional YAML document."""
    doc = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return doc
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        loaded = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} failed to parse: {exc}") from exc
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file {path} must hold a mapping at top level")
    unknown = set(loaded) - set(doc)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return _deep_merge(doc, loaded)


def build_encoder_config(doc: dict) -> EncoderConfig:
    enc = doc["encoder"]
    try:
        return EncoderConfig(
            image_size=int(enc["image_size"]),
            patch_size=int(enc["patch_size"]),
            embed_dim=int(enc["embed_dim"]),
            depth=int(enc["depth"]),
            heads=int(enc["heads"]),
            text_width=int(enc["text_width"]),
            image_width=int(enc["image_width"]),
            max_text_len=int(enc["max_text_len"]),
            temperature=float(enc["temperature"]),
            mlp_ratio=float(enc.get("mlp_ratio", 4.0)),
            init_std=float(enc.get("init_std", 0.02)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad encoder config: {exc}") from exc


def build_train_config(doc: dict, seed: int | None = None,
                       scpg: bool | None = None, caa: bool | None = None) -> TrainConfig:
    tr = doc["train"]
    depth = tr.get("prompt_depth")
    try:
        return TrainConfig(
            steps=int(tr["steps"]),
            batch_size=int(tr["batch_size"]),
            learning_rate=float(tr["learning_rate"]),
            lambda_consistency=float(tr["lambda_consistency"]),
            caa_quantile=float(tr["caa_quantile"]),
            caa_weight=float(tr["caa_weight"]),
            seed=int(doc["seed"] if seed is None else seed),
            scpg_on=bool(tr["scpg"] if scpg is None else scpg),
            caa_on=bool(tr["caa"] if caa is None else caa),
            context_clusters=int(tr["context_clusters"]),
            text_prompt_len=int(tr["text_prompt_len"]),
            visual_prompt_len=int(tr["visual_prompt_len"]),
            prompt_depth=None if depth is None else int(depth),
            eval_every=int(tr["eval_every"]),
            threshold=float(tr["threshold"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def content_hash(paths: list, extras: list[str] | None = None) -> str:
    """SHA-256 content hash of input files plus literal strings."""
    h = hashlib.sha256()
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        h.update(p.name.encode())
        if p.exists():
            h.update(p.read_bytes())
    for s in extras or []:
        h.update(s.encode())
    return h.hexdigest()
