"""Run configuration: documented defaults, strict merging, and echoing.

A run is configured by one nested JSON document. Every key has a default
below; a file or command-line override may only touch keys that exist here —
an unknown key is an error naming the full dotted path.  The fully-resolved
document is echoed to ``out_dir/config.resolved`` so each run records
exactly what it ran with.

Seed resolution: an explicit ``seed`` (file or flag) wins; otherwise the
``SQS_SEED`` environment variable; otherwise 0.
"""

from __future__ import annotations

import copy
import json
import os

from .decoder import DecoderConfig
from .finetune import InteractionConfig
from .pretrain import LossWeights
from .renderer import RenderConfig

# Every configurable knob with its default. `seed: None` means "not set",
# resolved against SQS_SEED at load time.
DEFAULTS = {
    "seed": None,
    "out_dir": "runs/default",
    "data": {
        "n_scenes": 4,
        "n_objects": 3,
        "bounds": [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
        "n_views": 4,
        "image_size": [64, 64],
        "keep_rate": 0.3,
    },
    "render": {
        "tile_size": 16,
        "alpha_clamp": 0.9999,
        "contribution_floor": 1.0 / 255.0,
        "early_stop_transmittance": 1e-4,
    },
    "decoder": {
        "n_layers": 2,
        "n_offsets": 4,
        "n_heads": 4,
        "n_levels": 4,
        "voxel_size": None,
        "queries": 512,
        "feature_dim": 64,
    },
    "pretrain": {
        "total_steps": 2000,
        "warmup_steps": 500,
        "peak_lr": 2e-4,
        "weight_decay": 0.01,
        "w_rgb": 1.0,
        "w_depth": 0.05,
        "hflip_prob": 0.5,
        "checkpoint_every": 500,
        "snapshot_every": 0,
    },
    "finetune": {
        "steps": 500,
        "lr": 1e-3,
        "weight_decay": 0.01,
        "grid": 16,
        "k": 8,
        "alpha_thresh": 0.05,
        "pe_hidden": 64,
        "d_task": 64,
        "use_interaction": True,
        "train_fraction": 1.0,
    },
}

RESOLVED_NAME = "config.resolved"


class ConfigError(ValueError):
    """A malformed or unknown configuration key or value."""


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        full = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key: {full}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {full} expects a nested table")
            out[key] = _merge(base[key], value, full)
        else:
            out[key] = value
    return out


def set_key(cfg, dotted, value):
    """Override one dotted key in place; the key must already exist."""
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {'.'.join(parts[: i + 1])}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[parts[-1]] = value


def load_config(path=None, overrides=None):
    """Defaults <- file <- overrides, with the seed fallback applied.

    `overrides` maps dotted keys to values (command-line flags).
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                document = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(document, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        cfg = _merge(cfg, document)
    for dotted, value in (overrides or {}).items():
        set_key(cfg, dotted, value)
    if cfg["seed"] is None:
        env = os.environ.get("SQS_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise ConfigError(f"SQS_SEED must be an integer, got {env!r}")
    validate(cfg)
    return cfg


def validate(cfg):
    """Build every typed sub-config so its own invariants run."""
    try:
        render_config(cfg)
        decoder_config(cfg)
        loss_weights(cfg)
        interaction_config(cfg)
    except ValueError as e:
        raise ConfigError(str(e))
    data = cfg["data"]
    for key in ("n_scenes", "n_objects", "n_views"):
        if int(data[key]) < 1:
            raise ConfigError(f"data.{key} must be >= 1, got {data[key]}")
    if not 0.0 < float(data["keep_rate"]) <= 1.0:
        raise ConfigError(f"data.keep_rate must be in (0, 1], got {data['keep_rate']}")
    ft = cfg["finetune"]
    if not 0.0 < float(ft["train_fraction"]) <= 1.0:
        raise ConfigError(
            f"finetune.train_fraction must be in (0, 1], got {ft['train_fraction']}"
        )
    if int(cfg["pretrain"]["total_steps"]) <= int(cfg["pretrain"]["warmup_steps"]):
        raise ConfigError(
            "pretrain.total_steps must exceed pretrain.warmup_steps "
            f"({cfg['pretrain']['total_steps']} <= {cfg['pretrain']['warmup_steps']})"
        )


def write_resolved(cfg, out_dir):
    """Echo the fully-resolved config into out_dir/config.resolved."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, RESOLVED_NAME)
    with open(path, "w") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def render_config(cfg):
    r = cfg["render"]
    return RenderConfig(
        tile_size=int(r["tile_size"]),
        alpha_clamp=float(r["alpha_clamp"]),
        contribution_floor=float(r["contribution_floor"]),
        early_stop_transmittance=float(r["early_stop_transmittance"]),
    )


def decoder_config(cfg):
    d = cfg["decoder"]
    return DecoderConfig(
        n_layers=int(d["n_layers"]),
        n_offsets=int(d["n_offsets"]),
        n_heads=int(d["n_heads"]),
        n_views=int(cfg["data"]["n_views"]),
        n_levels=int(d["n_levels"]),
        voxel_size=None if d["voxel_size"] is None else float(d["voxel_size"]),
        K=int(d["queries"]),
        feature_dim=int(d["feature_dim"]),
    )


def loss_weights(cfg):
    p = cfg["pretrain"]
    return LossWeights(w_rgb=float(p["w_rgb"]), w_depth=float(p["w_depth"]))


def interaction_config(cfg):
    f = cfg["finetune"]
    return InteractionConfig(
        k=int(f["k"]),
        alpha_thresh=float(f["alpha_thresh"]),
        pe_hidden=int(f["pe_hidden"]),
    )
