"""Model / training configuration and the layered flat run config.

Run configs are flat key-value documents with keys namespaced by section,
e.g. ``{"model.d": 64, "train.epochs": 300}``. Layering order is
defaults <- file <- command-line overrides.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import UsageError

ABLATION_SWITCHES = ("ksm", "vsm", "kim", "ggm")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    heads: int = 4
    coattn_depth: int = 2
    text_layers: int = 2
    diagram_layers: int = 2
    ggm_layers: int = 2
    ffn_mult: int = 4
    image_size: int = 224
    gamma: int = 14
    channels: int = 1
    max_text_len: int = 128
    dropout: float = 0.0
    theta: float = 0.5
    use_ksm: bool = True
    use_vsm: bool = True
    use_kim: bool = True
    use_ggm: bool = True
    legality_mask: bool = True
    max_decode_len: int = 32
    max_steps: int = 8
    freeze_diagram_encoder: bool = False

    @property
    def patch_size(self) -> int:
        return self.image_size // self.gamma

    @property
    def num_patches(self) -> int:
        return self.gamma * self.gamma

    def without(self, switch: str) -> "ModelConfig":
        if switch not in ABLATION_SWITCHES:
            raise UsageError(f"unknown ablation switch {switch!r}; choose from {ABLATION_SWITCHES}")
        return replace(self, **{f"use_{switch}": False})

    @property
    def variant_name(self) -> str:
        off = [s for s in ABLATION_SWITCHES if not getattr(self, f"use_{s}")]
        return "full" if not off else "w/o " + "+".join(s.upper() for s in off)


@dataclass(frozen=True)
class TrainConfig:
    lr_text_context: float = 2e-5
    lr_fusion_ggm: float = 1e-5
    lr_other: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    grad_clip: float = 5.0
    sched_sample: float = 0.0
    eval_every: int = 0
    beam_size: int = 10
    double: bool = False
    # masked-patch reconstruction epochs run on the training diagrams before training
    diagram_pretrain_epochs: int = 0
    # stop once the validation split reaches this Total accuracy (None: never)
    target_accuracy: float | None = None


PRESETS = {
    # 7x7 grid of 16px patches keeps desk-scale runs fast
    "toy": {"model.image_size": 112, "model.gamma": 7},
    "full": {"model.d": 256, "model.freeze_diagram_encoder": True, "train.diagram_pretrain_epochs": 20},
}


def default_run_config() -> dict:
    cfg = {f"model.{f.name}": getattr(ModelConfig(), f.name) for f in fields(ModelConfig)}
    cfg.update({f"train.{f.name}": getattr(TrainConfig(), f.name) for f in fields(TrainConfig)})
    cfg.update({
        "data.train": None,
        "data.eval": None,
        "data.knowledge_base": None,
        "data.vocabulary": None,
        "eval.theta": None,
        "eval.beam_size": 10,
    })
    return cfg


def _coerce(key, value, template):
    if isinstance(value, str) and not isinstance(template, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    if isinstance(template, bool) and not isinstance(value, bool):
        raise UsageError(f"{key} expects true/false, got {value!r}")
    if isinstance(template, int) and not isinstance(template, bool) and isinstance(value, float):
        if value != int(value):
            raise UsageError(f"{key} expects an integer, got {value!r}")
        value = int(value)
    if isinstance(template, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def resolve_run_config(path=None, overrides=(), preset="toy") -> dict:
    """Merge defaults, an optional preset, a flat JSON file and ``key=value`` overrides."""
    cfg = default_run_config()
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    layers = [PRESETS[preset]]
    if path is not None:
        layers.append(json.loads(Path(path).read_text(encoding="utf-8")))
    parsed = {}
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        parsed[k.strip()] = v.strip()
    layers.append(parsed)
    for layer in layers:
        for k, v in layer.items():
            if k not in cfg:
                raise UsageError(f"unknown config key {k!r}")
            cfg[k] = _coerce(k, v, cfg[k])
    return cfg


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig(**{f.name: cfg[f"model.{f.name}"] for f in fields(ModelConfig)})


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(**{f.name: cfg[f"train.{f.name}"] for f in fields(TrainConfig)})


def to_flat(model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> dict:
    out = {f"model.{k}": v for k, v in asdict(model_cfg).items()}
    if train_cfg is not None:
        out.update({f"train.{k}": v for k, v in asdict(train_cfg).items()})
    return out
