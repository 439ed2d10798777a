"""Run configuration: flat key=value files with dotted sections.

Defaults reproduce the published hyperparameter table field for field
(batch_size 64, n_crops 4, out_dim 1024, SGD, clip_grad 2.0, temperatures
0.04/0.1, lr 5e-4 to 1e-6 with 10 warmup epochs, weight decay 0.04 to 0.4,
teacher momentum 0.9995, ...). Artifact extensions live under dotted
sections (augment., jitter., backbone., head., distill., eval., data.).

CLI overrides win over the file; the fully resolved config is echoed into
the run directory and parse(echo(cfg)) == cfg.
"""

from __future__ import annotations

import ast
import difflib
import os
import warnings
from dataclasses import dataclass, field, fields, replace

from .augment import AugmentConfig, JitterStrengths
from .nets import BackboneConfig, HeadConfig, backbone_preset


class ConfigError(Exception):
    """Invalid key, value, or constraint violation."""


@dataclass(frozen=True)
class DistillSettings:
    alpha: float = 1.0
    temp: float = 2.0
    scale_kl_by_t2: bool = True
    match_dim: bool = False
    epochs: int = 20
    lr: float = 0.01
    source: str = "checkpoint"  # checkpoint | logits


@dataclass(frozen=True)
class EvalSettings:
    k: int = 20
    vote_temp: float = 0.07
    weighting: str = "temperature-softmax"  # uniform | temperature-softmax
    probe_lr: float = 0.01
    probe_epochs: int = 30
    data_fraction: float = 1.0


@dataclass(frozen=True)
class DataSettings:
    kind: str = "synthetic-blobs"
    root: str = "7"
    class_count: int = 3
    n: int = 300
    noise: float = 0.04
    image_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    # Published hyperparameter table, key for key.
    batch_size: int = 64
    logging_freq: int = 1
    n_crops: int = 4
    n_epochs: int = 100
    out_dim: int = 1024
    optim: str = "SGD"
    clip_grad: float = 2.0
    norm_last_layer: bool = False
    batch_size_eval: int = 8
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    device_ids: tuple[int, ...] = (0,)
    pretrained: bool = True
    lr: float = 0.0005
    min_lr: float = 1e-06
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    weight_decay_end: float = 0.4
    momentum_teacher: float = 0.9995

    # Artifact extensions.
    seed: int = 0
    center_momentum: float = 0.9
    momentum_teacher_end: float = 1.0
    sgd_momentum: float = 0.9
    clip_mode: str = "norm"  # norm | element
    eq2_verbatim: bool = False
    ckpt_freq: int = 0  # epochs between checkpoints; 0 = final only
    pretrained_path: str = ""
    pretrained_teacher_path: str = ""

    # Sections.
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone_family: str = "mobilevit-like"
    backbone_scale: str = "desk"
    backbone_width_mult: float = 1.0
    head_hidden: tuple[int, ...] = (512, 512)
    head_bottleneck: int = 128
    distill: DistillSettings = field(default_factory=DistillSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    data: DataSettings = field(default_factory=DataSettings)

    # Derived builders ---------------------------------------------------

    def augment_config(self) -> AugmentConfig:
        return replace(self.augment, n_crops=self.n_crops)

    def backbone_config(self) -> BackboneConfig:
        cfg = backbone_preset(self.backbone_family, self.backbone_scale)
        cfg = replace(cfg, input_sizes=(self.augment.global_size, self.augment.local_size))
        if self.backbone_width_mult != 1.0:
            cfg = scale_backbone(cfg, self.backbone_width_mult)
        return cfg

    def head_config(self, in_dim: int) -> HeadConfig:
        return HeadConfig(
            in_dim=in_dim,
            hidden_dims=self.head_hidden,
            bottleneck_dim=self.head_bottleneck,
            out_dim=self.out_dim,
            norm_last_layer=self.norm_last_layer,
        )

    def validate(self) -> None:
        if not 0 < self.teacher_temp < self.student_temp:
            raise ConfigError(
                f"temperature ordering violated: need 0 < teacher_temp < student_temp, "
                f"got teacher_temp={self.teacher_temp} student_temp={self.student_temp}"
            )
        if self.n_crops < 2:
            raise ConfigError(f"n_crops must be >= 2, got {self.n_crops}")
        if self.clip_grad <= 0:
            raise ConfigError(f"clip_grad must be > 0, got {self.clip_grad}")
        if self.out_dim < 2:
            raise ConfigError(f"out_dim must be >= 2, got {self.out_dim}")
        if self.n_epochs < 1:
            raise ConfigError(f"n_epochs must be >= 1, got {self.n_epochs}")
        if not 0 <= self.warmup_epochs < self.n_epochs:
            raise ConfigError(
                f"warmup_epochs must be in [0, n_epochs), got {self.warmup_epochs} of {self.n_epochs}"
            )
        if self.min_lr > self.lr:
            raise ConfigError(f"min_lr {self.min_lr} exceeds lr {self.lr}")
        if not 0 < self.momentum_teacher <= self.momentum_teacher_end <= 1:
            raise ConfigError(
                f"need 0 < momentum_teacher <= momentum_teacher_end <= 1, got "
                f"{self.momentum_teacher}, {self.momentum_teacher_end}"
            )
        if not 0 < self.center_momentum < 1:
            raise ConfigError(f"center_momentum must be in (0, 1), got {self.center_momentum}")
        if self.clip_mode not in ("norm", "element"):
            raise ConfigError(f"clip_mode must be 'norm' or 'element', got {self.clip_mode!r}")
        if self.optim != "SGD":
            raise ConfigError(f"only SGD is supported, got optim={self.optim!r}")
        if not 0 <= self.distill.alpha <= 1:
            raise ConfigError(f"distill.alpha must be in [0, 1], got {self.distill.alpha}")
        if self.distill.temp <= 0:
            raise ConfigError(f"distill.temp must be > 0, got {self.distill.temp}")
        if self.distill.source not in ("checkpoint", "logits"):
            raise ConfigError(f"distill.source must be 'checkpoint' or 'logits', got {self.distill.source!r}")
        if self.eval.k < 1:
            raise ConfigError(f"eval.k must be >= 1, got {self.eval.k}")
        if self.eval.weighting not in ("uniform", "temperature-softmax"):
            raise ConfigError(f"unknown eval.weighting {self.eval.weighting!r}")
        if not 0 < self.eval.data_fraction <= 1:
            raise ConfigError(f"eval.data_fraction must be in (0, 1], got {self.eval.data_fraction}")
        try:
            self.augment_config().validate()
            self.backbone_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None


def scale_backbone(cfg: BackboneConfig, mult: float) -> BackboneConfig:
    """Shrink or grow a stage plan; attention dims stay head-divisible."""
    if mult <= 0:
        raise ConfigError(f"backbone width multiplier must be > 0, got {mult}")
    widths = tuple(max(4, int(round(w * mult))) for w in cfg.stage_widths)
    attn = tuple(
        max(cfg.heads, int(round(d * mult / cfg.heads)) * cfg.heads) for d in cfg.attn_dims
    )
    final = max(4, int(round(cfg.final_width * mult))) if cfg.final_width else 0
    return replace(cfg, stage_widths=widths, attn_dims=attn, final_width=final)


# Flat key table ---------------------------------------------------------
#
# flat key -> (section, attribute). Sections map onto nested dataclasses;
# "" is RunConfig itself.

_SECTIONS = {
    "": None,
    "augment": "augment",
    "jitter": ("augment", "jitter_strengths"),
    "backbone": None,
    "head": None,
    "distill": "distill",
    "eval": "eval",
    "data": "data",
}

_TOP_KEYS = [
    "batch_size", "logging_freq", "n_crops", "n_epochs", "out_dim", "optim",
    "clip_grad", "norm_last_layer", "batch_size_eval", "teacher_temp",
    "student_temp", "device_ids", "pretrained", "lr", "min_lr",
    "warmup_epochs", "weight_decay", "weight_decay_end", "momentum_teacher",
    "seed", "center_momentum", "momentum_teacher_end", "sgd_momentum",
    "clip_mode", "eq2_verbatim", "ckpt_freq", "pretrained_path",
    "pretrained_teacher_path",
]

_AUGMENT_KEYS = [
    "global_scale", "local_scale", "global_size", "local_size",
    "blur_p_global", "blur_p_local", "blur_radius", "solarize_p_global",
    "solarize_threshold", "jitter_p", "grayscale_p", "hflip_p", "vflip_p",
    "aspect_ratio",
]

_JITTER_KEYS = ["brightness", "contrast", "saturation", "hue"]
_BACKBONE_KEYS = {"family": "backbone_family", "scale": "backbone_scale", "width_mult": "backbone_width_mult"}
_HEAD_KEYS = {"hidden": "head_hidden", "bottleneck": "head_bottleneck"}
_DISTILL_KEYS = ["alpha", "temp", "scale_kl_by_t2", "match_dim", "epochs", "lr", "source"]
_EVAL_KEYS = ["k", "vote_temp", "weighting", "probe_lr", "probe_epochs", "data_fraction"]
_DATA_KEYS = ["kind", "root", "class_count", "n", "noise", "image_size"]


def known_keys() -> list[str]:
    keys = list(_TOP_KEYS)
    keys += [f"augment.{k}" for k in _AUGMENT_KEYS]
    keys += [f"jitter.{k}" for k in _JITTER_KEYS]
    keys += [f"backbone.{k}" for k in _BACKBONE_KEYS]
    keys += [f"head.{k}" for k in _HEAD_KEYS]
    keys += [f"distill.{k}" for k in _DISTILL_KEYS]
    keys += [f"eval.{k}" for k in _EVAL_KEYS]
    keys += [f"data.{k}" for k in _DATA_KEYS]
    return keys


def _parse_value(key: str, text: str):
    text = text.strip()
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        value = text  # bare string (paths, names)
    if isinstance(value, list):
        value = tuple(value)
    return value


def _coerce(key: str, value, template):
    """Match the type of the dataclass default; int->float is allowed."""
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(template, int) and not isinstance(template, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(template, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(template, str):
        if isinstance(value, int) and not isinstance(value, bool):
            return str(value)  # bare integers are fine for seed-like roots
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(template, tuple):
        if not isinstance(value, tuple):
            raise ConfigError(f"{key}: expected a tuple, got {value!r}")
        if template and all(isinstance(x, float) for x in template):
            return tuple(float(x) for x in value)
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")


def apply_overrides(cfg: RunConfig, pairs: dict[str, object]) -> RunConfig:
    """Apply {flat key: value} onto a RunConfig, with validation."""
    aug_kw: dict[str, object] = {}
    jit_kw: dict[str, object] = {}
    dis_kw: dict[str, object] = {}
    eva_kw: dict[str, object] = {}
    dat_kw: dict[str, object] = {}
    top_kw: dict[str, object] = {}
    for key, value in pairs.items():
        section, _, attr = key.partition(".")
        if not attr:
            section, attr = "", key
        if section == "" and attr in _TOP_KEYS:
            top_kw[attr] = _coerce(key, value, getattr(cfg, attr))
        elif section == "augment" and attr in _AUGMENT_KEYS:
            aug_kw[attr] = _coerce(key, value, getattr(cfg.augment, attr))
        elif section == "jitter" and attr in _JITTER_KEYS:
            jit_kw[attr] = _coerce(key, value, getattr(cfg.augment.jitter_strengths, attr))
        elif section == "backbone" and attr in _BACKBONE_KEYS:
            top_kw[_BACKBONE_KEYS[attr]] = _coerce(key, value, getattr(cfg, _BACKBONE_KEYS[attr]))
        elif section == "head" and attr in _HEAD_KEYS:
            coerced = value
            if attr == "hidden":
                if isinstance(value, int):
                    coerced = (value,)
                if not isinstance(coerced, tuple) or not all(isinstance(x, int) for x in coerced):
                    raise ConfigError(f"{key}: expected a tuple of integers, got {value!r}")
            else:
                coerced = _coerce(key, value, getattr(cfg, _HEAD_KEYS[attr]))
            top_kw[_HEAD_KEYS[attr]] = coerced
        elif section == "distill" and attr in _DISTILL_KEYS:
            dis_kw[attr] = _coerce(key, value, getattr(cfg.distill, attr))
        elif section == "eval" and attr in _EVAL_KEYS:
            eva_kw[attr] = _coerce(key, value, getattr(cfg.eval, attr))
        elif section == "data" and attr in _DATA_KEYS:
            dat_kw[attr] = _coerce(key, value, getattr(cfg.data, attr))
        else:
            suggestion = difflib.get_close_matches(key, known_keys(), n=1)
            hint = f"; nearest known key: {suggestion[0]}" if suggestion else ""
            raise ConfigError(f"unknown config key {key!r}{hint}")
        if key == "device_ids" and tuple(pairs[key]) != (0,):
            warnings.warn("device_ids is accepted but ignored; this artifact is single-device")
    if jit_kw:
        aug_kw["jitter_strengths"] = replace(cfg.augment.jitter_strengths, **jit_kw)
    if aug_kw:
        top_kw["augment"] = replace(cfg.augment, **aug_kw)
    if dis_kw:
        top_kw["distill"] = replace(cfg.distill, **dis_kw)
    if eva_kw:
        top_kw["eval"] = replace(cfg.eval, **eva_kw)
    if dat_kw:
        top_kw["data"] = replace(cfg.data, **dat_kw)
    return replace(cfg, **top_kw)


def parse_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, then overrides."""
    pairs: dict[str, object] = {}
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
                key, _, text = line.partition("=")
                pairs[key.strip()] = _parse_value(key.strip(), text)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, text = item.partition("=")
        pairs[key.strip()] = _parse_value(key.strip(), text)
    cfg = apply_overrides(RunConfig(), pairs)
    cfg.validate()
    return cfg


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return repr(value)


def echo_config(cfg: RunConfig) -> str:
    """Serialize every key in canonical order; parses back to an equal config."""
    lines = ["# resolved run configuration"]
    for key in _TOP_KEYS:
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    for key in _AUGMENT_KEYS:
        lines.append(f"augment.{key} = {_fmt(getattr(cfg.augment, key))}")
    for key in _JITTER_KEYS:
        lines.append(f"jitter.{key} = {_fmt(getattr(cfg.augment.jitter_strengths, key))}")
    for key, attr in _BACKBONE_KEYS.items():
        lines.append(f"backbone.{key} = {_fmt(getattr(cfg, attr))}")
    for key, attr in _HEAD_KEYS.items():
        lines.append(f"head.{key} = {_fmt(getattr(cfg, attr))}")
    for key in _DISTILL_KEYS:
        lines.append(f"distill.{key} = {_fmt(getattr(cfg.distill, key))}")
    for key in _EVAL_KEYS:
        lines.append(f"eval.{key} = {_fmt(getattr(cfg.eval, key))}")
    for key in _DATA_KEYS:
        lines.append(f"data.{key} = {_fmt(getattr(cfg.data, key))}")
    return "\n".join(lines) + "\n"


def config_to_pairs(cfg: RunConfig) -> dict[str, object]:
    """Flat {key: value} view of a config (for checkpoint metadata)."""
    pairs: dict[str, object] = {}
    for line in echo_config(cfg).splitlines():
        if line.startswith("#") or not line.strip():
            continue
        key, _, text = line.partition("=")
        pairs[key.strip()] = _parse_value(key.strip(), text)
    return pairs


def config_from_pairs(pairs: dict[str, object]) -> RunConfig:
    cfg = apply_overrides(RunConfig(), pairs)
    cfg.validate()
    return cfg
