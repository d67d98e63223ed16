"""Experiment configuration: ``key = value`` files with dotted sections.

A config file is plain text: one assignment per line, ``#`` starts a comment,
blank lines are ignored.  Keys are dotted (``trainer.epochs``), unknown keys
are rejected, and every omitted key falls back to its default.  The resolved
configuration can be echoed back out in a canonical form that parses to the
same values.

The only intentional strictness gap with the dataclasses: a config file must
use positive epoch counts and learning rates, while the dataclasses accept
zero so library callers can run no-op stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError, MaskNASError
from .finetune import FinetuneConfig
from .masker import MaskTrainConfig
from .searchspace import SearchSpaceSpec
from .trainer import TrainConfig


@dataclass
class AblationConfig:
    """Knobs for the architecture-comparison study."""
    random_arch_count: int = 5
    target_loss_factor: float = 1.1

    def validate(self):
        if self.random_arch_count < 1:
            raise ConfigError("random_arch_count must be at least 1")
        if self.target_loss_factor <= 0:
            raise ConfigError("target_loss_factor must be positive")


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic:blobs2:0"
    test_dataset: str = ""
    output_dir: str = ""
    seed: int = 0
    search: SearchSpaceSpec = field(default_factory=SearchSpaceSpec)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    masker: MaskTrainConfig = field(default_factory=MaskTrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)


def _p_int(s: str) -> int:
    return int(s, 10)


def _p_float(s: str) -> float:
    return float(s)


def _p_str(s: str) -> str:
    return s


def _p_auto_int(s: str):
    return None if s == "auto" else int(s, 10)


def _p_cells(s: str):
    # "auto" = thirds rule, "none" = all-normal, else comma indices
    if s == "auto":
        return None
    if s == "none":
        return ()
    return tuple(int(t.strip(), 10) for t in s.split(","))


def _p_ops(s: str):
    if s == "auto":
        return None
    return tuple(t.strip() for t in s.split(","))


def _e_plain(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _e_auto(v) -> str:
    return "auto" if v is None else _e_plain(v)


def _e_seq(v) -> str:
    if v is None:
        return "auto"
    if len(v) == 0:
        return "none"
    return ",".join(str(x) for x in v)


# key -> (section attr or "", field name, parse, encode)
_KEYS = {
    "dataset": ("", "dataset", _p_str, _e_plain),
    "test_dataset": ("", "test_dataset", _p_str, _e_plain),
    "output_dir": ("", "output_dir", _p_str, _e_plain),
    "seed": ("", "seed", _p_int, _e_plain),
    "search.nodes_per_cell": ("search", "nodes_per_cell", _p_int, _e_plain),
    "search.num_cells": ("search", "num_cells", _p_int, _e_plain),
    "search.init_channels": ("search", "init_channels", _p_int, _e_plain),
    "search.num_candidate_ops":
        ("search", "num_candidate_ops", _p_int, _e_plain),
    "search.num_classes": ("search", "num_classes", _p_int, _e_plain),
    "search.in_channels": ("search", "in_channels", _p_int, _e_plain),
    "search.reduction_cells": ("search", "reduction_cells", _p_cells, _e_seq),
    "search.candidate_ops": ("search", "candidate_ops", _p_ops, _e_seq),
    "trainer.epochs": ("trainer", "epochs", _p_int, _e_plain),
    "trainer.batch_size": ("trainer", "batch_size", _p_int, _e_plain),
    "trainer.w_lr": ("trainer", "w_lr", _p_float, _e_plain),
    "trainer.w_momentum": ("trainer", "w_momentum", _p_float, _e_plain),
    "trainer.w_weight_decay":
        ("trainer", "w_weight_decay", _p_float, _e_plain),
    "trainer.grad_clip": ("trainer", "grad_clip", _p_float, _e_plain),
    "trainer.arch_lr": ("trainer", "arch_lr", _p_float, _e_plain),
    "trainer.arch_weight_decay":
        ("trainer", "arch_weight_decay", _p_float, _e_plain),
    "trainer.warmup_epochs": ("trainer", "warmup_epochs", _p_int, _e_plain),
    "trainer.train_fraction":
        ("trainer", "train_fraction", _p_float, _e_plain),
    "trainer.sigma_kind": ("trainer", "sigma_kind", _p_str, _e_plain),
    "trainer.sigma_horizon":
        ("trainer", "sigma_horizon", _p_auto_int, _e_auto),
    "masker.epochs": ("masker", "epochs", _p_int, _e_plain),
    "masker.batch_size": ("masker", "batch_size", _p_int, _e_plain),
    "masker.lr_w_mask": ("masker", "lr_w_mask", _p_float, _e_plain),
    "masker.lr_arch_mask": ("masker", "lr_arch_mask", _p_float, _e_plain),
    "masker.lr_decay_factor":
        ("masker", "lr_decay_factor", _p_float, _e_plain),
    "masker.lr_decay_epoch": ("masker", "lr_decay_epoch", _p_int, _e_plain),
    "masker.mask_init": ("masker", "mask_init", _p_float, _e_plain),
    "masker.tau": ("masker", "tau", _p_float, _e_plain),
    "finetune.epochs": ("finetune", "epochs", _p_int, _e_plain),
    "finetune.batch_size": ("finetune", "batch_size", _p_int, _e_plain),
    "finetune.lr": ("finetune", "lr", _p_float, _e_plain),
    "finetune.momentum": ("finetune", "momentum", _p_float, _e_plain),
    "finetune.weight_decay":
        ("finetune", "weight_decay", _p_float, _e_plain),
    "finetune.grad_clip": ("finetune", "grad_clip", _p_float, _e_plain),
    "finetune.init_mode": ("finetune", "init_mode", _p_str, _e_plain),
    "ablation.random_arch_count":
        ("ablation", "random_arch_count", _p_int, _e_plain),
    "ablation.target_loss_factor":
        ("ablation", "target_loss_factor", _p_float, _e_plain),
}

# keys a config file must keep strictly positive (dataclasses allow zero)
_POSITIVE = (
    "trainer.epochs", "trainer.w_lr", "trainer.arch_lr",
    "masker.epochs", "masker.lr_w_mask", "masker.lr_arch_mask",
    "finetune.epochs", "finetune.lr",
)

_SECTIONS = ("search", "trainer", "masker", "finetune", "ablation")


def as_dict(cfg: ExperimentConfig) -> dict[str, str]:
    """Flatten a config into canonical key/value strings."""
    out = {}
    for key, (sect, name, _, enc) in _KEYS.items():
        obj = cfg if sect == "" else getattr(cfg, sect)
        out[key] = enc(getattr(obj, name))
    return out


def build_config(raw: dict[str, str]) -> ExperimentConfig:
    """Parse a complete flat key/value map into a validated config."""
    vals = {}
    for key, text in raw.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        _, _, parse, _ = _KEYS[key]
        try:
            vals[key] = parse(text)
        except (ValueError, TypeError):
            raise ConfigError(
                f"bad value for {key!r}: {text!r}") from None
    for key in _KEYS:
        if key not in vals:
            raise ConfigError(f"missing config key {key!r}")
    for key in _POSITIVE:
        if vals[key] <= 0:
            raise ConfigError(f"{key} must be positive, got {raw[key]}")
    kwargs: dict = {k: {} for k in _SECTIONS}
    top = {}
    for key, (sect, name, _, _) in _KEYS.items():
        if sect == "":
            top[name] = vals[key]
        else:
            kwargs[sect][name] = vals[key]
    try:
        cfg = ExperimentConfig(
            search=SearchSpaceSpec(**kwargs["search"]),
            trainer=TrainConfig(**kwargs["trainer"]),
            masker=MaskTrainConfig(**kwargs["masker"]),
            finetune=FinetuneConfig(**kwargs["finetune"]),
            ablation=AblationConfig(**kwargs["ablation"]),
            **top,
        )
        cfg.trainer.validate()
        cfg.masker.validate()
        cfg.finetune.validate()
        cfg.ablation.validate()
    except ConfigError:
        raise
    except MaskNASError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def parse_config(text: str) -> ExperimentConfig:
    raw = dict(DEFAULTS)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        hash_at = line.find("#")
        if hash_at >= 0:
            line = line[:hash_at]
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        raw[key] = value
    return build_config(raw)


def parse_config_file(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def apply_overrides(cfg: ExperimentConfig,
                    pairs: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` strings on top of an existing config."""
    raw = as_dict(cfg)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        key, _, value = pair.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        raw[key] = value.strip()
    return build_config(raw)


def echo_config(cfg: ExperimentConfig) -> str:
    """Canonical text form: sorted keys, one per line, reparses equal."""
    raw = as_dict(cfg)
    lines = ["# resolved configuration"]
    lines += [f"{k} = {raw[k]}" for k in sorted(raw)]
    return "\n".join(lines) + "\n"


DEFAULTS = as_dict(ExperimentConfig())
