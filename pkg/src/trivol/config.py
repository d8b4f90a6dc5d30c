"""Experiment configuration: schema, full-scale defaults, desk-scale preset, TOML IO.

The config file is a single TOML document with one table per training stage
(``[ssl]``, ``[distill]``, ``[finetune]``), a ``[paths]`` table for the three
dataset manifests, and a ``[synth]`` table for the synthetic-data generator.
Omitted keys fall back to the full-scale defaults (or to the desk preset when
loading with ``profile="desk"``). ``TRIVOL_OUTPUT_DIR`` overrides the output
directory; no other key is environment-overridable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigurationError, ConfigValidationError

ENV_OUTPUT_DIR = "TRIVOL_OUTPUT_DIR"

KL_DIRECTIONS = ("student_teacher", "teacher_student")
OPTIMIZERS = ("adamw", "sgd")
VOLUME_FORMATS = ("raw", "nifti")

# Minimum spatial extent: below this the five stride-2 stages degenerate to
# single-voxel maps too early (a dim of 4 halves below 1 before the last block).
MIN_INPUT_DIM = 8


@dataclass
class StageHyperParams:
    """Per-stage scalars. ``lambd`` is the invariance/redundancy trade-off for the
    pretraining stage and the latent-match weight for the distillation stage;
    it is unused by fine-tuning."""

    learning_rate: float
    weight_decay: float
    batch_size: int
    iterations: int
    lambd: float = 0.0
    early_stopping_patience: int | None = None

    def validate(self, name: str, is_distill: bool = False) -> list[str]:
        bad = []
        if not self.learning_rate > 0:
            bad.append(f"{name}.learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            bad.append(f"{name}.weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            bad.append(
                f"{name}.batch_size must be >= 2 (batch statistics and the "
                f"cross-correlation matrix are undefined for a single sample), got {self.batch_size}"
            )
        if self.iterations < 1:
            bad.append(f"{name}.iterations must be >= 1, got {self.iterations}")
        if self.lambd < 0:
            bad.append(f"{name}.lambd must be >= 0, got {self.lambd}")
        if is_distill and not 0.0 <= self.lambd <= 1.0:
            bad.append(f"{name}.lambd is a convex-combination weight and must lie in [0, 1], got {self.lambd}")
        if self.early_stopping_patience is not None and self.early_stopping_patience < 1:
            bad.append(f"{name}.early_stopping_patience must be >= 1, got {self.early_stopping_patience}")
        return bad


@dataclass
class SynthSpec:
    """Synthetic-data generator knobs (counts, class mix, domain-gap strength)."""

    n_unrelated: int = 2000
    n_related: int = 600
    n_target: int = 150
    class_proportions: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    shift: float = 1.0
    signal_strength: float = 1.0
    unrelated_abnormal_fraction: float = 0.25
    volume_format: str = "raw"

    def validate(self) -> list[str]:
        bad = []
        for key in ("n_unrelated", "n_related", "n_target"):
            if getattr(self, key) < 0:
                bad.append(f"synth.{key} must be >= 0, got {getattr(self, key)}")
        if abs(sum(self.class_proportions) - 1.0) > 1e-6:
            bad.append(f"synth.class_proportions must sum to 1, got {self.class_proportions}")
        if any(p < 0 for p in self.class_proportions):
            bad.append(f"synth.class_proportions must be non-negative, got {self.class_proportions}")
        if self.shift < 0:
            bad.append(f"synth.shift must be >= 0, got {self.shift}")
        if self.signal_strength <= 0:
            bad.append(f"synth.signal_strength must be > 0, got {self.signal_strength}")
        if not 0.0 <= self.unrelated_abnormal_fraction <= 1.0:
            bad.append(f"synth.unrelated_abnormal_fraction must lie in [0, 1]")
        if self.volume_format not in VOLUME_FORMATS:
            bad.append(f"synth.volume_format must be one of {VOLUME_FORMATS}, got {self.volume_format!r}")
        return bad


@dataclass
class ExperimentConfig:
    ssl: StageHyperParams
    distill: StageHyperParams
    finetune: StageHyperParams
    seed: int = 0
    latent_dim: int = 512
    projection_dim: int = 2048
    num_classes: int = 3
    input_shape: tuple[int, int, int] = (55, 55, 55)
    base_channels: int = 16
    distill_temperature: float = 1.0
    center_embeddings: bool = True
    kl_direction: str = "student_teacher"
    optimizer: str = "adamw"
    eval_every: int = 10
    u_manifest: str = ""
    d_manifest: str = ""
    t_manifest: str = ""
    output_dir: str = "runs"
    synth: SynthSpec = field(default_factory=SynthSpec)

    def validate(self) -> list[str]:
        bad = []
        bad += self.ssl.validate("ssl")
        bad += self.distill.validate("distill", is_distill=True)
        bad += self.finetune.validate("finetune")
        bad += self.synth.validate()
        if self.num_classes < 2:
            bad.append(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.input_shape) != 3 or any(d < MIN_INPUT_DIM for d in self.input_shape):
            bad.append(
                f"input_shape must be three dims each >= {MIN_INPUT_DIM} "
                f"(stride-2 schedule collapses smaller extents), got {self.input_shape}"
            )
        if self.latent_dim < 1:
            bad.append(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.projection_dim < 1:
            bad.append(f"projection_dim must be >= 1, got {self.projection_dim}")
        if self.base_channels < 1:
            bad.append(f"base_channels must be >= 1, got {self.base_channels}")
        if not self.distill_temperature > 0:
            bad.append(f"distill_temperature must be > 0, got {self.distill_temperature}")
        if self.kl_direction not in KL_DIRECTIONS:
            bad.append(f"kl_direction must be one of {KL_DIRECTIONS}, got {self.kl_direction!r}")
        if self.optimizer not in OPTIMIZERS:
            bad.append(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.eval_every < 1:
            bad.append(f"eval_every must be >= 1, got {self.eval_every}")
        return bad

    def class_names(self) -> tuple[str, ...]:
        base = ("CN", "AD", "FTD")
        if self.num_classes <= len(base):
            return base[: self.num_classes]
        return base + tuple(f"C{i}" for i in range(len(base), self.num_classes))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["synth"]["class_proportions"] = list(self.synth.class_proportions)
        return d


def default_config() -> ExperimentConfig:
    """The published full-scale configuration, verbatim."""
    return ExperimentConfig(
        ssl=StageHyperParams(learning_rate=0.5, weight_decay=1.5e-6, batch_size=128,
                             iterations=29_300, lambd=0.005),
        distill=StageHyperParams(learning_rate=0.01, weight_decay=1.5e-6, batch_size=128,
                                 iterations=600, lambd=0.001),
        finetune=StageHyperParams(learning_rate=0.0005, weight_decay=1e-5, batch_size=64,
                                  iterations=150, early_stopping_patience=20),
    )


def desk_config() -> ExperimentConfig:
    """Desk-scale preset: 32³ volumes, a narrow backbone, and iteration counts
    sized so the full comparative experiment runs on a small CPU box.
    Learning rates are re-tuned for AdamW at this scale."""
    return ExperimentConfig(
        ssl=StageHyperParams(learning_rate=5e-3, weight_decay=1.5e-6, batch_size=32,
                             iterations=600, lambd=0.005),
        distill=StageHyperParams(learning_rate=1e-3, weight_decay=1.5e-6, batch_size=32,
                                 iterations=300, lambd=0.1),
        finetune=StageHyperParams(learning_rate=1e-3, weight_decay=1e-5, batch_size=32,
                                  iterations=100, early_stopping_patience=20),
        latent_dim=64,
        projection_dim=128,
        input_shape=(32, 32, 32),
        base_channels=4,
        eval_every=5,
    )


def profile_config(profile: str) -> ExperimentConfig:
    if profile == "full":
        return default_config()
    if profile == "desk":
        return desk_config()
    raise ConfigurationError(f"unknown profile {profile!r}; expected 'desk' or 'full'")


_STAGE_KEYS = {f.name for f in dataclasses.fields(StageHyperParams)}
_SYNTH_KEYS = {f.name for f in dataclasses.fields(SynthSpec)}
_PATH_KEYS = {"u_manifest", "d_manifest", "t_manifest"}
_TOP_KEYS = {
    "seed", "latent_dim", "projection_dim", "num_classes", "input_shape", "base_channels",
    "distill_temperature", "center_embeddings", "kl_direction", "optimizer", "eval_every",
    "output_dir",
}


def _expect(value: Any, kind: type, where: str) -> Any:
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigurationError(f"key {where!r}: expected an integer, got {value!r}")
    if not isinstance(value, kind):
        raise ConfigurationError(f"key {where!r}: expected {kind.__name__}, got {value!r}")
    return value


def _apply_stage(hp: StageHyperParams, table: dict, name: str) -> None:
    for key, value in table.items():
        if key not in _STAGE_KEYS:
            raise ConfigurationError(f"unknown key {name}.{key!r} in config")
        if key in ("batch_size", "iterations", "early_stopping_patience"):
            setattr(hp, key, _expect(value, int, f"{name}.{key}"))
        else:
            setattr(hp, key, _expect(value, float, f"{name}.{key}"))


def apply_dict(cfg: ExperimentConfig, data: dict[str, Any]) -> ExperimentConfig:
    """Overlay a parsed config mapping onto ``cfg`` in place. Unknown keys are errors."""
    for key, value in data.items():
        if key in ("ssl", "distill", "finetune"):
            if not isinstance(value, dict):
                raise ConfigurationError(f"key {key!r}: expected a table")
            _apply_stage(getattr(cfg, key), value, key)
        elif key == "paths":
            if not isinstance(value, dict):
                raise ConfigurationError("key 'paths': expected a table")
            for pkey, pval in value.items():
                if pkey not in _PATH_KEYS and pkey != "output_dir":
                    raise ConfigurationError(f"unknown key paths.{pkey!r} in config")
                target = "output_dir" if pkey == "output_dir" else pkey
                setattr(cfg, target, _expect(pval, str, f"paths.{pkey}"))
        elif key == "synth":
            if not isinstance(value, dict):
                raise ConfigurationError("key 'synth': expected a table")
            for skey, sval in value.items():
                if skey not in _SYNTH_KEYS:
                    raise ConfigurationError(f"unknown key synth.{skey!r} in config")
                if skey in ("n_unrelated", "n_related", "n_target"):
                    setattr(cfg.synth, skey, _expect(sval, int, f"synth.{skey}"))
                elif skey == "class_proportions":
                    if not isinstance(sval, list) or not all(isinstance(p, (int, float)) for p in sval):
                        raise ConfigurationError("key 'synth.class_proportions': expected a list of numbers")
                    cfg.synth.class_proportions = tuple(float(p) for p in sval)
                elif skey == "volume_format":
                    cfg.synth.volume_format = _expect(sval, str, "synth.volume_format")
                else:
                    setattr(cfg.synth, skey, _expect(sval, float, f"synth.{skey}"))
        elif key == "input_shape":
            if not isinstance(value, list) or len(value) != 3:
                raise ConfigurationError(f"key 'input_shape': expected a list of three integers, got {value!r}")
            cfg.input_shape = tuple(_expect(v, int, "input_shape[i]") for v in value)
        elif key in _PATH_KEYS or key in ("output_dir", "kl_direction", "optimizer"):
            setattr(cfg, key, _expect(value, str, key))
        elif key == "center_embeddings":
            cfg.center_embeddings = _expect(value, bool, key)
        elif key == "distill_temperature":
            cfg.distill_temperature = _expect(value, float, key)
        elif key in _TOP_KEYS:
            setattr(cfg, key, _expect(value, int, key))
        else:
            raise ConfigurationError(f"unknown key {key!r} in config")
    return cfg


def load_config(path: str | Path | None = None, profile: str = "full",
                seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    """Load and validate a config.

    Starts from the named profile's defaults, overlays the TOML file (if any),
    then the explicit overrides, then the output-dir environment override.
    """
    cfg = profile_config(profile)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid TOML: {exc}") from exc
        apply_dict(cfg, data)
    if seed is not None:
        cfg.seed = int(seed)
    if output_dir is not None:
        cfg.output_dir = str(output_dir)
    env_out = os.environ.get(ENV_OUTPUT_DIR)
    if env_out:
        cfg.output_dir = env_out
    violations = cfg.validate()
    if violations:
        raise ConfigValidationError(violations)
    return cfg


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigurationError(f"cannot serialize {value!r} to TOML")


def dumps_config(cfg: ExperimentConfig) -> str:
    """Emit ``cfg`` as TOML. Covers exactly the documented schema (scalars,
    strings, flat arrays, one level of tables); round-trips through load."""
    lines = []
    top = {
        "seed": cfg.seed, "latent_dim": cfg.latent_dim, "projection_dim": cfg.projection_dim,
        "num_classes": cfg.num_classes, "input_shape": list(cfg.input_shape),
        "base_channels": cfg.base_channels, "distill_temperature": cfg.distill_temperature,
        "center_embeddings": cfg.center_embeddings, "kl_direction": cfg.kl_direction,
        "optimizer": cfg.optimizer, "eval_every": cfg.eval_every, "output_dir": cfg.output_dir,
    }
    for key, value in top.items():
        lines.append(f"{key} = {_toml_value(value)}")
    lines.append("")
    lines.append("[paths]")
    for key in sorted(_PATH_KEYS):
        lines.append(f"{key} = {_toml_value(getattr(cfg, key))}")
    for name in ("ssl", "distill", "finetune"):
        hp: StageHyperParams = getattr(cfg, name)
        lines.append("")
        lines.append(f"[{name}]")
        lines.append(f"learning_rate = {_toml_value(hp.learning_rate)}")
        lines.append(f"weight_decay = {_toml_value(hp.weight_decay)}")
        lines.append(f"batch_size = {_toml_value(hp.batch_size)}")
        lines.append(f"iterations = {_toml_value(hp.iterations)}")
        lines.append(f"lambd = {_toml_value(hp.lambd)}")
        if hp.early_stopping_patience is not None:
            lines.append(f"early_stopping_patience = {_toml_value(hp.early_stopping_patience)}")
    lines.append("")
    lines.append("[synth]")
    for f_ in dataclasses.fields(SynthSpec):
        value = getattr(cfg.synth, f_.name)
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{f_.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dumps_config(cfg))


def architecture_fingerprint(cfg: ExperimentConfig) -> str:
    """Hash of the architecture-defining config subset. Checkpoints embed it and
    refuse to load into a model built from a different architecture."""
    arch = {
        "input_shape": list(cfg.input_shape),
        "base_channels": cfg.base_channels,
        "latent_dim": cfg.latent_dim,
        "projection_dim": cfg.projection_dim,
        "num_classes": cfg.num_classes,
    }
    return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]
