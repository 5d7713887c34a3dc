#!/usr/bin/env python3
"""
Base Classes for the Layout Lab

This module provides the exception hierarchy and the configuration dataclasses
shared by every stage of the lab: the tensor engine, the MM-DiT model, the
diffusion trainer, the synthetic benchmark and the CLI.
"""

import logging
import os
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List

logger = logging.getLogger(__name__)

ENV_PREFIX = "LAYOUTLAB_"


def _env(name: str, default: str) -> str:
    """Read a prefixed environment variable."""
    return os.getenv(f"{ENV_PREFIX}{name}", default)


def _env_bool(name: str, default: str) -> bool:
    return _env(name, default).lower() in ("1", "true", "yes", "on")


class LabError(Exception):
    """Base exception for lab-related errors."""
    pass


class ConfigurationError(LabError):
    """Raised when there's a configuration error."""
    pass


class ShapeError(LabError):
    """Raised when tensor shapes violate an operation's contract."""
    pass


class NumericalError(LabError):
    """Raised when an operation produces non-finite values."""
    pass


class VocabularyError(LabError):
    """Raised for unknown words or out-of-range token ids."""
    pass


class LayoutError(LabError):
    """Raised when a bounding box, entity or layout is invalid."""
    pass


class CheckpointError(LabError):
    """Raised when a tensor file or checkpoint cannot be read or is missing."""
    pass


class TrainingError(LabError):
    """Raised for illegal training phase / variant combinations."""
    pass


class DatasetError(LabError):
    """Raised when a dataset directory or seed split is malformed."""
    pass


@dataclass
class ModelConfig:
    """
    Architecture of the toy MM-DiT.

    Defaults follow standard MM-DiT practice at desk scale: 32x32 pixels,
    2x2 patches, width 64, four blocks of four heads.
    """

    image_size: int = field(default_factory=lambda: int(_env("IMAGE_SIZE", "32")))
    """Height and width of the square pixel image."""

    patch_size: int = field(default_factory=lambda: int(_env("PATCH_SIZE", "2")))
    """Side of a square patch; must divide image_size."""

    channels: int = 3

    width: int = field(default_factory=lambda: int(_env("WIDTH", "64")))
    """Token width d shared by every stream."""

    depth: int = field(default_factory=lambda: int(_env("DEPTH", "4")))
    """Number of MM-DiT blocks B."""

    heads: int = field(default_factory=lambda: int(_env("HEADS", "4")))

    mlp_ratio: int = 4

    caption_len: int = field(default_factory=lambda: int(_env("CAPTION_LEN", "16")))
    """Global caption length P (padded)."""

    region_len: int = field(default_factory=lambda: int(_env("REGION_LEN", "4")))
    """Region caption length C (padded)."""

    max_entities: int = field(default_factory=lambda: int(_env("MAX_ENTITIES", "10")))
    """N_max."""

    fourier_freqs: int = field(default_factory=lambda: int(_env("FOURIER_FREQS", "8")))
    """Fourier frequency count F; the box embedding has 8F entries."""

    vocab_size: int = 64

    lora_rank: int = field(default_factory=lambda: int(_env("LORA_RANK", "8")))

    precision: str = field(default_factory=lambda: _env("PRECISION", "float32"))
    """'float64' for verification, 'float32' for training."""

    def __post_init__(self):
        """Validate configuration values."""
        for name in ("image_size", "patch_size", "width", "depth", "heads",
                     "caption_len", "region_len", "fourier_freqs", "vocab_size",
                     "mlp_ratio", "lora_rank"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError("patch_size must divide image_size")
        if self.width % self.heads != 0:
            raise ConfigurationError("width must be divisible by heads")
        if self.max_entities < 0:
            raise ConfigurationError("max_entities must be non-negative")
        if self.vocab_size > 256:
            raise ConfigurationError("vocab_size must not exceed 256")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be 'float32' or 'float64'")

    @property
    def grid(self) -> int:
        """Patch tokens per image side."""
        return self.image_size // self.patch_size

    @property
    def image_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def __repr__(self) -> str:
        return (f"ModelConfig(d={self.width}, B={self.depth}, heads={self.heads}, "
                f"image={self.image_size}, patch={self.patch_size})")


@dataclass
class TrainConfig:
    """
    Configuration of both training phases.

    The mixture parameters implement biased timestep sampling; sigma values
    are standard deviations unless sigma_is_t requests the literal N(mu, T)
    reading.
    """

    steps: int = field(default_factory=lambda: int(_env("STEPS", "5000")))
    batch_size: int = field(default_factory=lambda: int(_env("BATCH_SIZE", "32")))
    learning_rate: float = field(default_factory=lambda: float(_env("LEARNING_RATE", "5e-4")))
    optimizer: str = field(default_factory=lambda: _env("OPTIMIZER", "adam"))
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = field(default_factory=lambda: int(_env("SEED", "0")))

    timesteps: int = field(default_factory=lambda: int(_env("TIMESTEPS", "1000")))
    """Diffusion training steps T."""

    lambda_region: float = field(default_factory=lambda: float(_env("LAMBDA_REGION", "2.0")))
    bias_sampling: bool = field(default_factory=lambda: _env_bool("BIAS_SAMPLING", "true"))
    mixture_p1: float = 0.7
    mixture_p2: float = 0.3
    mixture_center1: float = 0.7
    """Component-1 mean as a fraction of T."""
    mixture_center2: float = 0.0
    sigma1: float = 0.2
    """Component-1 standard deviation as a fraction of T."""
    sigma2: float = 0.25
    sigma_is_t: bool = False
    """Use sigma = T for both components (literal reading)."""

    diagnostic_interval: int = field(default_factory=lambda: int(_env("DIAGNOSTIC_INTERVAL", "250")))
    """Steps between attention-similarity probes (K); 0 disables."""
    probe_size: int = 4
    log_interval: int = field(default_factory=lambda: int(_env("LOG_INTERVAL", "50")))
    jobs: int = field(default_factory=lambda: int(_env("JOBS", "1")))

    def __post_init__(self):
        """Validate configuration values."""
        if self.lambda_region < 0:
            raise ConfigurationError("lambda_region must be non-negative")
        if abs(self.mixture_p1 + self.mixture_p2 - 1.0) > 1e-9:
            raise ConfigurationError("mixture_p1 + mixture_p2 must equal 1")
        if not (0.0 <= self.mixture_p1 <= 1.0):
            raise ConfigurationError("mixture_p1 must be between 0.0 and 1.0")
        if self.steps < 0:
            raise ConfigurationError("steps must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError("optimizer must be 'adam' or 'sgd'")
        if self.timesteps < 1:
            raise ConfigurationError("timesteps must be positive")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ConfigurationError("mixture sigmas must be positive")
        if self.diagnostic_interval < 0 or self.log_interval < 1:
            raise ConfigurationError("intervals must be non-negative (log_interval positive)")
        if self.jobs < 1:
            raise ConfigurationError("jobs must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def __repr__(self) -> str:
        return (f"TrainConfig(steps={self.steps}, batch={self.batch_size}, "
                f"lr={self.learning_rate}, optimizer={self.optimizer}, "
                f"lambda_region={self.lambda_region}, bias={self.bias_sampling})")


@dataclass
class OracleConfig:
    """Thresholds of the deterministic pixel oracle."""

    foreground_distance: float = field(default_factory=lambda: float(_env("ORACLE_FG_DISTANCE", "0.25")))
    min_fill: float = field(default_factory=lambda: float(_env("ORACLE_MIN_FILL", "0.30")))
    min_iou: float = field(default_factory=lambda: float(_env("ORACLE_MIN_IOU", "0.6")))

    def __post_init__(self):
        if not (0.0 < self.foreground_distance < 1.0):
            raise ConfigurationError("foreground_distance must be in (0, 1)")
        for name in ("min_fill", "min_iou"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ConfigurationError(f"{name} must be between 0.0 and 1.0")


@dataclass
class LayoutRulesConfig:
    """Dataset filtering rules and coarse-input conversion constants."""

    min_area: float = field(default_factory=lambda: float(_env("MIN_AREA", "0.02")))
    min_count: int = field(default_factory=lambda: int(_env("MIN_COUNT", "3")))
    max_count: int = field(default_factory=lambda: int(_env("MAX_COUNT", "10")))
    scribble_pad: float = field(default_factory=lambda: float(_env("SCRIBBLE_PAD", "0.05")))
    point_size: float = field(default_factory=lambda: float(_env("POINT_SIZE", "0.2")))

    def __post_init__(self):
        if not (0.0 <= self.min_area < 1.0):
            raise ConfigurationError("min_area must be in [0, 1)")
        if self.min_count < 0 or self.max_count < self.min_count:
            raise ConfigurationError("entity count range is empty")
        if not (0.0 <= self.scribble_pad < 0.5):
            raise ConfigurationError("scribble_pad must be in [0, 0.5)")
        if not (0.0 < self.point_size <= 1.0):
            raise ConfigurationError("point_size must be in (0, 1]")


def _env_list(name: str, default: str) -> List[str]:
    return [item.strip() for item in _env(name, default).split(",") if item.strip()]


@dataclass
class ExperimentConfig:
    """
    Ablation experiment: which variants and strategies to train, on how much
    data, with which seeds, and where outputs go.

    Outputs land under ``<out_dir>/<name>/<variant>/<seed>/``.
    """

    name: str = field(default_factory=lambda: _env("EXPERIMENT", "ablation"))
    out_dir: str = field(default_factory=lambda: _env("OUT", "runs"))
    variants: List[str] = field(default_factory=lambda: _env_list("VARIANTS", "adapter,m3,siam"))
    seeds: int = field(default_factory=lambda: int(_env("SEEDS", "3")))
    base_seed: int = field(default_factory=lambda: int(_env("SEED", "0")))
    train_scenes: int = field(default_factory=lambda: int(_env("TRAIN_SCENES", "2000")))
    eval_scenes: int = field(default_factory=lambda: int(_env("EVAL_SCENES", "500")))
    pretrain_steps: int = field(default_factory=lambda: int(_env("PRETRAIN_STEPS", "8000")))
    layout_steps: int = field(default_factory=lambda: int(_env("LAYOUT_STEPS", "5000")))
    sample_steps: int = field(default_factory=lambda: int(_env("SAMPLE_STEPS", "50")))
    eta: float = 0.0

    strategy_lambdas: List[float] = field(default_factory=lambda: [0.0, 2.0])
    strategy_variant: str = "siam"
    strategy_target: float = field(default_factory=lambda: float(_env("STRATEGY_TARGET", "0.5")))
    """Oracle spatial rate that counts as converged."""
    strategy_eval_interval: int = field(default_factory=lambda: int(_env("STRATEGY_EVAL_INTERVAL", "250")))
    strategy_eval_scenes: int = field(default_factory=lambda: int(_env("STRATEGY_EVAL_SCENES", "32")))

    jobs: int = field(default_factory=lambda: int(_env("JOBS", "1")))

    def __post_init__(self):
        """Validate configuration values."""
        if not self.name or "/" in self.name:
            raise ConfigurationError("experiment name must be a non-empty path component")
        if not self.variants:
            raise ConfigurationError("at least one variant is required")
        for name in ("seeds", "train_scenes", "eval_scenes", "sample_steps", "jobs",
                     "strategy_eval_interval", "strategy_eval_scenes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.pretrain_steps < 0 or self.layout_steps < 0:
            raise ConfigurationError("step counts must be non-negative")
        if not (0.0 <= self.strategy_target <= 1.0):
            raise ConfigurationError("strategy_target must be between 0.0 and 1.0")
        if any(lam < 0 for lam in self.strategy_lambdas):
            raise ConfigurationError("strategy lambdas must be non-negative")

    @property
    def seed_list(self) -> List[int]:
        return [self.base_seed + i for i in range(self.seeds)]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def __repr__(self) -> str:
        return (f"ExperimentConfig(name={self.name}, variants={self.variants}, seeds={self.seeds}, "
                f"train={self.train_scenes}, eval={self.eval_scenes}, jobs={self.jobs})")
