#!/usr/bin/env python3
"""
Diffusion Training and Sampling

Noise schedule, epsilon-prediction losses with the region-aware term,
biased timestep sampling, the two training phases (Base pretraining, then
layout training with the Base weights frozen) and a DDIM sampler that
conditions on the layout only during the first part of the reverse process.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .base import ConfigurationError, ModelConfig, TrainConfig, TrainingError
from .diagnostics import AttnSimilarity, probe_similarity
from .encoders import BBox, Layout
from .mmdit import ForwardTrace, ModelWeights, VariantTag, Variant, attach_variant, forward, init_base
from .numcore import (
    Tensor, add, constant, masked_mean, mean_all, no_grad, permute, scale, square, sub,
)
from .optim import make_optimizer
from .utils.io_utils import write_csv
from .utils.rng import Rng

logger = logging.getLogger(__name__)

DEFAULT_LAYOUT_FRACTION = 0.3
METRIC_COLUMNS = ("step", "loss_layout", "loss_region", "loss_total", "sim_text", "sim_layout")


class TrainingSample(Protocol):
    image: np.ndarray
    layout: Layout


@dataclass
class Schedule:
    """Linear beta schedule; alpha_bar(0) is 1 by convention."""

    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.timesteps < 1:
            raise ConfigurationError("timesteps must be positive")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.timesteps, dtype=np.float64)
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not (1 <= t <= self.timesteps):
            raise ConfigurationError(f"timestep {t} outside [1, {self.timesteps}]")
        return float(self.alpha_bars[t - 1])


def q_sample(schedule: Schedule, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps."""
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * np.asarray(z0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def sample_timestep(config: TrainConfig, rng: Rng, tagged: bool = False) -> Union[int, Tuple[int, int]]:
    """
    Draw a training timestep in [1, T].

    With bias sampling the component is chosen first (probability p1 for the
    high-noise component), then the component's normal is redrawn until its
    rounded value lands in [1, T]. Without it, t is uniform.

    Args:
        config: Training configuration (mixture parameters)
        rng: Random stream
        tagged: Also return the component index (1 or 2; 0 for uniform)
    """
    T = config.timesteps
    if not config.bias_sampling:
        t = int(rng.integers(1, T + 1))
        return (t, 0) if tagged else t

    component = 1 if rng.random() < config.mixture_p1 else 2
    center = config.mixture_center1 if component == 1 else config.mixture_center2
    sigma = config.sigma1 if component == 1 else config.sigma2
    mean = center * T
    std = float(T) if config.sigma_is_t else sigma * T
    while True:
        t = int(np.rint(mean + std * rng.normal()))
        if 1 <= t <= T:
            return (t, component) if tagged else t


def region_mask(boxes: Union[Layout, Sequence[BBox]], grid: int) -> np.ndarray:
    """
    Token-grid mask of cells whose center lies in any box.

    Containment is half-open (x0 <= cx < x1), so abutting boxes never share
    a cell. Returns a boolean [grid, grid] array in patchify order.
    """
    if isinstance(boxes, Layout):
        boxes = boxes.boxes
    centers = (np.arange(grid, dtype=np.float64) + 0.5) / grid
    mask = np.zeros((grid, grid), dtype=bool)
    for box in boxes:
        rows = (centers >= box.y0) & (centers < box.y1)
        cols = (centers >= box.x0) & (centers < box.x1)
        mask |= np.outer(rows, cols)
    return mask


@dataclass
class LossTerms:
    layout: Tensor
    region: Tensor
    total: Tensor


def losses(eps: Union[Tensor, np.ndarray], eps_hat: Tensor, mask: np.ndarray, lambda_region: float,
           patch_size: int) -> LossTerms:
    """
    L_layout (pixel MSE), L_region (MSE over pixels of masked tokens, 0 when
    the mask is empty) and L' = L_layout + lambda * L_region.
    """
    if not isinstance(eps, Tensor):
        eps = constant(eps, dtype=eps_hat.dtype)
    err = square(sub(eps_hat, eps))
    loss_layout = mean_all(err)
    mask = np.asarray(mask, dtype=bool)
    if mask.any():
        pixel_mask = np.kron(mask, np.ones((patch_size, patch_size), dtype=bool))
        loss_region = mean_all(masked_mean(permute(err, (1, 2, 0)), pixel_mask))
    else:
        loss_region = constant(np.zeros((), dtype=eps_hat.dtype))
    return LossTerms(loss_layout, loss_region, add(loss_layout, scale(loss_region, lambda_region)))


@dataclass
class StepRecord:
    step: int
    loss_layout: float
    loss_region: float
    loss_total: float
    sim_text: Optional[float] = None
    sim_layout: Optional[float] = None


@dataclass
class RunMetrics:
    """Per-step scalar series of one training run."""

    phase: str = "layout"
    variant: str = "base"
    records: List[StepRecord] = field(default_factory=list)
    probes: List[Tuple[int, AttnSimilarity]] = field(default_factory=list)
    events: Dict[str, int] = field(default_factory=dict)

    def log(self, record: StepRecord) -> None:
        self.records.append(record)

    def log_probe(self, step: int, similarity: AttnSimilarity) -> None:
        self.probes.append((step, similarity))
        for record in reversed(self.records):
            if record.step == step:
                record.sim_text, record.sim_layout = similarity.image_text, similarity.image_layout
                break

    def column(self, name: str) -> List[float]:
        return [getattr(r, name) for r in self.records]

    def median(self, name: str, start: int, stop: int) -> float:
        values = [getattr(r, name) for r in self.records if start <= r.step < stop]
        if not values:
            raise TrainingError(f"No {name} values recorded in steps [{start}, {stop})")
        return float(np.median(values))

    def to_rows(self) -> List[Dict]:
        return [vars(r) for r in self.records]

    def write_csv(self, path) -> None:
        write_csv(path, self.to_rows(), METRIC_COLUMNS)


@dataclass
class TrainingResult:
    weights: ModelWeights
    metrics: RunMetrics


StepCallback = Callable[[int, ModelWeights, RunMetrics], bool]


def probe_inputs(dataset: Sequence[TrainingSample], config: TrainConfig, rng: Rng,
                 schedule: Optional[Schedule] = None) -> List[Tuple[np.ndarray, int, Layout]]:
    """Fixed noised inputs for the attention probe: the first probe_size samples."""
    schedule = schedule or Schedule(config.timesteps)
    inputs = []
    for index in range(min(config.probe_size, len(dataset))):
        sample = dataset[index]
        z0 = 2.0 * np.asarray(sample.image) - 1.0
        t = sample_timestep(config, rng)
        inputs.append((q_sample(schedule, z0, t, rng.normal(z0.shape)), t, sample.layout))
    return inputs


class Trainer:
    """
    Shared loop of both training phases.

    Each step draws a batch, per-sample timesteps and noise from the run's
    stream, builds one graph per sample (threaded when jobs > 1), averages
    the per-sample L' in index order and runs a single backward pass.
    """

    def __init__(self, weights: ModelWeights, dataset: Sequence[TrainingSample], config: TrainConfig,
                 lambda_region: float, rng: Rng, phase: str):
        if not dataset:
            raise TrainingError("Training dataset is empty")
        self.weights = weights
        self.dataset = dataset
        self.config = config
        self.lambda_region = lambda_region
        self.rng = rng
        self.schedule = Schedule(config.timesteps)
        self.metrics = RunMetrics(phase=phase, variant=str(weights.variant))
        self.optimizer = make_optimizer(weights.trainable(), config)
        self._probe_inputs = []
        if config.diagnostic_interval:
            self._probe_inputs = probe_inputs(dataset, config, rng.substream("probe"), self.schedule)

    def _sample_terms(self, sample: TrainingSample, t: int, eps: np.ndarray) -> LossTerms:
        cfg: ModelConfig = self.weights.config
        z0 = 2.0 * np.asarray(sample.image, dtype=np.float64) - 1.0
        z_t = q_sample(self.schedule, z0, t, eps)
        eps_hat = forward(self.weights, z_t, t, sample.layout, layout_active=True)
        mask = region_mask(sample.layout, cfg.grid)
        return losses(constant(eps, dtype=self.weights.dtype), eps_hat, mask, self.lambda_region, cfg.patch_size)

    def batch_terms(self, step: int) -> LossTerms:
        rng = self.rng.substream(f"step{step}")
        picks = rng.integers(0, len(self.dataset), self.config.batch_size)
        draws = []
        for index in picks:
            sample = self.dataset[int(index)]
            t = sample_timestep(self.config, rng)
            draws.append((sample, t, rng.normal(np.shape(sample.image))))

        if self.config.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.config.jobs) as executor:
                per_sample = list(executor.map(lambda d: self._sample_terms(*d), draws))
        else:
            per_sample = [self._sample_terms(*d) for d in draws]

        total, layout, region = per_sample[0].total, per_sample[0].layout, per_sample[0].region
        for terms in per_sample[1:]:
            total = add(total, terms.total)
            layout = add(layout, terms.layout)
            region = add(region, terms.region)
        factor = 1.0 / len(per_sample)
        return LossTerms(scale(layout, factor), scale(region, factor), scale(total, factor))

    def probe(self, step: int) -> Optional[AttnSimilarity]:
        if not self._probe_inputs:
            return None
        similarity = probe_similarity(self.weights, self._probe_inputs)
        self.metrics.log_probe(step, similarity)
        logger.info(f"[{self.metrics.phase}] step {step}: sim_text={similarity.image_text} "
                    f"sim_layout={similarity.image_layout}")
        return similarity

    def run(self, callback: Optional[StepCallback] = None) -> TrainingResult:
        config = self.config
        interval = config.diagnostic_interval
        logger.info(f"[{self.metrics.phase}] training {self.weights!r} for {config.steps} steps")
        for step in range(config.steps):
            self.optimizer.zero_grad()
            terms = self.batch_terms(step)
            terms.total.backward()
            self.optimizer.step()
            self.metrics.log(StepRecord(step, terms.layout.item(), terms.region.item(), terms.total.item()))
            if interval and step % interval == 0:
                self.probe(step)
            if step % config.log_interval == 0:
                logger.info(f"[{self.metrics.phase}] step {step}: L_layout={terms.layout.item():.5f} "
                            f"L_region={terms.region.item():.5f} L'={terms.total.item():.5f}")
            else:
                logger.debug(f"[{self.metrics.phase}] step {step}: L'={terms.total.item():.5f}")
            if callback is not None and callback(step + 1, self.weights, self.metrics):
                logger.info(f"[{self.metrics.phase}] stopped by callback after step {step}")
                break
        else:
            if interval and config.steps:
                self.probe(config.steps)
        return TrainingResult(self.weights, self.metrics)


def pretrain_base(dataset: Sequence[TrainingSample], model_config: ModelConfig, config: TrainConfig,
                  callback: Optional[StepCallback] = None) -> TrainingResult:
    """Train fresh Base weights on captions only (no region term)."""
    rng = Rng(config.seed).substream("pretrain")
    weights = init_base(model_config, rng)
    return Trainer(weights, dataset, config, 0.0, rng.substream("loop"), "pretrain").run(callback)


def train_layout(base: ModelWeights, variant: VariantTag, dataset: Sequence[TrainingSample],
                 config: TrainConfig, callback: Optional[StepCallback] = None) -> TrainingResult:
    """
    Attach a layout variant to pretrained Base weights and train only the
    new parameters.

    Raises:
        TrainingError: If the variant is Base or the weights are not Base weights.
    """
    if variant.kind is Variant.BASE:
        raise TrainingError("The layout phase needs a layout variant, not Base")
    if base.variant.kind is not Variant.BASE:
        raise TrainingError(f"The layout phase starts from Base weights, got {base.variant}")
    rng = Rng(config.seed).substream(f"layout/{variant}")
    weights = attach_variant(base, variant, rng)
    trainer = Trainer(weights, dataset, config, config.lambda_region, rng.substream("loop"), "layout")
    return trainer.run(callback)


def layout_step_count(steps: int, fraction: float = DEFAULT_LAYOUT_FRACTION) -> int:
    """Number of leading sampler steps that see the layout: ceil(fraction * S)."""
    return math.ceil(Fraction(fraction).limit_denominator(1000) * steps)


@dataclass
class SamplerTrace:
    """Per-step record of which reverse steps ran the layout path."""

    timesteps: List[int] = field(default_factory=list)
    layout_active: List[bool] = field(default_factory=list)
    layout_path_calls: List[int] = field(default_factory=list)


def sample_image(weights: ModelWeights, layout: Layout, steps: int = 50, eta: float = 0.0, seed: int = 0,
                 schedule: Optional[Schedule] = None, layout_fraction: float = DEFAULT_LAYOUT_FRACTION,
                 trace: Optional[SamplerTrace] = None) -> np.ndarray:
    """
    DDIM reverse process over S uniformly spaced timesteps.

    The layout is active on steps 1..ceil(fraction * S) (highest noise
    first) and bypassed afterwards.

    Returns:
        [3, H, W] image clamped to [0, 1].
    """
    schedule = schedule or Schedule()
    if steps < 1:
        raise ConfigurationError("sampler steps must be at least 1")
    if steps > schedule.timesteps:
        raise ConfigurationError(f"sampler steps {steps} exceed the {schedule.timesteps} training timesteps")

    cfg = weights.config
    rng = Rng(seed).substream("sampler")
    timesteps = np.round(np.linspace(schedule.timesteps, 1, steps)).astype(int)
    active_steps = layout_step_count(steps, layout_fraction)
    x = rng.normal((cfg.channels, cfg.image_size, cfg.image_size))

    with no_grad():
        for i, t in enumerate(timesteps, start=1):
            active = i <= active_steps
            step_trace = ForwardTrace()
            eps = forward(weights, x, int(t), layout, layout_active=active, trace=step_trace).data
            eps = eps.astype(np.float64)
            if trace is not None:
                trace.timesteps.append(int(t))
                trace.layout_active.append(active)
                trace.layout_path_calls.append(step_trace.layout_path_calls)

            ab = schedule.alpha_bar(int(t))
            ab_prev = schedule.alpha_bar(int(timesteps[i])) if i < steps else 1.0
            x0 = np.clip((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
            sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
            direction = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0)) * eps
            x = math.sqrt(ab_prev) * x0 + direction
            if sigma > 0.0:
                x = x + sigma * rng.normal(x.shape)

    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)
