"""Shared tiny configurations for the unit tests."""

import numpy as np

from src.base import ModelConfig, TrainConfig
from src.encoders import BBox, EntityDocument, LayoutDocument, Vocabulary, encode_layout


def tiny_config(**overrides) -> ModelConfig:
    values = dict(image_size=8, patch_size=2, width=16, depth=2, heads=2, caption_len=6,
                  region_len=3, max_entities=4, fourier_freqs=2, vocab_size=40, lora_rank=2,
                  precision="float64")
    values.update(overrides)
    return ModelConfig(**values)


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(steps=3, batch_size=2, learning_rate=1e-3, seed=0, timesteps=100,
                  diagnostic_interval=0, log_interval=1, jobs=1)
    values.update(overrides)
    return TrainConfig(**values)


def tiny_document(count: int = 2) -> LayoutDocument:
    boxes = [BBox(0.0, 0.0, 0.5, 0.5), BBox(0.5, 0.5, 1.0, 1.0), BBox(0.5, 0.0, 1.0, 0.5),
             BBox(0.0, 0.5, 0.5, 1.0)]
    captions = ["a red circle", "a blue square", "a green triangle", "a yellow circle"]
    entities = [EntityDocument(captions[i], boxes[i]) for i in range(count)]
    return LayoutDocument("red circle on black", entities)


def tiny_layout(config: ModelConfig, count: int = 2):
    return encode_layout(tiny_document(count), Vocabulary.default(), config.caption_len,
                         config.region_len, config.max_entities)


def random_latent(config: ModelConfig, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(config.channels, config.image_size, config.image_size))
