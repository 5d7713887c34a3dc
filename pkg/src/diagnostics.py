#!/usr/bin/env python3
"""
Diagnostics

Modality-competition measurement on captured attention maps, and extra
parameter / MAC accounting of the layout variants. Analytic cost formulas
mirror the forward pass op by op; ``instrumented_costs`` measures the same
quantities from a real forward under the matmul MAC counter.
"""

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .base import ConfigurationError, ModelConfig, NumericalError
from .encoders import BBox, Entity, Layout
from .mmdit import (
    AttentionRecord, ForwardTrace, ModelWeights, Variant, VariantTag, attach_variant, forward, init_base,
)
from .numcore import count_macs, no_grad
from .utils.io_utils import save_json, write_csv
from .utils.rng import Rng

logger = logging.getLogger(__name__)

TOP_FRACTION = 0.01
MAC_CONVENTION = ("one multiply-accumulate = 1 MAC; matrix products only "
                  "(softmax, normalization and activations excluded); one denoising step")
SIMILARITY_COLUMNS = ("step", "block", "head", "sim_text", "sim_layout")


# --- Attention similarity ---

def top_fraction_mean(values: np.ndarray, fraction: float = TOP_FRACTION) -> float:
    """Mean of the top ceil(fraction * n) entries (at least one)."""
    flat = np.asarray(values, dtype=np.float64).reshape(-1)
    if flat.size == 0:
        raise ValueError("top_fraction_mean of an empty region")
    k = max(1, math.ceil(fraction * flat.size))
    return float(np.partition(flat, flat.size - k)[flat.size - k:].mean())


@dataclass
class AttnSimilarity:
    """
    Image-to-text and image-to-layout attention scores.

    A score is None when its modality never appeared in the captured maps.
    ``per_head`` maps (block, head) to the pair of per-head scores.
    """

    image_text: Optional[float] = None
    image_layout: Optional[float] = None
    per_head: Dict[Tuple[int, int], Tuple[Optional[float], Optional[float]]] = field(default_factory=dict)


def _mean_over_heads_then_blocks(scores: Dict[Tuple[int, int], List[float]]) -> Optional[float]:
    by_block: Dict[int, List[float]] = defaultdict(list)
    for (block, _head), values in scores.items():
        by_block[block].append(float(np.mean(values)))
    if not by_block:
        return None
    return float(np.mean([np.mean(v) for _, v in sorted(by_block.items())]))


def attn_similarity(records: Sequence[AttentionRecord], fraction: float = TOP_FRACTION) -> AttnSimilarity:
    """
    Score image queries against text and layout keys.

    For each captured head map, the image-query rows by target-key columns
    sub-matrix is reduced to the mean of its top entries; scores are then
    averaged over heads and over blocks.

    Raises:
        NumericalError: If a consumed map has a row not summing to 1.
    """
    scores = {"text": defaultdict(list), "layout": defaultdict(list)}
    for record in records:
        if "image" not in record.query_spans:
            continue
        row_sums = record.probs.sum(axis=-1)
        if not np.allclose(row_sums, 1.0, atol=1e-6):
            raise NumericalError(f"Attention rows of block {record.block} head {record.head} do not sum to 1")
        q0, q1 = record.query_spans["image"]
        for modality in ("text", "layout"):
            if modality not in record.key_spans:
                continue
            k0, k1 = record.key_spans[modality]
            if q1 <= q0 or k1 <= k0:
                continue
            region = record.probs[q0:q1, k0:k1]
            scores[modality][(record.block, record.head)].append(top_fraction_mean(region, fraction))

    keys = sorted(set(scores["text"]) | set(scores["layout"]))
    per_head = {}
    for key in keys:
        text = scores["text"].get(key)
        layout = scores["layout"].get(key)
        per_head[key] = (float(np.mean(text)) if text else None, float(np.mean(layout)) if layout else None)
    return AttnSimilarity(
        image_text=_mean_over_heads_then_blocks(scores["text"]),
        image_layout=_mean_over_heads_then_blocks(scores["layout"]),
        per_head=per_head,
    )


def probe_similarity(weights: ModelWeights, inputs: Sequence[Tuple[np.ndarray, int, Layout]]) -> AttnSimilarity:
    """Run the probe batch with attention capture and pool the records."""
    records: List[AttentionRecord] = []
    with no_grad():
        for z_t, t, layout in inputs:
            trace = ForwardTrace(capture_attention=True)
            forward(weights, z_t, t, layout, layout_active=True, trace=trace)
            records.extend(trace.records)
    return attn_similarity(records)


def similarity_rows(probes: Sequence[Tuple[int, AttnSimilarity]]) -> List[Dict]:
    rows = []
    for step, similarity in probes:
        for (block, head), (text, layout) in sorted(similarity.per_head.items()):
            rows.append({"step": step, "block": block, "head": head, "sim_text": text, "sim_layout": layout})
    return rows


def write_similarity_csv(path: Union[str, Path], probes: Sequence[Tuple[int, AttnSimilarity]]) -> Path:
    return write_csv(path, similarity_rows(probes), SIMILARITY_COLUMNS)


# --- Cost accounting ---

@dataclass
class CostReport:
    variant: str
    entities: int
    base_params: int
    extra_params: int
    param_ratio: float
    base_macs: int
    extra_macs: int
    mac_ratio: float

    @classmethod
    def build(cls, variant: VariantTag, entities: int, base_params: int, extra_params: int,
              base_macs: int, extra_macs: int) -> "CostReport":
        return cls(str(variant), entities, base_params, extra_params, extra_params / base_params,
                   base_macs, extra_macs, extra_macs / base_macs)

    def to_dict(self) -> Dict:
        return asdict(self)


def _modality_params(cfg: ModelConfig) -> int:
    d, r = cfg.width, cfg.mlp_ratio
    adaln = 6 * d * d + 6 * d
    norms = 4 * d
    attn = 4 * (d * d + d)
    mlp = (r * d * d + r * d) + (r * d * d + d)
    return adaln + norms + attn + mlp


def base_param_count(cfg: ModelConfig) -> int:
    d, pd = cfg.width, cfg.patch_dim
    embed = (pd * d + d) + cfg.vocab_size * d + 2 * (d * d + d)
    final = (2 * d * d + 2 * d) + (pd * d + pd)
    return embed + cfg.depth * 2 * _modality_params(cfg) + final


def extra_param_count(cfg: ModelConfig, variant: VariantTag) -> int:
    d, B = cfg.width, cfg.depth
    if variant.kind is Variant.BASE:
        return 0
    encoder = (d + 8 * cfg.fourier_freqs) * d + d + d * d + d
    if variant.kind is Variant.ADAPTER:
        per_block = 3 * (d * d + d)
    elif variant.kind is Variant.M3:
        per_block = _modality_params(cfg)
    elif variant.kind is Variant.SIAM:
        per_block = _modality_params(cfg) + 3 * (d * d + d) + (d * d + d)
    else:
        r = variant.rank
        # image q/k/v, layout q/k/v, layout o and delta are d x d; layout fc1 is (ratio*d) x d
        per_block = r * (2 * d) * 8 + r * (d + cfg.mlp_ratio * d)
    return encoder + B * per_block


def base_mac_count(cfg: ModelConfig) -> int:
    d, B, r = cfg.width, cfg.depth, cfg.mlp_ratio
    tz, tp, pd = cfg.image_tokens, cfg.caption_len, cfg.patch_dim
    t = tz + tp
    per_block = 2 * 6 * d * d + (4 + 2 * r) * t * d * d + 2 * t * t * d
    return tz * pd * d + 2 * d * d + B * per_block + 2 * d * d + tz * d * pd


def extra_mac_count(cfg: ModelConfig, variant: VariantTag, entities: int) -> int:
    """MACs a variant adds to one forward with N entities and the layout active."""
    if variant.kind is Variant.BASE or entities == 0:
        return 0
    d, B, r = cfg.width, cfg.depth, cfg.mlp_ratio
    tz, tp, n = cfg.image_tokens, cfg.caption_len, entities
    encoder = n * ((d + 8 * cfg.fourier_freqs) * d + d * d)
    if variant.kind is Variant.ADAPTER:
        per_block = 2 * n * d * d + 2 * tz * n * d + tz * d * d
    elif variant.kind is Variant.M3:
        t = tz + tp
        per_block = 6 * d * d + (4 + 2 * r) * n * d * d + 2 * d * ((t + n) ** 2 - t * t)
    else:
        per_block = 6 * d * d + (4 + 2 * r) * n * d * d + 4 * tz * d * d + 2 * (tz + n) ** 2 * d
        if variant.kind is Variant.SIAM_LORA:
            per_block += variant.rank * d * d * (8 + r)
    return encoder + B * per_block


def count_costs(cfg: ModelConfig, variant: VariantTag, entities: int) -> CostReport:
    """Closed-form parameter and MAC counts for one denoising step."""
    if entities < 0 or entities > cfg.max_entities:
        raise ConfigurationError(f"entity count {entities} outside [0, {cfg.max_entities}]")
    return CostReport.build(variant, entities, base_param_count(cfg), extra_param_count(cfg, variant),
                            base_mac_count(cfg), extra_mac_count(cfg, variant, entities))


def synthetic_layout(cfg: ModelConfig, entities: int) -> Layout:
    """A valid layout with the requested entity count on a regular grid of boxes."""
    side = max(1, math.ceil(math.sqrt(max(entities, 1))))
    cells = []
    for index in range(entities):
        row, col = divmod(index, side)
        cells.append(Entity(np.array([1] + [0] * (cfg.region_len - 1)),
                            BBox(col / side, row / side, (col + 1) / side, (row + 1) / side)))
    caption = np.array([1 + (i % (cfg.vocab_size - 1)) for i in range(cfg.caption_len)])
    return Layout(caption, cells, cfg.max_entities)


def instrumented_costs(cfg: ModelConfig, variant: VariantTag, entities: int, seed: int = 0) -> CostReport:
    """Measure parameters from the weight store and MACs from one counted forward."""
    rng = Rng(seed)
    base = init_base(cfg, rng)
    weights = attach_variant(base, variant, rng)
    layout = synthetic_layout(cfg, entities)
    z_t = rng.substream("input").normal((cfg.channels, cfg.image_size, cfg.image_size))

    with no_grad():
        with count_macs() as base_counter:
            forward(base, z_t, 500, layout)
        with count_macs() as variant_counter:
            forward(weights, z_t, 500, layout, layout_active=True)

    base_params = base.count_params()
    extra_params = weights.count_params(weights.trainable_names()) if variant.uses_layout else 0
    return CostReport.build(variant, entities, base_params, extra_params,
                            base_counter.macs, variant_counter.macs - base_counter.macs)


def write_cost_report(path: Union[str, Path], reports: Sequence[CostReport]) -> Path:
    payload = {"mac_convention": MAC_CONVENTION, "reports": [r.to_dict() for r in reports]}
    return save_json(path, payload)
