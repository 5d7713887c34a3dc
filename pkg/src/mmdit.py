#!/usr/bin/env python3
"""
MM-DiT Backbone and Layout Integration Variants

The base block is a multimodal diffusion transformer block: image and caption
tokens keep separate weights and meet in one joint attention. Layout tokens
enter through one of four variants:

- Adapter: image queries cross-attend to layout keys/values after the joint
  attention, through a zero-initialized output projection.
- M3: layout becomes a third stream inside the joint attention.
- Siam: a second image-layout MM-Attention branch runs beside the image-text
  branch; its image output enters the image stream through a
  zero-initialized delta projection.
- SiamLoRA: the Siam branch built from frozen pretrained weights plus
  low-rank adapters.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .base import CheckpointError, ConfigurationError, ModelConfig, ShapeError
from .encoders import (
    Layout, LayoutEncoderWeights, embed_caption, layout_tokens, patchify,
    sinusoidal_positions, timestep_features, unpatchify,
)
from .numcore import (
    DTYPES, Tensor, add, add_scalar, bias_add, concat, constant, expand_rows, gelu,
    layer_norm, linear, matmul, mul, reshape, scale, silu, softmax_rows, split, transpose,
)
from .utils.io_utils import read_tensor_record, write_tensor_record
from .utils.rng import Rng

logger = logging.getLogger(__name__)

FULL_SCALE_LORA_RANK = 256
CHECKPOINT_MAGIC = b"LLCK"

MODALITY_LINEARS = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2", "adaln")
MODALITY_VECTORS = ("norm1.weight", "norm1.bias", "norm2.weight", "norm2.bias")


class Variant(str, Enum):
    BASE = "base"
    ADAPTER = "adapter"
    M3 = "m3"
    SIAM = "siam"
    SIAM_LORA = "siam_lora"


@dataclass(frozen=True)
class VariantTag:
    """Network variant of a run; SiamLoRA carries its rank."""

    kind: Variant
    rank: Optional[int] = None

    @classmethod
    def parse(cls, text: str, default_rank: int = 8) -> "VariantTag":
        """Parse 'base', 'adapter', 'm3', 'siam', 'siam_lora' or 'siam_lora:<rank>'."""
        name, _, rank = text.strip().lower().replace("-", "_").partition(":")
        aliases = {"siamlora": "siam_lora", "siamlayout": "siam", "m3_attention": "m3"}
        name = aliases.get(name, name)
        try:
            kind = Variant(name)
        except ValueError:
            raise ConfigurationError(f"Unknown variant '{text}'")
        if kind is Variant.SIAM_LORA:
            return cls(kind, int(rank) if rank else default_rank)
        if rank:
            raise ConfigurationError(f"Variant '{name}' takes no rank")
        return cls(kind)

    @property
    def uses_layout(self) -> bool:
        return self.kind is not Variant.BASE

    def __str__(self) -> str:
        return f"{self.kind.value}:{self.rank}" if self.kind is Variant.SIAM_LORA else self.kind.value


@dataclass
class ModelWeights:
    """
    Flat parameter store with a frozen/trainable partition.

    Parameters are addressed by dotted names. ``aliases`` maps a logical
    name prefix onto the prefix of the weights it reuses; LoRA factors are
    stored under the logical name as ``<name>.lora_a`` / ``<name>.lora_b``.
    """

    config: ModelConfig
    variant: VariantTag
    params: Dict[str, Tensor]
    frozen: Set[str] = field(default_factory=set)
    aliases: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.sync_requires_grad()

    def sync_requires_grad(self) -> None:
        for name, tensor in self.params.items():
            tensor.requires_grad = name not in self.frozen
            tensor.name = name

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    @property
    def dtype(self):
        return DTYPES[self.config.precision]

    def trainable_names(self) -> List[str]:
        return [n for n in self.params if n not in self.frozen]

    def trainable(self) -> List[Tensor]:
        return [self.params[n] for n in self.trainable_names()]

    def count_params(self, names: Optional[Sequence[str]] = None) -> int:
        names = self.params.keys() if names is None else names
        return int(sum(self.params[n].data.size for n in names))

    def _resolve(self, name: str) -> Optional[Tensor]:
        if name in self.params:
            return self.params[name]
        for prefix in sorted(self.aliases, key=len, reverse=True):
            if name.startswith(prefix + "."):
                target = self.aliases[prefix] + name[len(prefix):]
                return self.params.get(target)
        return None

    def vector(self, name: str) -> Optional[Tensor]:
        return self._resolve(name)

    def linear(self, name: str) -> Tuple[Tensor, Optional[Tensor]]:
        """Effective (weight, bias) of a linear layer, folding in LoRA factors."""
        weight = self._resolve(name + ".weight")
        lora_a = self.params.get(name + ".lora_a")
        if lora_a is not None:
            low_rank = matmul(self.params[name + ".lora_b"], lora_a)
            weight = low_rank if weight is None else add(weight, low_rank)
        if weight is None:
            raise KeyError(f"No weights for linear layer '{name}'")
        return weight, self._resolve(name + ".bias")

    def copy(self) -> "ModelWeights":
        params = {n: Tensor(t.data, dtype=t.dtype) for n, t in self.params.items()}
        return ModelWeights(self.config, self.variant, params, set(self.frozen), dict(self.aliases))

    def randomized(self, rng: Rng, std: float = 0.3) -> "ModelWeights":
        """Copy with every parameter redrawn; used to build generic test instances."""
        clone = self.copy()
        for name in clone.params:
            tensor = clone.params[name]
            tensor.data = rng.substream(name).normal(tensor.shape, scale=std).astype(self.dtype)
        return clone

    def __repr__(self) -> str:
        return (f"ModelWeights(variant={self.variant}, params={self.count_params()}, "
                f"trainable={self.count_params(self.trainable_names())})")


# --- Initialization ---

class _Init:
    """Collects named tensors drawn from per-name substreams."""

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        self.rng = rng
        self.dtype = DTYPES[config.precision]
        self.params: Dict[str, Tensor] = {}

    def normal(self, name: str, shape, std: float) -> None:
        data = self.rng.substream(name).normal(shape, scale=std)
        self.params[name] = Tensor(data.astype(self.dtype))

    def fill(self, name: str, shape, value: float) -> None:
        self.params[name] = Tensor(np.full(shape, value, dtype=self.dtype))

    def linear(self, name: str, d_out: int, d_in: int, std: Optional[float] = None,
               bias: bool = True) -> None:
        if std is None:
            std = 1.0 / math.sqrt(d_in)
        if std == 0.0:
            self.fill(name + ".weight", (d_out, d_in), 0.0)
        else:
            self.normal(name + ".weight", (d_out, d_in), std)
        if bias:
            self.fill(name + ".bias", (d_out,), 0.0)

    def modality(self, prefix: str, adaln_std: float = 0.0, q_std: Optional[float] = None,
                 k_std: Optional[float] = None, v_std: Optional[float] = None,
                 o_std: Optional[float] = None, fc2_std: Optional[float] = None) -> None:
        d = self.config.width
        hidden = self.config.mlp_ratio * d
        self.linear(f"{prefix}.adaln", 6 * d, d, std=adaln_std)
        for norm in ("norm1", "norm2"):
            self.fill(f"{prefix}.{norm}.weight", (d,), 1.0)
            self.fill(f"{prefix}.{norm}.bias", (d,), 0.0)
        self.linear(f"{prefix}.attn.q", d, d, std=q_std)
        self.linear(f"{prefix}.attn.k", d, d, std=k_std)
        self.linear(f"{prefix}.attn.v", d, d, std=v_std)
        self.linear(f"{prefix}.attn.o", d, d, std=o_std)
        self.linear(f"{prefix}.mlp.fc1", hidden, d)
        self.linear(f"{prefix}.mlp.fc2", d, hidden, std=fc2_std)


def init_base(config: ModelConfig, rng: Rng) -> ModelWeights:
    """Fresh Base (image + text) weights; modulation uses adaLN-Zero."""
    init = _Init(config, rng.substream("init_base"))
    d = config.width
    init.linear("patch_embed", d, config.patch_dim)
    init.normal("text_embed", (config.vocab_size, d), 1.0)
    init.linear("time.fc1", d, d)
    init.linear("time.fc2", d, d)
    for i in range(config.depth):
        for modality in ("image", "text"):
            init.modality(f"blocks.{i}.{modality}")
    init.linear("final.adaln", 2 * d, d, std=0.0)
    init.linear("final.proj", config.patch_dim, d, std=0.0)
    return ModelWeights(config, VariantTag(Variant.BASE), init.params)


def siam_lora_targets(config: ModelConfig) -> Dict[str, Optional[Tuple[int, int]]]:
    """
    LoRA targets of SiamLoRA: Linear1 (Q/K/V), Linear2 (output) and MLP1 of
    the image-layout branch, plus the low-rank delta projection.
    """
    d = config.width
    targets: Dict[str, Optional[Tuple[int, int]]] = {}
    for i in range(config.depth):
        for proj in ("q", "k", "v"):
            targets[f"blocks.{i}.siam.image.{proj}"] = None
            targets[f"blocks.{i}.layout.attn.{proj}"] = None
        targets[f"blocks.{i}.layout.attn.o"] = None
        targets[f"blocks.{i}.layout.mlp.fc1"] = None
        targets[f"blocks.{i}.siam.delta"] = (d, d)
    return targets


def attach_variant(base: ModelWeights, variant: VariantTag, rng: Rng) -> ModelWeights:
    """
    Freeze the Base weights and add the variant's trainable layout weights.

    Every output projection on a layout-conditioned path starts at zero.
    """
    if base.variant.kind is not Variant.BASE:
        raise ConfigurationError(f"attach_variant needs Base weights, got {base.variant}")
    config = base.config
    weights = base.copy()
    weights.variant = variant
    weights.frozen = set(weights.params)
    if variant.kind is Variant.BASE:
        weights.sync_requires_grad()
        return weights

    d = config.width
    init = _Init(config, rng.substream(f"attach/{variant}"))
    init.linear("layout_encoder.fc1", d, d + 8 * config.fourier_freqs)
    init.linear("layout_encoder.fc2", d, d)
    small = 0.02
    for i in range(config.depth):
        block = f"blocks.{i}"
        if variant.kind is Variant.ADAPTER:
            init.linear(f"{block}.adapter.k", d, d)
            init.linear(f"{block}.adapter.v", d, d)
            init.linear(f"{block}.adapter.o", d, d, std=0.0)
        elif variant.kind is Variant.M3:
            init.modality(f"{block}.layout", adaln_std=small, q_std=small, k_std=small,
                          v_std=0.0, o_std=0.0, fc2_std=0.0)
        elif variant.kind is Variant.SIAM:
            init.modality(f"{block}.layout", adaln_std=small, q_std=small, k_std=small,
                          o_std=0.0, fc2_std=0.0)
            for proj in ("q", "k", "v"):
                for part in ("weight", "bias"):
                    source = base.params[f"{block}.image.attn.{proj}.{part}"]
                    init.params[f"{block}.siam.image.{proj}.{part}"] = Tensor(source.data, dtype=source.dtype)
            init.linear(f"{block}.siam.delta", d, d, std=0.0)

    weights.params.update(init.params)
    if variant.kind is Variant.SIAM_LORA:
        for i in range(config.depth):
            weights.aliases[f"blocks.{i}.layout"] = f"blocks.{i}.text"
            weights.aliases[f"blocks.{i}.siam.image"] = f"blocks.{i}.image.attn"
        weights = lora_wrap(weights, variant.rank, siam_lora_targets(config), rng.substream("lora"))
    weights.sync_requires_grad()
    logger.info(f"Attached variant {variant}: {weights.count_params(weights.trainable_names())} trainable params")
    return weights


def lora_wrap(weights: ModelWeights, rank: int,
              targets: Union[Sequence[str], Dict[str, Optional[Tuple[int, int]]]],
              rng: Rng, init_std: float = 0.02) -> ModelWeights:
    """
    Add LoRA factors W + B A to the target linear layers.

    A is r x d_in (small random), B is d_out x r (zeros); only A and B are
    trainable, the base weight of each target is frozen.

    Args:
        weights: Weights to wrap (not modified)
        rank: LoRA rank r
        targets: Linear layer names, or a mapping name -> (d_out, d_in) for
            targets with no base weight (pure low-rank layers)
        rng: Stream for the A initialization
        init_std: Standard deviation of A

    Raises:
        ConfigurationError: If r < 1 or r > min(d_in, d_out).
    """
    if isinstance(targets, dict):
        shapes = targets
    else:
        shapes = {name: None for name in targets}
    if rank < 1:
        raise ConfigurationError("LoRA rank must be at least 1")

    wrapped = ModelWeights(weights.config, weights.variant, dict(weights.params),
                           set(weights.frozen), dict(weights.aliases))
    for name, shape in shapes.items():
        base = wrapped._resolve(name + ".weight")
        if shape is None:
            if base is None:
                raise ConfigurationError(f"LoRA target '{name}' has no base weight and no shape")
            shape = base.shape
        d_out, d_in = shape
        if rank > min(d_in, d_out):
            raise ConfigurationError(f"LoRA rank {rank} exceeds min(d_in={d_in}, d_out={d_out}) for '{name}'")
        data = rng.substream(name).normal((rank, d_in), scale=init_std).astype(weights.dtype)
        wrapped.params[name + ".lora_a"] = Tensor(data)
        wrapped.params[name + ".lora_b"] = Tensor(np.zeros((d_out, rank), dtype=weights.dtype))
        if base is not None:
            base_name = next(n for n, t in wrapped.params.items() if t is base)
            wrapped.frozen.add(base_name)
    wrapped.sync_requires_grad()
    return wrapped


def merge_lora(weights: ModelWeights) -> ModelWeights:
    """Bake every W + B A into a plain weight tensor."""
    merged = weights.copy()
    for name in [n[:-len(".lora_a")] for n in weights.params if n.endswith(".lora_a")]:
        base = weights._resolve(name + ".weight")
        low_rank = weights.params[name + ".lora_b"].data @ weights.params[name + ".lora_a"].data
        value = low_rank if base is None else base.data + low_rank
        del merged.params[name + ".lora_a"]
        del merged.params[name + ".lora_b"]
        merged.frozen.discard(name + ".lora_a")
        merged.frozen.discard(name + ".lora_b")
        merged.params[name + ".weight"] = Tensor(value.astype(weights.dtype))
    merged.sync_requires_grad()
    return merged


# --- Tracing ---

Spans = Dict[str, Tuple[int, int]]


@dataclass
class AttentionRecord:
    """Post-softmax attention map of one head."""

    block: int
    head: int
    branch: str
    probs: np.ndarray
    query_spans: Spans
    key_spans: Spans


@dataclass
class ForwardTrace:
    """Optional instrumentation of one forward pass."""

    capture_attention: bool = False
    records: List[AttentionRecord] = field(default_factory=list)
    layout_path_calls: int = 0


@dataclass
class TokenStreams:
    image: Tensor
    text: Optional[Tensor]
    layout: Optional[Tensor] = None

    def __post_init__(self):
        widths = {t.shape[1] for t in (self.image, self.text, self.layout) if t is not None}
        if len(widths) != 1:
            raise ShapeError(f"Token streams have different widths: {sorted(widths)}")


# --- Block building blocks ---

def _modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    rows = x.shape[0]
    return bias_add(mul(x, expand_rows(add_scalar(scale_, 1.0), rows)), shift)


def _gate(x: Tensor, gate: Tensor) -> Tensor:
    return mul(x, expand_rows(gate, x.shape[0]))


@dataclass
class _Prepared:
    """A stream after adaLN pre-norm and Q/K/V projection."""

    x: Tensor
    mods: List[Tensor]
    h: Tensor
    q: Tensor
    k: Tensor
    v: Tensor


def _modulation(weights: ModelWeights, prefix: str, c: Tensor) -> List[Tensor]:
    d = weights.config.width
    mod = linear(c, *weights.linear(f"{prefix}.adaln"))
    return split(reshape(mod, (6 * d,)), [d] * 6, axis=0)


def _prepare(weights: ModelWeights, prefix: str, x: Tensor, c: Tensor) -> _Prepared:
    mods = _modulation(weights, prefix, c)
    normed = layer_norm(x, weights.vector(f"{prefix}.norm1.weight"), weights.vector(f"{prefix}.norm1.bias"))
    h = _modulate(normed, mods[0], mods[1])
    return _Prepared(
        x=x, mods=mods, h=h,
        q=linear(h, *weights.linear(f"{prefix}.attn.q")),
        k=linear(h, *weights.linear(f"{prefix}.attn.k")),
        v=linear(h, *weights.linear(f"{prefix}.attn.v")),
    )


def _attention_residual(weights: ModelWeights, prefix: str, prepared: _Prepared, attended: Tensor) -> Tensor:
    projected = linear(attended, *weights.linear(f"{prefix}.attn.o"))
    return add(prepared.x, _gate(projected, prepared.mods[2]))


def _mlp_residual(weights: ModelWeights, prefix: str, x: Tensor, mods: List[Tensor]) -> Tensor:
    normed = layer_norm(x, weights.vector(f"{prefix}.norm2.weight"), weights.vector(f"{prefix}.norm2.bias"))
    h = _modulate(normed, mods[3], mods[4])
    hidden = gelu(linear(h, *weights.linear(f"{prefix}.mlp.fc1")))
    out = linear(hidden, *weights.linear(f"{prefix}.mlp.fc2"))
    return add(x, _gate(out, mods[5]))


def _spans(names: Sequence[str], lengths: Sequence[int]) -> Spans:
    spans, start = {}, 0
    for name, length in zip(names, lengths):
        spans[name] = (start, start + length)
        start += length
    return spans


def joint_attention(queries: Sequence[Tensor], keys: Sequence[Tensor], values: Sequence[Tensor],
                    heads: int, trace: Optional[ForwardTrace] = None, block: int = -1,
                    branch: str = "joint", query_names: Sequence[str] = (),
                    key_names: Sequence[str] = ()) -> Tensor:
    """
    Softmax attention over token-axis concatenations, split into heads by
    columns. Returns the attended values for the concatenated queries.
    """
    q = concat(list(queries), axis=0) if len(queries) > 1 else queries[0]
    k = concat(list(keys), axis=0) if len(keys) > 1 else keys[0]
    v = concat(list(values), axis=0) if len(values) > 1 else values[0]
    width = q.shape[1]
    head_dim = width // heads
    factor = 1.0 / math.sqrt(head_dim)
    sizes = [head_dim] * heads
    q_heads, k_heads, v_heads = split(q, sizes, 1), split(k, sizes, 1), split(v, sizes, 1)

    outputs = []
    for head, (qh, kh, vh) in enumerate(zip(q_heads, k_heads, v_heads)):
        probs = softmax_rows(scale(matmul(qh, transpose(kh)), factor))
        if trace is not None and trace.capture_attention:
            trace.records.append(AttentionRecord(
                block=block, head=head, branch=branch, probs=probs.data.copy(),
                query_spans=_spans(query_names, [t.shape[0] for t in queries]),
                key_spans=_spans(key_names, [t.shape[0] for t in keys]),
            ))
        outputs.append(matmul(probs, vh))
    return concat(outputs, axis=1) if heads > 1 else outputs[0]


# --- Blocks ---

def mm_attention(weights: ModelWeights, block: int, h_z: Tensor, h_p: Optional[Tensor], c: Tensor,
                 trace: Optional[ForwardTrace] = None) -> Tuple[Tensor, Optional[Tensor]]:
    """
    Base MM-DiT block: joint image-text attention, then per-modality MLP.

    With no text tokens the block is plain image self-attention.
    """
    z_attn, p_attn, _, z_mods, p_mods = _image_text_attention(weights, block, h_z, h_p, c, trace)
    prefix = f"blocks.{block}"
    h_z_out = _mlp_residual(weights, f"{prefix}.image", z_attn, z_mods)
    h_p_out = _mlp_residual(weights, f"{prefix}.text", p_attn, p_mods) if p_attn is not None else None
    return h_z_out, h_p_out


def _image_text_attention(weights: ModelWeights, block: int, h_z: Tensor, h_p: Optional[Tensor],
                          c: Tensor, trace: Optional[ForwardTrace]):
    """Image-text joint attention up to the attention residuals."""
    prefix = f"blocks.{block}"
    heads = weights.config.heads
    image = _prepare(weights, f"{prefix}.image", h_z, c)
    if h_p is None:
        attended = joint_attention([image.q], [image.k], [image.v], heads, trace, block,
                                   "image_text", ["image"], ["image"])
        z_attn = _attention_residual(weights, f"{prefix}.image", image, attended)
        return z_attn, None, image, image.mods, None

    text = _prepare(weights, f"{prefix}.text", h_p, c)
    attended = joint_attention([image.q, text.q], [image.k, text.k], [image.v, text.v], heads, trace,
                               block, "image_text", ["image", "text"], ["image", "text"])
    a_z, a_p = split(attended, [h_z.shape[0], h_p.shape[0]], axis=0)
    z_attn = _attention_residual(weights, f"{prefix}.image", image, a_z)
    p_attn = _attention_residual(weights, f"{prefix}.text", text, a_p)
    return z_attn, p_attn, image, image.mods, text.mods


def adapter_fuse(weights: ModelWeights, block: int, h_z_attn: Tensor, q_z: Tensor,
                 h_l: Optional[Tensor], trace: Optional[ForwardTrace] = None) -> Tensor:
    """
    Layout Adapter: image attention output plus image queries attending to
    layout keys and values, through a zero-init projection.

    q_z is the image query of the same block's joint attention.
    """
    if h_l is None:
        return h_z_attn
    prefix = f"blocks.{block}.adapter"
    k_l = linear(h_l, *weights.linear(f"{prefix}.k"))
    v_l = linear(h_l, *weights.linear(f"{prefix}.v"))
    attended = joint_attention([q_z], [k_l], [v_l], weights.config.heads, trace, block,
                               "adapter", ["image"], ["layout"])
    return add(h_z_attn, linear(attended, *weights.linear(f"{prefix}.o")))


def m3_attention(weights: ModelWeights, block: int, streams: TokenStreams, c: Tensor,
                 trace: Optional[ForwardTrace] = None) -> TokenStreams:
    """
    One joint attention over image, text and layout; every present stream
    updates. Without layout tokens this is the Base block.
    """
    if streams.layout is None:
        h_z, h_p = mm_attention(weights, block, streams.image, streams.text, c, trace)
        return TokenStreams(h_z, h_p, None)

    prefix = f"blocks.{block}"
    present = {"image": streams.image, "text": streams.text, "layout": streams.layout}
    names = [name for name, h in present.items() if h is not None]
    preps = [_prepare(weights, f"{prefix}.{name}", present[name], c) for name in names]
    attended = joint_attention([p.q for p in preps], [p.k for p in preps], [p.v for p in preps],
                               weights.config.heads, trace, block, "m3", names, names)
    parts = split(attended, [p.x.shape[0] for p in preps], axis=0)
    outputs = {}
    for name, prep, part in zip(names, preps, parts):
        residual = _attention_residual(weights, f"{prefix}.{name}", prep, part)
        outputs[name] = _mlp_residual(weights, f"{prefix}.{name}", residual, prep.mods)
    return TokenStreams(outputs["image"], outputs.get("text"), outputs["layout"])


def siam_block(weights: ModelWeights, block: int, streams: TokenStreams, c: Tensor,
               trace: Optional[ForwardTrace] = None) -> TokenStreams:
    """
    SiamLayout block.

    Branch A is the image-text MM-Attention. Branch B is an image-layout
    MM-Attention on the same image input with the primed image projections;
    its image output becomes a delta through a zero-init projection and is
    added to branch A's image tokens before the image MLP. Text comes from
    branch A, layout from branch B.
    """
    if streams.layout is None:
        h_z, h_p = mm_attention(weights, block, streams.image, streams.text, c, trace)
        return TokenStreams(h_z, h_p, None)

    prefix = f"blocks.{block}"
    z_attn, p_attn, image, z_mods, p_mods = _image_text_attention(
        weights, block, streams.image, streams.text, c, trace)

    layout = _prepare(weights, f"{prefix}.layout", streams.layout, c)
    q_z = linear(image.h, *weights.linear(f"{prefix}.siam.image.q"))
    k_z = linear(image.h, *weights.linear(f"{prefix}.siam.image.k"))
    v_z = linear(image.h, *weights.linear(f"{prefix}.siam.image.v"))
    attended = joint_attention([q_z, layout.q], [k_z, layout.k], [v_z, layout.v],
                               weights.config.heads, trace, block, "image_layout",
                               ["image", "layout"], ["image", "layout"])
    b_z, b_l = split(attended, [streams.image.shape[0], streams.layout.shape[0]], axis=0)
    delta = linear(b_z, *weights.linear(f"{prefix}.siam.delta"))

    fused = add(z_attn, delta)
    h_z = _mlp_residual(weights, f"{prefix}.image", fused, z_mods)
    h_p = _mlp_residual(weights, f"{prefix}.text", p_attn, p_mods) if p_attn is not None else None
    l_attn = _attention_residual(weights, f"{prefix}.layout", layout, b_l)
    h_l = _mlp_residual(weights, f"{prefix}.layout", l_attn, layout.mods)
    return TokenStreams(h_z, h_p, h_l)


def block_forward(weights: ModelWeights, block: int, streams: TokenStreams, c: Tensor,
                  trace: Optional[ForwardTrace] = None) -> TokenStreams:
    """Dispatch one block by variant; a missing layout stream takes the Base path."""
    kind = weights.variant.kind
    if streams.layout is None or kind is Variant.BASE:
        h_z, h_p = mm_attention(weights, block, streams.image, streams.text, c, trace)
        return TokenStreams(h_z, h_p, streams.layout)

    if trace is not None:
        trace.layout_path_calls += 1
    if kind is Variant.ADAPTER:
        z_attn, p_attn, image, z_mods, p_mods = _image_text_attention(
            weights, block, streams.image, streams.text, c, trace)
        fused = adapter_fuse(weights, block, z_attn, image.q, streams.layout, trace)
        prefix = f"blocks.{block}"
        h_z = _mlp_residual(weights, f"{prefix}.image", fused, z_mods)
        h_p = _mlp_residual(weights, f"{prefix}.text", p_attn, p_mods) if p_attn is not None else None
        return TokenStreams(h_z, h_p, streams.layout)
    if kind is Variant.M3:
        return m3_attention(weights, block, streams, c, trace)
    return siam_block(weights, block, streams, c, trace)


def layout_encoder(weights: ModelWeights) -> LayoutEncoderWeights:
    return LayoutEncoderWeights(
        table=weights["text_embed"],
        fc1_weight=weights["layout_encoder.fc1.weight"], fc1_bias=weights["layout_encoder.fc1.bias"],
        fc2_weight=weights["layout_encoder.fc2.weight"], fc2_bias=weights["layout_encoder.fc2.bias"],
        freqs=weights.config.fourier_freqs,
    )


def forward(weights: ModelWeights, z_t: Union[Tensor, np.ndarray], t: int, layout: Layout,
            layout_active: bool = True, trace: Optional[ForwardTrace] = None) -> Tensor:
    """
    Predict the noise of z_t at timestep t under caption and layout.

    With layout_active=False, or an empty layout, every layout path is
    bypassed and the computation is exactly the Base forward.

    Returns:
        Tensor with the shape of z_t.

    Raises:
        ShapeError: If z_t is not (channels, image_size, image_size).
    """
    config = weights.config
    dtype = weights.dtype
    if not isinstance(z_t, Tensor):
        z_t = constant(np.asarray(z_t), dtype=dtype)
    expected = (config.channels, config.image_size, config.image_size)
    if tuple(z_t.shape) != expected:
        raise ShapeError(f"Latent shape {z_t.shape} does not match the model (expected {expected})")
    _, height, width = z_t.shape

    tokens = patchify(z_t, config.patch_size)
    h_z = linear(tokens, *weights.linear("patch_embed"))
    h_z = add(h_z, constant(sinusoidal_positions(config.grid, config.width), dtype=dtype))
    h_p = embed_caption(layout.caption_ids, weights["text_embed"])

    t_features = constant(timestep_features(t, config.width).reshape(1, -1), dtype=dtype)
    t_emb = linear(silu(linear(t_features, *weights.linear("time.fc1"))), *weights.linear("time.fc2"))
    c = silu(t_emb)

    h_l = None
    if layout_active and weights.variant.uses_layout and len(layout) > 0:
        h_l = layout_tokens(layout, layout_encoder(weights))

    streams = TokenStreams(h_z, h_p, h_l)
    for block in range(config.depth):
        streams = block_forward(weights, block, streams, c, trace)

    d = config.width
    shift, scale_ = split(reshape(linear(c, *weights.linear("final.adaln")), (2 * d,)), [d, d], axis=0)
    out = linear(_modulate(layer_norm(streams.image), shift, scale_), *weights.linear("final.proj"))
    return unpatchify(out, config.patch_size, height, width, config.channels)


# --- Checkpoints ---

def save_checkpoint(weights: ModelWeights, path: Union[str, Path], step: int = 0, seed: int = 0,
                    extra: Optional[Dict] = None) -> Path:
    """Header JSON (length-prefixed) followed by TNSR records in declared order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(weights.params)
    header = {
        "config": weights.config.to_dict(),
        "variant": str(weights.variant),
        "step": step,
        "seed": seed,
        "tensors": names,
        "frozen": sorted(weights.frozen),
        "aliases": weights.aliases,
        "extra": extra or {},
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(encoded)))
        f.write(encoded)
        for name in names:
            write_tensor_record(f, weights.params[name].data)
    logger.info(f"Checkpoint written: {path} ({weights.variant}, step {step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelWeights, Dict]:
    """Read a checkpoint; returns the weights and the header."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        raw = f.read(4)
        if len(raw) != 4:
            raise CheckpointError(f"Truncated checkpoint header in {path}")
        (length,) = struct.unpack("<I", raw)
        try:
            header = json.loads(f.read(length).decode("utf-8"))
            config = ModelConfig(**header["config"])
            names = list(header["tensors"])
            frozen = set(header["frozen"])
            aliases = dict(header["aliases"])
            variant_name = str(header["variant"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Corrupt checkpoint header in {path}: {e}")
        dtype = DTYPES[config.precision]
        params = {name: Tensor(read_tensor_record(f).astype(dtype)) for name in names}
    variant = VariantTag.parse(variant_name, config.lora_rank)
    weights = ModelWeights(config, variant, params, frozen, aliases)
    return weights, header
