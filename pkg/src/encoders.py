#!/usr/bin/env python3
"""
Token Encoders for Images, Captions and Layouts

Produces the three token streams of the model: image patches, global caption
embeddings, and layout tokens built from a region caption and a Fourier
embedding of its bounding box.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .base import LayoutError, ShapeError, VocabularyError
from .numcore import (
    Tensor, concat, constant, embedding, gelu, linear, masked_mean, permute, reshape,
)

logger = logging.getLogger(__name__)

PAD_ID = 0
PAD_TOKEN = "<pad>"

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
BACKGROUNDS = ("black", "gray", "white")

DEFAULT_WORDS = (
    PAD_TOKEN, "a", "an", "the", "and", "on", "with", "of", "in",
    "background", "image", "scene", "shape", "small", "large",
    *COLORS, "black", "white", "gray",
    *SHAPES,
    "left", "right", "top", "bottom", "center", "upper", "lower", "middle",
)


@dataclass
class Vocabulary:
    """Whitespace vocabulary with dense ids; id 0 is padding."""

    tokens: Dict[str, int]

    def __post_init__(self):
        ids = sorted(self.tokens.values())
        if ids != list(range(len(ids))):
            raise VocabularyError("Vocabulary ids must be dense in [0, size)")
        if self.tokens.get(PAD_TOKEN) != PAD_ID:
            raise VocabularyError(f"'{PAD_TOKEN}' must map to id {PAD_ID}")
        if len(ids) > 256:
            raise VocabularyError("Vocabulary size must not exceed 256")
        self._words = {i: w for w, i in self.tokens.items()}

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls({word: i for i, word in enumerate(DEFAULT_WORDS)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, length: int) -> np.ndarray:
        """
        Tokenize on whitespace and pad with id 0 to a fixed length.

        Raises:
            VocabularyError: On unknown words or text longer than length.
        """
        words = text.lower().split()
        unknown = [w for w in words if w not in self.tokens or w == PAD_TOKEN]
        if unknown:
            raise VocabularyError(f"Unknown words: {unknown}")
        if len(words) > length:
            raise VocabularyError(f"Caption has {len(words)} words, limit is {length}: '{text}'")
        ids = np.zeros(length, dtype=np.int64)
        ids[:len(words)] = [self.tokens[w] for w in words]
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self._words[int(i)] for i in ids if int(i) != PAD_ID)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.tokens, indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise VocabularyError(f"Cannot read vocabulary {path}: {e}")
        return cls({str(k): int(v) for k, v in payload.items()})


@dataclass(frozen=True)
class BBox:
    """Normalized box; (x0, y0) is the top-left corner."""

    x0: float
    y0: float
    x1: float
    y1: float

    def corners_ordered(self) -> bool:
        return self.x0 < self.x1 and self.y0 < self.y1

    def in_bounds(self) -> bool:
        return all(0.0 <= v <= 1.0 for v in self.as_tuple())

    def is_valid(self) -> bool:
        return self.corners_ordered() and self.in_bounds()

    def check(self) -> "BBox":
        if not self.is_valid():
            raise LayoutError(f"Invalid box {self.as_tuple()}")
        return self

    @property
    def area(self) -> float:
        return max(0.0, self.x1 - self.x0) * max(0.0, self.y1 - self.y0)

    def iou(self, other: "BBox") -> float:
        ix = max(0.0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0.0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def as_list(self) -> List[float]:
        return [float(v) for v in self.as_tuple()]


@dataclass
class EntityDocument:
    """Entity as read from a layout file, before tokenization."""

    caption: str
    bbox: BBox


@dataclass
class LayoutDocument:
    """Layout file contents; boxes are not validated here."""

    caption: str
    entities: List[EntityDocument] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "caption": self.caption,
            "entities": [{"bbox": e.bbox.as_list(), "caption": e.caption} for e in self.entities],
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "LayoutDocument":
        try:
            entities = [
                EntityDocument(caption=str(e["caption"]), bbox=BBox(*[float(v) for v in e["bbox"]]))
                for e in payload.get("entities", [])
            ]
            return cls(caption=str(payload["caption"]), entities=entities)
        except (AttributeError, KeyError, TypeError, ValueError) as e:
            raise LayoutError(f"Malformed layout document: {e}")


def load_layout_document(path: Union[str, Path]) -> LayoutDocument:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise LayoutError(f"Cannot read layout file {path}: {e}")
    return LayoutDocument.from_dict(payload)


def save_layout_document(document: LayoutDocument, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document.to_dict(), indent=2), encoding="utf-8")
    return path


@dataclass
class Entity:
    region_ids: np.ndarray
    bbox: BBox


@dataclass
class Layout:
    """Tokenized global caption plus up to max_entities validated entities."""

    caption_ids: np.ndarray
    entities: List[Entity] = field(default_factory=list)
    max_entities: int = 10

    def __post_init__(self):
        if len(self.entities) > self.max_entities:
            raise LayoutError(f"{len(self.entities)} entities exceed the limit of {self.max_entities}")
        for entity in self.entities:
            entity.bbox.check()

    def __len__(self) -> int:
        return len(self.entities)

    @property
    def boxes(self) -> List[BBox]:
        return [e.bbox for e in self.entities]

    def without_entities(self) -> "Layout":
        return Layout(self.caption_ids, [], self.max_entities)

    def permuted(self, order: Sequence[int]) -> "Layout":
        return Layout(self.caption_ids, [self.entities[i] for i in order], self.max_entities)


def encode_layout(document: LayoutDocument, vocab: Vocabulary, caption_len: int = 16,
                  region_len: int = 4, max_entities: int = 10) -> Layout:
    """Tokenize and validate a layout document."""
    entities = [Entity(vocab.encode(e.caption, region_len), e.bbox) for e in document.entities]
    return Layout(vocab.encode(document.caption, caption_len), entities, max_entities)


# --- Image tokens ---

def _as_tensor(x: Union[Tensor, np.ndarray]) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def patchify(image: Union[Tensor, np.ndarray], patch: int) -> Tensor:
    """
    Split a [3, H, W] image into row-major [(H/p)(W/p), 3p^2] patch tokens.

    Raises:
        ShapeError: If p does not divide H and W.
    """
    image = _as_tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects [C, H, W], got {image.shape}")
    c, h, w = image.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"patch size {patch} does not divide image {h}x{w}")
    gh, gw = h // patch, w // patch
    x = reshape(image, (c, gh, patch, gw, patch))
    x = permute(x, (1, 3, 0, 2, 4))
    return reshape(x, (gh * gw, c * patch * patch))


def unpatchify(tokens: Tensor, patch: int, height: int, width: int, channels: int = 3) -> Tensor:
    """Inverse of patchify."""
    if height % patch or width % patch:
        raise ShapeError(f"patch size {patch} does not divide image {height}x{width}")
    gh, gw = height // patch, width // patch
    if tokens.shape != (gh * gw, channels * patch * patch):
        raise ShapeError(f"unpatchify: tokens {tokens.shape} do not match a {channels}x{height}x{width} image")
    x = reshape(tokens, (gh, gw, channels, patch, patch))
    x = permute(x, (2, 0, 3, 1, 4))
    return reshape(x, (channels, height, width))


def sinusoidal_positions(grid: int, width: int) -> np.ndarray:
    """Fixed 2-D sin/cos position vectors, [grid*grid, width]."""
    if width % 4:
        raise ShapeError("position width must be divisible by 4")
    quarter = width // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter))
    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64),
                             indexing="ij")
    r = rows.reshape(-1, 1) * omega
    c = cols.reshape(-1, 1) * omega
    return np.concatenate([np.sin(r), np.cos(r), np.sin(c), np.cos(c)], axis=1)


def timestep_features(t: float, width: int) -> np.ndarray:
    """Sinusoidal features of a diffusion timestep, [width]."""
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = float(t) * freqs
    feats = np.concatenate([np.cos(args), np.sin(args)])
    if width % 2:
        feats = np.concatenate([feats, np.zeros(1)])
    return feats


# --- Caption and layout tokens ---

def embed_caption(ids: Sequence[int], table: Tensor) -> Tensor:
    """
    Look up caption token embeddings; padding rows are table row 0.

    Raises:
        VocabularyError: If any id is outside the table.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(f"Token id out of range for vocabulary of {table.shape[0]}")
    return embedding(table, ids)


def fourier_embed(bbox: BBox, freqs: int = 8) -> np.ndarray:
    """
    Fourier features of a box: for each coordinate, then each frequency k,
    the pair sin(2^k pi v), cos(2^k pi v). Length 8F.
    """
    out = np.empty(8 * freqs, dtype=np.float64)
    i = 0
    for v in bbox.as_tuple():
        for k in range(freqs):
            angle = (2.0 ** k) * math.pi * v
            out[i] = math.sin(angle)
            out[i + 1] = math.cos(angle)
            i += 2
    return out


@dataclass
class LayoutEncoderWeights:
    """Caption table (shared with the global caption) and the two-layer MLP."""

    table: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    freqs: int = 8


def layout_token(region_ids: Sequence[int], bbox: BBox, weights: LayoutEncoderWeights) -> Tensor:
    """
    One layout token: MLP over [masked-mean caption embedding, Fourier(box)].

    Raises:
        LayoutError: If the region caption is all padding.
    """
    region_ids = np.asarray(region_ids, dtype=np.int64)
    mask = region_ids != PAD_ID
    if not mask.any():
        raise LayoutError("Entity needs a non-empty region caption")
    pooled = masked_mean(embed_caption(region_ids, weights.table), mask)
    box = constant(fourier_embed(bbox, weights.freqs), dtype=weights.table.dtype)
    features = reshape(concat([pooled, box], axis=0), (1, pooled.shape[0] + box.shape[0]))
    hidden = gelu(linear(features, weights.fc1_weight, weights.fc1_bias))
    token = linear(hidden, weights.fc2_weight, weights.fc2_bias)
    return reshape(token, (token.shape[1],))


def layout_tokens(layout: Layout, weights: LayoutEncoderWeights) -> Optional[Tensor]:
    """Stack entity tokens in entity order; None for an empty layout."""
    if not layout.entities:
        return None
    rows = []
    for entity in layout.entities:
        token = layout_token(entity.region_ids, entity.bbox, weights)
        rows.append(reshape(token, (1, token.shape[0])))
    return concat(rows, axis=0)
