#!/usr/bin/env python3
"""
Synthetic Shapes World and Pixel Oracle

Scenes hold one to four flat-colored shapes on a plain background, with
boxes snapped to the patch grid. The oracle scores a generated image
against a layout with fixed pixel rules for position, color and shape.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .base import DatasetError, ModelConfig, OracleConfig
from .diffusion import Schedule, sample_image
from .encoders import (
    BACKGROUNDS, COLORS, SHAPES, BBox, EntityDocument, Layout, LayoutDocument, Vocabulary,
    encode_layout, load_layout_document, save_layout_document,
)
from .mmdit import ModelWeights
from .utils.io_utils import load_json, load_tensor, save_json, save_ppm, save_tensor, write_csv
from .utils.rng import Rng

logger = logging.getLogger(__name__)

PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
BACKGROUND_COLORS = {
    "black": (0, 0, 0),
    "gray": (128, 128, 128),
    "white": (255, 255, 255),
}
EVAL_SEED_OFFSET = 1_000_000
DATASET_MANIFEST = "dataset.json"
BENCHMARK_COLUMNS = ("variant", "seed", "spatial", "color", "shape")

MIN_SIDE_CELLS = 4
MAX_SIDE_CELLS = 9
MAX_SCENE_ENTITIES = 4
PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class SceneEntity:
    shape: str
    color: str
    bbox: BBox

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape}"


@dataclass
class SceneSpec:
    seed: int
    background: str
    entities: List[SceneEntity] = field(default_factory=list)

    @property
    def caption(self) -> str:
        parts = " and ".join(f"{e.color} {e.shape}" for e in self.entities)
        return f"{parts} on {self.background}"

    def to_document(self) -> LayoutDocument:
        return LayoutDocument(self.caption, [EntityDocument(e.caption, e.bbox) for e in self.entities])


# --- Rendering ---

def pixel_box(bbox: BBox, width: int, height: int) -> Tuple[int, int, int, int]:
    """Box corners in pixels, rounded and clamped to the image."""
    x0 = min(max(int(round(bbox.x0 * width)), 0), width)
    y0 = min(max(int(round(bbox.y0 * height)), 0), height)
    x1 = min(max(int(round(bbox.x1 * width)), 0), width)
    y1 = min(max(int(round(bbox.y1 * height)), 0), height)
    return x0, y0, x1, y1


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, box: Tuple[int, int, int, int], fill) -> None:
    x0, y0, x1, y1 = box
    if shape == "square":
        draw.rectangle([x0, y0, x1 - 1, y1 - 1], fill=fill)
    elif shape == "circle":
        draw.ellipse([x0, y0, x1 - 1, y1 - 1], fill=fill)
    elif shape == "triangle":
        draw.polygon([(x0, y1 - 1), ((x0 + x1 - 1) / 2.0, y0), (x1 - 1, y1 - 1)], fill=fill)
    else:
        raise ValueError(f"Unknown shape '{shape}'")


def shape_template(shape: str, width: int, height: int) -> np.ndarray:
    """Boolean mask of a shape filling a width x height box."""
    canvas = Image.new("L", (width, height), 0)
    _draw_shape(ImageDraw.Draw(canvas), shape, (0, 0, width, height), 255)
    return np.asarray(canvas) > 0


def render_scene(spec: SceneSpec, image_size: int = 32) -> np.ndarray:
    """Rasterize without anti-aliasing; returns [3, H, W] in [0, 1]."""
    canvas = Image.new("RGB", (image_size, image_size), BACKGROUND_COLORS[spec.background])
    draw = ImageDraw.Draw(canvas)
    for entity in spec.entities:
        _draw_shape(draw, entity.shape, pixel_box(entity.bbox, image_size, image_size), PALETTE[entity.color])
    return np.asarray(canvas, dtype=np.float64).transpose(2, 0, 1) / 255.0


def _place_boxes(rng: Rng, count: int, grid: int) -> List[BBox]:
    """Grid-snapped boxes with at least one empty cell between any two."""
    cells: List[Tuple[int, int, int, int]] = []
    max_side = min(MAX_SIDE_CELLS, grid)
    min_side = min(MIN_SIDE_CELLS, max_side)
    for _ in range(PLACEMENT_ATTEMPTS):
        if len(cells) == count:
            break
        w = int(rng.integers(min_side, max_side + 1))
        h = int(rng.integers(min_side, max_side + 1))
        c0 = int(rng.integers(0, grid - w + 1))
        r0 = int(rng.integers(0, grid - h + 1))
        candidate = (c0, r0, c0 + w, r0 + h)
        if all(candidate[0] > c[2] or candidate[2] < c[0] or candidate[1] > c[3] or candidate[3] < c[1]
               for c in cells):
            cells.append(candidate)
    return [BBox(c0 / grid, r0 / grid, c1 / grid, r1 / grid) for c0, r0, c1, r1 in cells]


def gen_scene(seed: int, image_size: int = 32, patch_size: int = 2,
              max_entities: int = MAX_SCENE_ENTITIES) -> Tuple[SceneSpec, np.ndarray]:
    """Deterministic scene and its rendering for a seed."""
    rng = Rng(seed).substream("scene")
    grid = image_size // patch_size
    count = int(rng.integers(1, max_entities + 1))
    background = BACKGROUNDS[int(rng.integers(0, len(BACKGROUNDS)))]
    entities = []
    for bbox in _place_boxes(rng, count, grid):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        color = COLORS[int(rng.integers(0, len(COLORS)))]
        entities.append(SceneEntity(shape, color, bbox))
    spec = SceneSpec(seed, background, entities)
    return spec, render_scene(spec, image_size)


def scene_layout(spec: SceneSpec, vocab: Vocabulary, config: ModelConfig) -> Layout:
    return encode_layout(spec.to_document(), vocab, config.caption_len, config.region_len, config.max_entities)


# --- Oracle ---

@dataclass
class EntityVerdict:
    spatial_hit: bool = False
    color_hit: bool = False
    shape_hit: bool = False


@dataclass
class OracleReport:
    entities: List[EntityVerdict] = field(default_factory=list)

    def _rate(self, name: str) -> float:
        if not self.entities:
            return 0.0
        return float(np.mean([getattr(e, name) for e in self.entities]))

    @property
    def spatial(self) -> float:
        return self._rate("spatial_hit")

    @property
    def color(self) -> float:
        return self._rate("color_hit")

    @property
    def shape(self) -> float:
        return self._rate("shape_hit")

    def extend(self, other: "OracleReport") -> None:
        self.entities.extend(other.entities)


def _requested(caption: str) -> Tuple[Optional[str], Optional[str]]:
    words = caption.lower().split()
    color = next((w for w in words if w in PALETTE), None)
    shape = next((w for w in words if w in SHAPES), None)
    return color, shape


def estimate_background(image: np.ndarray, boxes: Sequence[BBox]) -> np.ndarray:
    """Per-channel median of pixels outside every box (whole image if none)."""
    _, height, width = image.shape
    outside = np.ones((height, width), dtype=bool)
    for bbox in boxes:
        x0, y0, x1, y1 = pixel_box(bbox, width, height)
        outside[y0:y1, x0:x1] = False
    pixels = image[:, outside] if outside.any() else image.reshape(image.shape[0], -1)
    return np.median(pixels, axis=1)


def _score_entity(image: np.ndarray, foreground: np.ndarray, components: np.ndarray,
                  entity: EntityDocument, config: OracleConfig) -> EntityVerdict:
    _, height, width = image.shape
    x0, y0, x1, y1 = pixel_box(entity.bbox, width, height)
    verdict = EntityVerdict()
    if x1 <= x0 or y1 <= y0:
        return verdict
    inside = foreground[y0:y1, x0:x1]
    if not inside.any():
        return verdict

    # centroid of every foreground component reaching into the box
    touching = np.unique(components[y0:y1, x0:x1][inside])
    rows, cols = np.nonzero(np.isin(components, touching))
    cy = rows.mean() + 0.5
    cx = cols.mean() + 0.5
    verdict.spatial_hit = bool(inside.mean() >= config.min_fill and x0 <= cx < x1 and y0 <= cy < y1)

    color, shape = _requested(entity.caption)
    median = np.median(image[:, y0:y1, x0:x1][:, inside], axis=1) * 255.0
    nearest = min(PALETTE, key=lambda name: float(np.sum((median - np.array(PALETTE[name])) ** 2)))
    verdict.color_hit = color is not None and nearest == color

    r, c = np.nonzero(inside)
    crop = inside[r.min():r.max() + 1, c.min():c.max() + 1]
    ious = {}
    for candidate in SHAPES:
        template = shape_template(candidate, crop.shape[1], crop.shape[0])
        union = np.logical_or(template, crop).sum()
        ious[candidate] = np.logical_and(template, crop).sum() / union if union else 0.0
    best = max(SHAPES, key=lambda s: ious[s])
    verdict.shape_hit = bool(shape is not None and best == shape and ious[best] >= config.min_iou)
    return verdict


def oracle_eval(image: np.ndarray, document: LayoutDocument, config: Optional[OracleConfig] = None) -> OracleReport:
    """
    Score each requested entity of a layout on a [3, H, W] image in [0, 1].

    Degenerate boxes score a miss on every criterion.
    """
    config = config or OracleConfig()
    image = np.asarray(image, dtype=np.float64)
    background = estimate_background(image, [e.bbox for e in document.entities])
    foreground = np.abs(image - background[:, None, None]).max(axis=0) > config.foreground_distance
    components, _ = ndimage.label(foreground, structure=np.ones((3, 3)))
    return OracleReport([_score_entity(image, foreground, components, e, config) for e in document.entities])


def score_images(pairs: Sequence[Tuple[np.ndarray, LayoutDocument]],
                 config: Optional[OracleConfig] = None) -> OracleReport:
    """Pool oracle verdicts over (image, layout) pairs."""
    pooled = OracleReport()
    for image, document in pairs:
        pooled.extend(oracle_eval(image, document, config))
    return pooled


# --- Datasets ---

@dataclass
class Sample:
    seed: int
    spec: SceneSpec
    document: LayoutDocument
    layout: Layout
    image: np.ndarray


@dataclass
class Dataset:
    split: str
    samples: List[Sample]
    vocab: Vocabulary

    @property
    def seeds(self) -> List[int]:
        return [s.seed for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]


def split_seeds(split: str, count: int, base_seed: int = 0) -> List[int]:
    """Training seeds start at base_seed, evaluation seeds at a fixed offset above."""
    start = base_seed + (EVAL_SEED_OFFSET if split == "eval" else 0)
    return list(range(start, start + count))


def check_disjoint(train_seeds: Sequence[int], eval_seeds: Sequence[int]) -> None:
    overlap = sorted(set(train_seeds) & set(eval_seeds))
    if overlap:
        raise DatasetError(f"Evaluation seeds overlap training seeds: {overlap[:5]}")


def make_sample(seed: int, vocab: Vocabulary, config: ModelConfig) -> Sample:
    spec, image = gen_scene(seed, config.image_size, config.patch_size)
    return Sample(seed, spec, spec.to_document(), scene_layout(spec, vocab, config), image)


def generate(seeds: Sequence[int], vocab: Vocabulary, config: ModelConfig, split: str = "train",
             jobs: int = 1) -> Dataset:
    """In-memory dataset over the given seeds."""
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            samples = list(executor.map(lambda s: make_sample(s, vocab, config), seeds))
    else:
        samples = [make_sample(s, vocab, config) for s in seeds]
    return Dataset(split, samples, vocab)


def build_dataset(out_dir: Union[str, Path], split: str, seeds: Sequence[int], config: ModelConfig,
                  vocab: Optional[Vocabulary] = None, jobs: int = 1) -> Tuple[Dataset, List[Path]]:
    """
    Generate and write a dataset directory.

    Layout: ``dataset.json`` (split, seeds, file names), ``vocab.json``,
    ``layouts/<seed>.json``, ``images/<seed>.ppm`` and ``tensors/<seed>.tnsr``.

    Returns:
        The dataset and every file written.
    """
    out_dir = Path(out_dir)
    vocab = vocab or Vocabulary.default()
    dataset = generate(seeds, vocab, config, split, jobs)
    written = []
    vocab_path = out_dir / "vocab.json"
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(vocab_path)
    written.append(vocab_path)
    entries = []
    for sample in dataset.samples:
        stem = f"{sample.seed:08d}"
        layout_path = save_layout_document(sample.document, out_dir / "layouts" / f"{stem}.json")
        image_path = save_ppm(out_dir / "images" / f"{stem}.ppm", sample.image)
        tensor_path = save_tensor(out_dir / "tensors" / f"{stem}.tnsr", sample.image)
        written.extend([layout_path, image_path, tensor_path])
        entries.append({
            "seed": sample.seed,
            "background": sample.spec.background,
            "layout": layout_path.relative_to(out_dir).as_posix(),
            "image": image_path.relative_to(out_dir).as_posix(),
            "tensor": tensor_path.relative_to(out_dir).as_posix(),
        })
    manifest = {"split": split, "image_size": config.image_size, "vocabulary": "vocab.json", "samples": entries}
    written.append(save_json(out_dir / DATASET_MANIFEST, manifest))
    logger.info(f"Wrote {split} dataset of {len(dataset)} scenes to {out_dir}")
    return dataset, written


def load_dataset(data_dir: Union[str, Path], config: ModelConfig) -> Dataset:
    """
    Read a dataset directory written by build_dataset.

    Raises:
        DatasetError: If the manifest or a listed file is missing or malformed.
    """
    data_dir = Path(data_dir)
    manifest_path = data_dir / DATASET_MANIFEST
    if not manifest_path.exists():
        raise DatasetError(f"No {DATASET_MANIFEST} in {data_dir}")
    try:
        manifest = load_json(manifest_path)
        vocab = Vocabulary.load(data_dir / manifest.get("vocabulary", "vocab.json"))
        samples = []
        for entry in manifest["samples"]:
            document = load_layout_document(data_dir / entry["layout"])
            image = load_tensor(data_dir / entry["tensor"]).astype(np.float64)
            if image.shape != (config.channels, config.image_size, config.image_size):
                raise DatasetError(f"Image {entry['tensor']} has shape {image.shape}")
            seed = int(entry["seed"])
            spec = SceneSpec(seed, entry.get("background", "black"), [])
            layout = encode_layout(document, vocab, config.caption_len, config.region_len, config.max_entities)
            samples.append(Sample(seed, spec, document, layout, image))
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Malformed dataset manifest {manifest_path}: {e}")
    return Dataset(manifest.get("split", "train"), samples, vocab)


# --- Benchmark ---

@dataclass
class BenchmarkTable:
    """Oracle rates per (variant, seed)."""

    rows: List[Dict] = field(default_factory=list)

    def add(self, variant: str, seed: int, report: OracleReport) -> None:
        self.rows.append({"variant": variant, "seed": seed, "spatial": report.spatial,
                          "color": report.color, "shape": report.shape})

    def extend(self, other: "BenchmarkTable") -> None:
        self.rows.extend(other.rows)

    def mean(self, variant: Optional[str] = None) -> Dict[str, float]:
        rows = [r for r in self.rows if variant is None or r["variant"] == variant]
        return {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in ("spatial", "color", "shape")}

    def median(self, metric: str, variant: str) -> float:
        values = [r[metric] for r in self.rows if r["variant"] == variant]
        return float(np.median(values)) if values else 0.0

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_csv(path, self.rows, BENCHMARK_COLUMNS)


def sampler_seed(seed: int, sample_seed: int) -> int:
    return Rng(seed).substream(f"eval/{sample_seed}").next_u64()


def benchmark(weights: ModelWeights, eval_set: Dataset, steps: int, seeds: Sequence[int],
              eta: float = 0.0, training_seeds: Optional[Sequence[int]] = None,
              oracle_config: Optional[OracleConfig] = None, label: Optional[str] = None,
              schedule: Optional[Schedule] = None, jobs: int = 1) -> BenchmarkTable:
    """
    Sample every eval layout once per seed and score it with the oracle.

    Raises:
        DatasetError: If eval scenes overlap the training seeds.
    """
    if training_seeds is not None:
        check_disjoint(training_seeds, eval_set.seeds)
    label = label or str(weights.variant)
    table = BenchmarkTable()
    for seed in seeds:
        def generate_one(sample: Sample) -> Tuple[np.ndarray, LayoutDocument]:
            image = sample_image(weights, sample.layout, steps, eta, sampler_seed(seed, sample.seed), schedule)
            return image, sample.document

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as executor:
                pairs = list(executor.map(generate_one, eval_set.samples))
        else:
            pairs = [generate_one(s) for s in eval_set.samples]
        report = score_images(pairs, oracle_config)
        table.add(label, seed, report)
        logger.info(f"Benchmark {label} seed {seed}: spatial={report.spatial:.3f} "
                    f"color={report.color:.3f} shape={report.shape:.3f}")
    return table


def chance_baseline(base: ModelWeights, eval_set: Dataset, steps: int, seeds: Sequence[int],
                    **kwargs) -> BenchmarkTable:
    """Oracle rates of the layout-free Base model on the eval layouts."""
    return benchmark(base, eval_set, steps, seeds, label="chance", **kwargs)
