"""
Layout Toolkit

Rule-based validation of layout files and conversion of coarse inputs
(binary masks, scribbles, center points) into bounding boxes.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .base import LayoutError, LayoutRulesConfig
from .encoders import BBox, EntityDocument, Layout, LayoutDocument

logger = logging.getLogger(__name__)

RULE_CORNER_ORDER = "corner-order"
RULE_BOUNDS = "bounds"
RULE_MIN_AREA = "min-area"
RULE_COUNT = "count"

FORMAT_MODE = "format"
DATASET_MODE = "dataset"
COARSE_KINDS = ("mask", "scribble", "point")


@dataclass
class EntityVerdict:
    index: int
    violations: List[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.violations


@dataclass
class ValidationReport:
    mode: str
    entities: List[EntityVerdict] = field(default_factory=list)
    layout_violations: List[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.layout_violations and all(e.valid for e in self.entities)

    @property
    def accuracy(self) -> float:
        """Fraction of entities passing every rule; 0 when a layout-level rule fails."""
        if self.layout_violations:
            return 0.0
        if not self.entities:
            return 1.0
        return sum(e.valid for e in self.entities) / len(self.entities)

    def violations(self) -> List[str]:
        found = list(self.layout_violations)
        for entity in self.entities:
            found.extend(f"entity {entity.index}: {rule}" for rule in entity.violations)
        return found

    def to_dict(self) -> Dict:
        return {"mode": self.mode, "valid": self.valid, "accuracy": self.accuracy,
                "violations": self.violations()}


def validate(layout: Union[LayoutDocument, Layout, Sequence[BBox]], mode: str = FORMAT_MODE,
             rules: Optional[LayoutRulesConfig] = None) -> ValidationReport:
    """
    Check a layout against the format rules, plus the dataset rules in
    dataset mode. Never raises on invalid content.
    """
    if mode not in (FORMAT_MODE, DATASET_MODE):
        raise ValueError(f"Unknown validation mode '{mode}'")
    rules = rules or LayoutRulesConfig()
    if isinstance(layout, LayoutDocument):
        boxes = [e.bbox for e in layout.entities]
    elif isinstance(layout, Layout):
        boxes = layout.boxes
    else:
        boxes = list(layout)

    report = ValidationReport(mode)
    for index, box in enumerate(boxes):
        verdict = EntityVerdict(index)
        if not box.corners_ordered():
            verdict.violations.append(RULE_CORNER_ORDER)
        if not box.in_bounds():
            verdict.violations.append(RULE_BOUNDS)
        if mode == DATASET_MODE and box.area < rules.min_area:
            verdict.violations.append(RULE_MIN_AREA)
        report.entities.append(verdict)
    if mode == DATASET_MODE and not (rules.min_count <= len(boxes) <= rules.max_count):
        report.layout_violations.append(RULE_COUNT)
    return report


def suite_accuracy(reports: Sequence[ValidationReport]) -> float:
    """Share of fully valid layouts."""
    if not reports:
        return 0.0
    return sum(r.valid for r in reports) / len(reports)


# --- Coarse inputs ---

def mask_to_bbox(mask: Union[np.ndarray, Sequence[Sequence[int]]]) -> BBox:
    """
    Tight box over the set cells of a [rows, cols] mask, normalized by the grid.

    Raises:
        LayoutError: If the mask is not 2-D or has no set cell.
    """
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise LayoutError(f"Mask must be 2-D, got shape {mask.shape}")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise LayoutError("Mask has no set cells")
    height, width = mask.shape
    return BBox(cols[0] / width, rows[0] / height, (cols[-1] + 1) / width, (rows[-1] + 1) / height)


def scribble_to_bbox(points: Sequence[Sequence[float]], pad: float = 0.05) -> BBox:
    """
    Extent of a scribble polyline padded by ``pad`` and clamped to the image.

    Raises:
        LayoutError: For fewer than two points, points outside the image, or
            a padded extent with zero area.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise LayoutError("A scribble needs at least two (x, y) points")
    if pts.min() < 0.0 or pts.max() > 1.0:
        raise LayoutError("Scribble points must lie in [0, 1]")
    x0, y0 = pts.min(axis=0) - pad
    x1, y1 = pts.max(axis=0) + pad
    box = BBox(float(max(x0, 0.0)), float(max(y0, 0.0)), float(min(x1, 1.0)), float(min(y1, 1.0)))
    if not box.corners_ordered():
        raise LayoutError(f"Scribble extent {box.as_tuple()} has zero area")
    return box


def point_to_bbox(center: Sequence[float], size_hint: float = 0.2) -> BBox:
    """
    Square of side ``size_hint`` around a center, shifted inward to fit.

    Raises:
        LayoutError: If the center is outside [0, 1]^2 or the size is not in (0, 1].
    """
    if len(center) != 2:
        raise LayoutError("A point needs exactly two coordinates")
    cx, cy = float(center[0]), float(center[1])
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        raise LayoutError(f"Point ({cx}, {cy}) is outside the image")
    if not (0.0 < size_hint <= 1.0):
        raise LayoutError(f"Point size {size_hint} must be in (0, 1]")
    half = size_hint / 2.0
    x0 = min(max(cx - half, 0.0), 1.0 - size_hint)
    y0 = min(max(cy - half, 0.0), 1.0 - size_hint)
    return BBox(x0, y0, x0 + size_hint, y0 + size_hint)


@dataclass
class CoarseInput:
    """One coarse entity placement: a mask, a scribble or a center point."""

    kind: str
    mask: Optional[np.ndarray] = None
    points: Optional[List[Tuple[float, float]]] = None
    center: Optional[Tuple[float, float]] = None
    size_hint: Optional[float] = None

    def __post_init__(self):
        if self.kind not in COARSE_KINDS:
            raise LayoutError(f"Unknown coarse input kind '{self.kind}'")
        if self.kind == "mask" and (self.mask is None or not np.asarray(self.mask).any()):
            raise LayoutError("Mask input needs at least one set cell")
        if self.kind == "scribble" and (self.points is None or len(self.points) < 2):
            raise LayoutError("Scribble input needs at least two points")
        if self.kind == "point" and self.center is None:
            raise LayoutError("Point input needs a center")

    @classmethod
    def from_entity(cls, payload: Dict, kind: Optional[str] = None) -> "CoarseInput":
        """Read the 'mask', 'scribble' or 'point' field of an entity record."""
        kinds = [k for k in COARSE_KINDS if k in payload]
        if kind is not None:
            kinds = [kind] if kind in payload else []
        if len(kinds) != 1:
            raise LayoutError(f"Entity needs exactly one of {COARSE_KINDS}"
                              + (f" (expected '{kind}')" if kind else ""))
        found = kinds[0]
        if found == "mask":
            return cls(found, mask=np.asarray(payload["mask"], dtype=bool))
        if found == "scribble":
            return cls(found, points=[(float(x), float(y)) for x, y in payload["scribble"]])
        return cls(found, center=tuple(float(v) for v in payload["point"]), size_hint=payload.get("size"))

    def to_bbox(self, rules: Optional[LayoutRulesConfig] = None) -> BBox:
        rules = rules or LayoutRulesConfig()
        if self.kind == "mask":
            return mask_to_bbox(self.mask)
        if self.kind == "scribble":
            return scribble_to_bbox(self.points, rules.scribble_pad)
        size = self.size_hint if self.size_hint is not None else rules.point_size
        return point_to_bbox(self.center, size)


def convert_document(payload: Dict, kind: Optional[str] = None,
                     rules: Optional[LayoutRulesConfig] = None) -> LayoutDocument:
    """
    Turn a coarse-input layout record into a box layout document.

    The input has a "caption" and "entities", each with a "caption" and one
    coarse field; entities that already carry a "bbox" are kept as they are.
    """
    try:
        caption = str(payload["caption"])
        records = list(payload.get("entities", []))
    except (KeyError, TypeError) as e:
        raise LayoutError(f"Malformed coarse layout: {e}")
    entities = []
    for record in records:
        if "bbox" in record and not any(k in record for k in COARSE_KINDS):
            box = BBox(*[float(v) for v in record["bbox"]])
        else:
            box = CoarseInput.from_entity(record, kind).to_bbox(rules)
        entities.append(EntityDocument(str(record.get("caption", "")), box))
    logger.debug(f"Converted {len(entities)} coarse entities")
    return LayoutDocument(caption, entities)
