"""
Shared geometric and labeling types for the Shelf WSOL pipeline.

This module provides:
- BoundingBox, Annotation, Detection: axis-aligned pixel boxes
- ClassCatalog: class names and the fixed channel layout of score masks
- ScoreMask: per-pixel, per-channel probability grid
- Pure geometry helpers (IoU, clipping, rasterization)

Label ids are used everywhere outside the networks: 0 is background and
positive classes are 1..N in catalog order. Channel indices only matter
inside a ScoreMask: with a background channel, channel == label id; without
one, channel == label id - 1.
"""

import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

import config
from errors import DegenerateBoxError, InvalidInputError


# ============================================================================
# BOXES
# ============================================================================

@dataclass(frozen=True)
class BoundingBox:
    """
    Axis-aligned box in continuous pixel coordinates.

    Origin is top-left, x grows rightward, y downward. Boxes are half-open:
    when rasterized, x_max / y_max are exclusive.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidInputError(f"Non-finite box coordinates: {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBoxError(f"Zero-area box: {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def scaled(self, sx: float, sy: float) -> 'BoundingBox':
        """Return the box with x scaled by sx and y by sy."""
        return BoundingBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """
    Intersection over union of two boxes.

    Args:
        a: First box
        b: Second box

    Returns:
        float: Ratio in [0, 1]; 0 when the boxes are disjoint
    """
    if not isinstance(a, BoundingBox) or not isinstance(b, BoundingBox):
        raise InvalidInputError("iou() expects two BoundingBox instances")

    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def clip_box(b: BoundingBox, image_w: float, image_h: float) -> BoundingBox:
    """
    Clamp a box to the image extent [0, image_w] x [0, image_h].

    Args:
        b: Box to clip
        image_w: Image width in pixels
        image_h: Image height in pixels

    Returns:
        BoundingBox: Clipped box

    Raises:
        InvalidInputError: Non-positive image size
        DegenerateBoxError: Clipping leaves zero area (box outside the image)
    """
    if image_w <= 0 or image_h <= 0:
        raise InvalidInputError(f"Image size must be positive, got {image_w}x{image_h}")

    x_min = min(max(b.x_min, 0.0), image_w)
    y_min = min(max(b.y_min, 0.0), image_h)
    x_max = min(max(b.x_max, 0.0), image_w)
    y_max = min(max(b.y_max, 0.0), image_h)
    if not (x_min < x_max and y_min < y_max):
        raise DegenerateBoxError(f"Box {b.as_tuple()} lies outside a {image_w}x{image_h} image")
    if (x_min, y_min, x_max, y_max) == b.as_tuple():
        return b
    return BoundingBox(x_min, y_min, x_max, y_max)


def rasterize_box(b: BoundingBox, height: int, width: int) -> np.ndarray:
    """
    Boolean (height, width) grid of the pixels whose centers fall in the box.

    Integer boxes cover exactly columns [x_min, x_max) and rows [y_min, y_max).
    """
    grid = np.zeros((height, width), dtype=bool)
    c0 = max(0, math.ceil(b.x_min - 0.5))
    c1 = min(width, math.ceil(b.x_max - 0.5))
    r0 = max(0, math.ceil(b.y_min - 0.5))
    r1 = min(height, math.ceil(b.y_max - 0.5))
    if c0 < c1 and r0 < r1:
        grid[r0:r1, c0:c1] = True
    return grid


# ============================================================================
# CLASS CATALOG
# ============================================================================

@dataclass(frozen=True)
class ClassCatalog:
    """
    Ordered positive class names plus the background flag.

    The channel layout of every ScoreMask is derived from this catalog and is
    never reordered.
    """

    names: Tuple[str, ...]
    include_background: bool = True

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, 'names', names)
        if len(names) < 1:
            raise InvalidInputError("A catalog needs at least one positive class")
        if len(set(names)) != len(names):
            raise InvalidInputError(f"Duplicate class names in catalog: {names}")
        if config.BACKGROUND_NAME in names:
            raise InvalidInputError(
                f"'{config.BACKGROUND_NAME}' is reserved; use include_background instead"
            )

    @property
    def num_classes(self) -> int:
        """N, the number of positive classes."""
        return len(self.names)

    @property
    def num_channels(self) -> int:
        return self.num_classes + (1 if self.include_background else 0)

    @property
    def positive_labels(self) -> List[int]:
        return list(range(1, self.num_classes + 1))

    def label_of(self, name: str) -> int:
        """Label id of a class name (0 for background)."""
        if name == config.BACKGROUND_NAME:
            return 0
        try:
            return self.names.index(name) + 1
        except ValueError:
            raise InvalidInputError(f"Unknown class name: {name!r}") from None

    def name_of(self, label: int) -> str:
        if label == 0:
            return config.BACKGROUND_NAME
        if not 1 <= label <= self.num_classes:
            raise InvalidInputError(f"Label id {label} outside catalog (N={self.num_classes})")
        return self.names[label - 1]

    def channel_of(self, label: int) -> int:
        """ScoreMask channel holding a label id."""
        if label == 0 and not self.include_background:
            raise InvalidInputError("Catalog has no background channel")
        self.name_of(label)
        return label if self.include_background else label - 1

    def label_of_channel(self, channel: int) -> int:
        if not 0 <= channel < self.num_channels:
            raise InvalidInputError(f"Channel {channel} outside catalog layout")
        return channel if self.include_background else channel + 1

    def to_dict(self) -> Dict:
        return {'names': list(self.names), 'include_background': self.include_background}

    @classmethod
    def from_dict(cls, data: Dict) -> 'ClassCatalog':
        return cls(names=tuple(data['names']), include_background=bool(data.get('include_background', True)))


# ============================================================================
# ANNOTATIONS / DETECTIONS
# ============================================================================

@dataclass(frozen=True)
class Annotation:
    """Ground-truth box of one positive class on one image."""

    image_id: str
    class_id: int
    box: BoundingBox

    def __post_init__(self):
        if self.class_id < 1:
            raise InvalidInputError(f"Annotation class_id must be a positive class, got {self.class_id}")


@dataclass(frozen=True)
class Detection:
    """Scored predicted box of one positive class on one image."""

    image_id: str
    class_id: int
    box: BoundingBox
    score: float

    def __post_init__(self):
        if self.class_id < 1:
            raise InvalidInputError(f"Detection class_id must be a positive class, got {self.class_id}")
        if not (0.0 <= self.score <= 1.0):
            raise InvalidInputError(f"Detection score must be in [0, 1], got {self.score}")


def detection_sort_key(d: Detection) -> Tuple:
    """Descending score, then image id and coordinates, for reproducible ranking."""
    return (-d.score, d.image_id, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)


# ============================================================================
# SCORE MASK
# ============================================================================

@dataclass(frozen=True, eq=False)
class ScoreMask:
    """
    Per-pixel, per-channel probabilities with shape (channels, height, width).

    `has_background` tells whether channel 0 is the background channel; the
    remaining channels follow the catalog order.
    """

    values: np.ndarray
    has_background: bool = True

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise InvalidInputError(f"ScoreMask values must be (C, H, W), got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1 or values.shape[2] < 1:
            raise InvalidInputError(f"Empty ScoreMask: {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("ScoreMask contains non-finite values")
        # float32 softmax / interpolation can drift by an ulp
        if values.min() < -1e-5 or values.max() > 1 + 1e-5:
            raise InvalidInputError("ScoreMask values must lie in [0, 1]")
        values = np.clip(values, 0.0, 1.0)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape_hw(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def label_of_channel(self, channel: int) -> int:
        return channel if self.has_background else channel + 1

    def positive_channels(self) -> Iterator[Tuple[int, np.ndarray]]:
        """Yield (label id, channel grid) for every positive class channel."""
        start = 1 if self.has_background else 0
        for channel in range(start, self.channels):
            yield self.label_of_channel(channel), self.values[channel]

    def argmax_labels(self) -> np.ndarray:
        """(H, W) grid of label ids of the most probable channel."""
        best = np.argmax(self.values, axis=0)
        return best if self.has_background else best + 1

    def channel_sums(self) -> np.ndarray:
        return self.values.sum(axis=0)


def boxes_to_label_grid(boxes: Sequence[Tuple[int, BoundingBox]], height: int, width: int) -> np.ndarray:
    """Rasterize (label id, box) pairs into an (H, W) uint8 label grid, 0 elsewhere."""
    grid = np.zeros((height, width), dtype=np.uint8)
    for label, box in boxes:
        grid[rasterize_box(box, height, width)] = label
    return grid
