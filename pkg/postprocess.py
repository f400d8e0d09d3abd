"""
From score masks to scored boxes.

- binarize / connected_components / detections_from_mask: threshold each
  positive channel, label its connected regions and box them
- nms: greedy per-class non-maximum suppression
- sliding_window_baseline: multi-scale, multi-aspect window classifier + NMS
- write_detections / read_detections: JSON Lines detection files
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

import config
from data_model import BoundingBox, ClassCatalog, Detection, ScoreMask, clip_box, iou
from errors import InvalidInputError
from fcn_classifier import FcnModel, to_tensor

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

DETECTION_KEYS = ['image_id', 'class', 'score', 'x_min', 'y_min', 'x_max', 'y_max']


def _check_unit_open(name: str, value: float):
    if not 0.0 < value < 1.0:
        raise InvalidInputError(f"{name} must be in (0, 1), got {value}")


# ============================================================================
# MASK -> BOXES
# ============================================================================

@dataclass
class DetectParams:
    """
    Mask-to-box settings.

    `class_thresholds` maps label ids to per-class binarization thresholds;
    other classes use `threshold`. The minimum component area is a fraction
    of the image area unless `min_area_px` is given.
    """

    threshold: float = 0.5
    class_thresholds: Dict[int, float] = field(default_factory=dict)
    connectivity: int = 8
    min_area_fraction: float = 1e-4
    min_area_px: Optional[float] = None

    def __post_init__(self):
        self.class_thresholds = {int(k): float(v) for k, v in self.class_thresholds.items()}
        _check_unit_open('threshold', self.threshold)
        for label, value in self.class_thresholds.items():
            _check_unit_open(f"threshold of class {label}", value)
        if self.connectivity not in (4, 8):
            raise InvalidInputError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if self.min_area_fraction < 0 or (self.min_area_px is not None and self.min_area_px < 0):
            raise InvalidInputError("Minimum component area must be >= 0")

    def threshold_for(self, label: int) -> float:
        return self.class_thresholds.get(label, self.threshold)

    def min_area_for(self, image_hw: Tuple[int, int]) -> float:
        if self.min_area_px is not None:
            return self.min_area_px
        return self.min_area_fraction * image_hw[0] * image_hw[1]


@dataclass(frozen=True, eq=False)
class Component:
    """One connected region: its cell coordinates, tight box and cell count."""

    rows: np.ndarray
    cols: np.ndarray
    box: BoundingBox

    @property
    def area(self) -> int:
        return int(self.rows.size)


def binarize(channel: np.ndarray, threshold: float) -> np.ndarray:
    """Boolean grid, true where value >= threshold."""
    _check_unit_open('threshold', threshold)
    return np.asarray(channel) >= threshold


def connected_components(grid: np.ndarray, connectivity: int = 8) -> List[Component]:
    """
    Maximal connected sets of true cells, in raster order of their first cell.

    Args:
        grid: Boolean (H, W) grid
        connectivity: 4 (edge neighbors) or 8 (edge + corner neighbors)

    Returns:
        List of Component with half-open tight boxes in cell units
    """
    if connectivity not in (4, 8):
        raise InvalidInputError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labeled, count = ndimage.label(np.asarray(grid, dtype=bool), structure=structure)
    components = []
    for index, sl in enumerate(ndimage.find_objects(labeled), start=1):
        if sl is None:
            continue
        rows, cols = np.nonzero(labeled[sl] == index)
        rows, cols = rows + sl[0].start, cols + sl[1].start
        box = BoundingBox(sl[1].start, sl[0].start, sl[1].stop, sl[0].stop)
        components.append(Component(rows=rows, cols=cols, box=box))
    return components


def detections_from_mask(mask: ScoreMask,
                         params: DetectParams,
                         image_id: str,
                         image_hw: Optional[Tuple[int, int]] = None) -> List[Detection]:
    """
    Threshold, label and box every positive class channel of a mask.

    Mask cells are stretched uniformly over the image, so a mask of any
    resolution can be boxed in image coordinates.

    Args:
        mask: Score mask (background channel, if any, is ignored)
        params: Thresholds, connectivity and area filter
        image_id: Id stored on each detection
        image_hw: Image size (default: the mask size)

    Returns:
        One Detection per surviving component, scored by its max mask value
    """
    H, W = image_hw if image_hw is not None else mask.shape_hw
    sy, sx = H / mask.height, W / mask.width
    min_area = params.min_area_for((H, W))

    detections = []
    for label, grid in mask.positive_channels():
        binary = binarize(grid, params.threshold_for(label))
        for comp in connected_components(binary, params.connectivity):
            if comp.area * sx * sy < min_area:
                continue
            score = min(1.0, float(grid[comp.rows, comp.cols].max()))
            box = clip_box(comp.box.scaled(sx, sy), W, H)
            detections.append(Detection(image_id=image_id, class_id=label, box=box, score=score))
    return detections


# ============================================================================
# NMS
# ============================================================================

def _nms_key(d: Detection) -> Tuple:
    return (-d.score, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max)


def nms(detections: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """
    Greedy non-maximum suppression, independently per (image, class).

    A detection is dropped when its IoU with an already kept detection of the
    same class exceeds iou_threshold. Candidates are visited by descending
    score, ties broken by x_min then y_min.

    Returns:
        Kept detections ordered by image, class, then visiting order
    """
    _check_unit_open('iou_threshold', iou_threshold)
    groups: Dict[Tuple[str, int], List[Detection]] = {}
    for d in detections:
        groups.setdefault((d.image_id, d.class_id), []).append(d)

    kept: List[Detection] = []
    for key in sorted(groups):
        survivors: List[Detection] = []
        for d in sorted(groups[key], key=_nms_key):
            if all(iou(d.box, k.box) <= iou_threshold for k in survivors):
                survivors.append(d)
        kept.extend(survivors)
    return kept


# ============================================================================
# SLIDING-WINDOW BASELINE
# ============================================================================

@dataclass
class SlidingWindowParams:
    scales: Tuple[float, ...] = (0.8, 1.0, 1.25)
    aspect_ratios: Tuple[float, ...] = (0.5, 0.75, 1.0, 1.33, 2.0)
    stride_fraction: float = 0.25
    score_threshold: float = 0.5
    nms_iou: float = 0.3
    batch_size: int = 256

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.aspect_ratios = tuple(float(a) for a in self.aspect_ratios)
        if not self.scales or min(self.scales) <= 0:
            raise InvalidInputError(f"scales must be positive, got {self.scales}")
        if not self.aspect_ratios or min(self.aspect_ratios) <= 0:
            raise InvalidInputError(f"aspect_ratios must be positive, got {self.aspect_ratios}")
        if not 0.0 < self.stride_fraction <= 1.0:
            raise InvalidInputError(f"stride_fraction must be in (0, 1], got {self.stride_fraction}")
        if not 0.0 < self.score_threshold <= 1.0:
            raise InvalidInputError(f"score_threshold must be in (0, 1], got {self.score_threshold}")
        _check_unit_open('nms_iou', self.nms_iou)


def window_sizes(training_hw: Tuple[int, int], params: SlidingWindowParams) -> List[Tuple[int, int]]:
    """(h, w) of every scale x aspect-ratio window; aspect ratio scales width over height."""
    H0, W0 = training_hw
    sizes = []
    for s in params.scales:
        for a in params.aspect_ratios:
            sizes.append((max(1, round(H0 * s / math.sqrt(a))), max(1, round(W0 * s * math.sqrt(a)))))
    return sizes


def sliding_window_baseline(fcn_model: FcnModel,
                            image: np.ndarray,
                            params: SlidingWindowParams,
                            image_id: str = 'image') -> List[Detection]:
    """
    Classify every window of every size and keep the confident ones.

    Each window is resized to the FCN training size and classified; its best
    positive-class probability becomes the detection score when it reaches
    params.score_threshold. Per-class NMS is applied at the end. Windows that
    do not fit the image are skipped.
    """
    cfg = fcn_model.config
    H, W = image.shape[:2]
    H0, W0 = cfg.input_hw
    offset = 1 if cfg.include_background else 0
    pixels = to_tensor(image)

    fcn_model.eval()
    candidates: List[Detection] = []
    for wh, ww in window_sizes(cfg.input_hw, params):
        if wh > H or ww > W:
            continue
        sy = max(1, round(wh * params.stride_fraction))
        sx = max(1, round(ww * params.stride_fraction))
        origins = [(y, x) for y in range(0, H - wh + 1, sy) for x in range(0, W - ww + 1, sx)]
        for start in range(0, len(origins), params.batch_size):
            chunk = origins[start:start + params.batch_size]
            crops = torch.stack([pixels[:, y:y + wh, x:x + ww] for y, x in chunk])
            if (wh, ww) != (H0, W0):
                crops = F.interpolate(crops, size=(H0, W0), mode='bilinear', align_corners=False, antialias=True)
            with torch.no_grad():
                probs = F.softmax(fcn_model(crops).flatten(1), dim=1)[:, offset:].numpy()
            best = probs.argmax(axis=1)
            for (y, x), channel, row in zip(chunk, best, probs):
                score = float(row[channel])
                if score >= params.score_threshold:
                    candidates.append(Detection(image_id=image_id, class_id=int(channel) + 1,
                                                box=BoundingBox(x, y, x + ww, y + wh), score=min(1.0, score)))

    kept = nms(candidates, params.nms_iou)
    logger.debug(f"Sliding window on {image_id}: {len(candidates)} candidates, {len(kept)} after NMS")
    return kept


# ============================================================================
# DETECTION FILES
# ============================================================================

def write_detections(detections: Sequence[Detection],
                     path: Union[str, Path],
                     catalog: ClassCatalog) -> Path:
    """Write one JSON object per line, ordered by image, class, score desc, x_min, y_min."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(detections, key=lambda d: (d.image_id, d.class_id, -d.score, d.box.x_min, d.box.y_min))
    with open(path, 'w', encoding='utf-8') as f:
        for d in ordered:
            record = {'image_id': d.image_id, 'class': catalog.name_of(d.class_id), 'score': d.score,
                      'x_min': d.box.x_min, 'y_min': d.box.y_min, 'x_max': d.box.x_max, 'y_max': d.box.y_max}
            f.write(json.dumps(record) + '\n')
    logger.info(f"  ✓ {len(ordered)} detections written to {path}")
    return path


def read_detections(path: Union[str, Path], catalog: ClassCatalog) -> List[Detection]:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"Detections file not found: {path}")
    detections = []
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                box = BoundingBox(float(r['x_min']), float(r['y_min']), float(r['x_max']), float(r['y_max']))
                detections.append(Detection(image_id=str(r['image_id']), class_id=catalog.label_of(r['class']),
                                            box=box, score=float(r['score'])))
            except (KeyError, TypeError, ValueError) as e:
                raise InvalidInputError(f"Malformed detection at {path}:{line_no}: {e}") from e
    return detections


if __name__ == "__main__":
    demo = np.zeros((6, 6))
    demo[1:3, 1:3] = 0.9
    demo[4, 4] = 0.7
    for c in connected_components(binarize(demo, 0.5)):
        logger.info(f"  component {c.box.as_tuple()} area={c.area}")
