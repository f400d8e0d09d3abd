"""
Result overlays: ground truth in blue, predictions in red with a
"class score" label.
"""

import logging
import math
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw, ImageFont

import config
from data_model import Annotation, BoundingBox, ClassCatalog, Detection
from errors import InvalidInputError

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

GT_COLOR = (0, 0, 255)
PRED_COLOR = (255, 0, 0)
STROKE_WIDTH = 2


def _pixel_rect(box: BoundingBox, width: int, height: int) -> Optional[Tuple[int, int, int, int]]:
    """Inclusive pixel rectangle of a half-open box, clipped to the image; None if nothing is visible."""
    x0 = max(0, math.floor(box.x_min))
    y0 = max(0, math.floor(box.y_min))
    x1 = min(width - 1, math.ceil(box.x_max) - 1)
    y1 = min(height - 1, math.ceil(box.y_max) - 1)
    if x0 > x1 or y0 > y1:
        return None
    return x0, y0, x1, y1


def render_overlay(image: np.ndarray,
                   annotations: Sequence[Annotation],
                   detections: Sequence[Detection],
                   output_path: Union[str, Path],
                   catalog: Optional[ClassCatalog] = None) -> Path:
    """
    Draw boxes on a copy of an image and save it as PNG.

    Args:
        image: (H, W, 3) uint8 pixels
        annotations: Ground truth, outlined in blue
        detections: Predictions, outlined in red and labeled
        output_path: PNG file to write
        catalog: Used for class names in labels (label ids otherwise)

    Returns:
        Path: The written file
    """
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert('RGB')
    draw = ImageDraw.Draw(canvas)
    width, height = canvas.size
    font = ImageFont.load_default()

    for a in annotations:
        rect = _pixel_rect(a.box, width, height)
        if rect is not None:
            draw.rectangle(rect, outline=GT_COLOR, width=STROKE_WIDTH)

    for d in detections:
        rect = _pixel_rect(d.box, width, height)
        if rect is None:
            continue
        draw.rectangle(rect, outline=PRED_COLOR, width=STROKE_WIDTH)
        name = catalog.name_of(d.class_id) if catalog else str(d.class_id)
        text = f"{name} {d.score:.2f}"
        _, _, tw, th = draw.textbbox((0, 0), text, font=font)
        tx = min(rect[0], max(0, width - tw))
        ty = rect[1] - th - 1 if rect[1] - th - 1 >= 0 else rect[1] + STROKE_WIDTH + 1
        draw.text((tx, ty), text, fill=PRED_COLOR, font=font)

    output_path = Path(output_path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(output_path, format='PNG')
    except OSError as e:
        raise InvalidInputError(f"Cannot write overlay to {output_path}: {e}") from e
    return output_path
