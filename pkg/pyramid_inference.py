"""
Test-time multi-scale inference.

The FCN sees instances at one training size but products on a shelf come in
many sizes, so each shelf image is shrunk repeatedly by a constant factor,
every level is scored densely, and the level masks are stretched back to the
original resolution and averaged.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

import config
from data_model import ScoreMask
from errors import ConfigurationError, InvalidInputError
from fcn_classifier import FcnModel, forward_mask

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

INTERPOLATIONS = ('bilinear', 'nearest', 'bicubic')


@dataclass
class PyramidConfig:
    """Downscale pyramid settings. min_level_hw is the FCN training size."""

    min_level_hw: Tuple[int, int]
    factor: float = 1.5
    max_levels: int = 10
    interpolation: str = 'bilinear'

    def __post_init__(self):
        self.min_level_hw = (int(self.min_level_hw[0]), int(self.min_level_hw[1]))
        if not self.factor > 1.0:
            raise ConfigurationError(f"Pyramid factor must be > 1, got {self.factor}")
        if self.max_levels < 1:
            raise ConfigurationError(f"max_levels must be >= 1, got {self.max_levels}")
        if self.interpolation not in INTERPOLATIONS:
            raise ConfigurationError(f"Unknown interpolation {self.interpolation!r}; use one of {INTERPOLATIONS}")

    @classmethod
    def for_model(cls, model: FcnModel, **params) -> 'PyramidConfig':
        return cls(min_level_hw=model.config.input_hw, **params)


def level_sizes(image_hw: Tuple[int, int], cfg: PyramidConfig) -> List[Tuple[int, int]]:
    """
    Sizes of the pyramid levels for an image of size image_hw.

    Level k is (floor(H / f^k), floor(W / f^k)); the list stops before either
    side drops below min_level_hw, or at max_levels.
    """
    H, W = image_hw
    H0, W0 = cfg.min_level_hw
    if H < H0 or W < W0:
        raise InvalidInputError(f"Image {H}x{W} smaller than the minimum pyramid level {H0}x{W0}")
    sizes = []
    for k in range(cfg.max_levels):
        scale = cfg.factor ** k
        h, w = math.floor(H / scale), math.floor(W / scale)
        if h < H0 or w < W0:
            break
        sizes.append((h, w))
    return sizes


def build_pyramid(image: np.ndarray, cfg: PyramidConfig) -> List[np.ndarray]:
    """
    Downscale pyramid of an RGB image; level 0 is the image itself.

    Args:
        image: (H, W, 3) uint8 pixels
        cfg: Pyramid settings

    Returns:
        List of progressively smaller images (area-averaged resampling)
    """
    levels = []
    for k, (h, w) in enumerate(level_sizes(image.shape[:2], cfg)):
        if k == 0:
            levels.append(image)
        else:
            levels.append(np.asarray(Image.fromarray(image).resize((w, h), Image.BOX)))
    return levels


def resize_mask(mask: ScoreMask, target_hw: Tuple[int, int], interpolation: str = 'bilinear') -> np.ndarray:
    """Stretch a mask uniformly over target_hw; returns (C, H, W) float32."""
    values = torch.from_numpy(np.array(mask.values, dtype=np.float32)).unsqueeze(0)
    if tuple(target_hw) == mask.shape_hw:
        return values[0].numpy()
    kwargs = {} if interpolation == 'nearest' else {'align_corners': False}
    resized = F.interpolate(values, size=tuple(target_hw), mode=interpolation, **kwargs)[0]
    return resized.numpy()


def fuse_pyramid(masks: Sequence[ScoreMask],
                 target_hw: Tuple[int, int],
                 interpolation: str = 'bilinear') -> ScoreMask:
    """
    Resize every level mask to target_hw and take the per-pixel mean.

    Args:
        masks: Level masks, all with the same channel layout
        target_hw: Output size (the original image size)
        interpolation: Resize mode for the masks

    Returns:
        ScoreMask: Mean of the resized masks, accumulated in level order
    """
    if not masks:
        raise InvalidInputError("fuse_pyramid needs at least one mask")
    channels = {m.channels for m in masks}
    background = {m.has_background for m in masks}
    if len(channels) != 1 or len(background) != 1:
        raise InvalidInputError(f"Pyramid masks disagree on channel layout: {sorted(channels)}")

    total = np.zeros((masks[0].channels, int(target_hw[0]), int(target_hw[1])), dtype=np.float64)
    for mask in masks:
        total += resize_mask(mask, target_hw, interpolation)
    fused = total / len(masks)
    # bicubic can overshoot
    if interpolation == 'bicubic':
        fused = np.clip(fused, 0.0, 1.0)
    return ScoreMask(values=fused.astype(np.float32), has_background=masks[0].has_background)


def pyramid_forward(model: FcnModel, image: np.ndarray, cfg: PyramidConfig) -> ScoreMask:
    """
    Dense multi-scale score mask at the original image resolution.

    Equivalent to fuse_pyramid([forward_mask(model, level) for level in
    build_pyramid(image, cfg)], image size).
    """
    levels = build_pyramid(image, cfg)
    masks = [forward_mask(model, level) for level in levels]
    logger.debug(f"Pyramid of {len(levels)} levels for a {image.shape[0]}x{image.shape[1]} image")
    return fuse_pyramid(masks, image.shape[:2], cfg.interpolation)


def single_scale_forward(model: FcnModel, image: np.ndarray, interpolation: str = 'bilinear') -> ScoreMask:
    """Level-0 mask only, stretched to the image size (pyramid ablation)."""
    return fuse_pyramid([forward_mask(model, image)], image.shape[:2], interpolation)


if __name__ == "__main__":
    logger.info("=" * 80)
    logger.info("PYRAMID LEVELS")
    logger.info("=" * 80)
    demo = PyramidConfig(min_level_hw=(64, 128))
    for size in level_sizes((1200, 1600), demo):
        logger.info(f"  {size}")
