"""
Shelf detection engine.

Combines:
1. The trained FCN (dense scoring, optionally over an image pyramid)
2. The optional refine-net (ConvAE) checkpoint
3. Mask-to-box postprocessing
-> Scored boxes per shelf image
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import config
from data_model import Detection, ScoreMask
from errors import ConfigurationError
from fcn_classifier import load_fcn
from ingestion import ShelfRecord, load_image
from postprocess import DetectParams, SlidingWindowParams, detections_from_mask, sliding_window_baseline
from pyramid_inference import PyramidConfig, resize_mask
from refine_net import fcn_score_mask, load_convae, refine_at_working_resolution

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)


class ShelfDetector:
    """
    Frozen FCN (+ optional ConvAE) turned into a shelf detector.

    Workflow:
    1. Load checkpoints
    2. Score a shelf image (pyramid or single scale)
    3. Refine the score mask (when a ConvAE is loaded)
    4. Threshold -> connected components -> boxes
    """

    def __init__(self,
                 fcn_path: Union[str, Path],
                 convae_path: Optional[Union[str, Path]] = None,
                 pyramid_params: Optional[Dict] = None,
                 use_pyramid: bool = True):
        """
        Initialize the detector.

        Args:
            fcn_path: FCN checkpoint
            convae_path: ConvAE checkpoint (None = no refinement)
            pyramid_params: PyramidConfig keyword arguments (factor, max_levels, interpolation)
            use_pyramid: False runs the FCN at the original scale only
        """
        logger.info("Initializing shelf detector...")
        self.fcn, self.catalog = load_fcn(fcn_path)
        logger.info(f"  ✓ FCN loaded from {fcn_path} ({self.catalog.num_classes} classes)")

        self.pyramid: Optional[PyramidConfig] = None
        if use_pyramid:
            self.pyramid = PyramidConfig(min_level_hw=self.fcn.config.input_hw,
                                         **(pyramid_params or config.PYRAMID_PARAMS))

        self.convae = None
        self.working_resolution: Optional[Tuple[int, int]] = None
        if convae_path is not None:
            self.convae, refine_catalog, self.working_resolution = load_convae(convae_path)
            if refine_catalog != self.catalog:
                raise ConfigurationError(
                    f"ConvAE catalog {refine_catalog.names} does not match FCN catalog {self.catalog.names}"
                )
            logger.info(f"  ✓ ConvAE loaded from {convae_path} (working resolution {self.working_resolution})")

        mode = 'pyramid' if use_pyramid else 'single-scale'
        logger.info(f"✓ Shelf detector ready ({mode}{', refined' if self.convae else ''})")

    @property
    def refines(self) -> bool:
        return self.convae is not None

    def raw_mask(self, image: np.ndarray) -> ScoreMask:
        """FCN score mask at image resolution."""
        return fcn_score_mask(self.fcn, image, self.pyramid)

    def score_mask(self, image: np.ndarray) -> ScoreMask:
        """Final score mask: refined at the working resolution, or the raw FCN mask."""
        mask = self.raw_mask(image)
        if self.convae is None:
            return mask
        return refine_at_working_resolution(self.convae, mask, self.working_resolution)

    def mask_pair(self, image: np.ndarray) -> Tuple[ScoreMask, ScoreMask]:
        """
        (raw, refined) score masks, both at the working resolution.

        Raises:
            ConfigurationError: The detector has no refine-net
        """
        if self.convae is None:
            raise ConfigurationError("mask_pair needs a detector with a refine-net")
        mask = self.raw_mask(image)
        raw = ScoreMask(values=resize_mask(mask, self.working_resolution), has_background=mask.has_background)
        return raw, refine_at_working_resolution(self.convae, mask, self.working_resolution)

    def detect(self, image: np.ndarray, image_id: str, params: DetectParams) -> List[Detection]:
        return detections_from_mask(self.score_mask(image), params, image_id, image.shape[:2])

    def score_shelves(self, shelves: Sequence[ShelfRecord]) -> List[Tuple[ShelfRecord, ScoreMask]]:
        """Score masks for many shelves; reused across threshold sweeps."""
        return [(shelf, self.score_mask(load_image(shelf.path)))
                for shelf in tqdm(shelves, desc="Scoring shelves")]

    def detect_shelves(self, shelves: Sequence[ShelfRecord], params: DetectParams) -> List[Detection]:
        detections: List[Detection] = []
        for shelf, mask in self.score_shelves(shelves):
            detections.extend(detections_from_mask(mask, params, shelf.image_id, (shelf.height, shelf.width)))
        logger.info(f"  ✓ {len(detections)} detections on {len(shelves)} shelves")
        return detections

    def baseline_shelves(self, shelves: Sequence[ShelfRecord], params: SlidingWindowParams) -> List[Detection]:
        """Sliding-window baseline with the same FCN, for comparison."""
        detections: List[Detection] = []
        for shelf in tqdm(shelves, desc="Sliding windows"):
            detections.extend(sliding_window_baseline(self.fcn, load_image(shelf.path), params, shelf.image_id))
        logger.info(f"  ✓ {len(detections)} baseline detections on {len(shelves)} shelves")
        return detections
