"""
Synthetic planogram generator.

Product instances are pasted onto empty-shelf backgrounds in rows and
columns. Every sample carries the composited image, a per-pixel label mask
(0 = background) and the list of pasted boxes, so it can supervise the
refine-net and double as a labeled test shelf.

Output layout of save_dataset():

    images/NNNNN.png     RGB canvas
    masks/NNNNN.png      single-channel label ids
    boxes.csv            sample_id,class,x_min,y_min,x_max,y_max
    synth_config.json    generator settings used
    classes.json, annotations.csv, shelves.csv
                         the same boxes as a normalized manifest
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from tqdm import tqdm

import config
from data_model import Annotation, BoundingBox, ClassCatalog
from errors import ConfigurationError, GenerationError, InvalidInputError
from ingestion import InstanceImage, load_image, save_image, write_manifest

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

BACKGROUND_MODES = ('pool', 'stripes', 'black')
BOXES_FILE = 'boxes.csv'
SNAPSHOT_FILE = 'synth_config.json'
BOX_COLUMNS = ['sample_id', 'class', 'x_min', 'y_min', 'x_max', 'y_max']


# ============================================================================
# CONFIGURATION / TYPES
# ============================================================================

@dataclass
class SynthConfig:
    """
    Planogram generator settings.

    Rows are evenly spaced bands; a product is bottom-aligned to its band's
    baseline. The row count drawn for a sample selects the canvas size.
    """

    product_pool: Sequence[InstanceImage]
    background_pool: Sequence[np.ndarray] = ()
    canvas_large_hw: Tuple[int, int] = (2000, 3000)
    canvas_small_hw: Tuple[int, int] = (1200, 2000)
    large_canvas_min_rows: int = 4
    rows_range: Tuple[int, int] = (2, 6)
    columns_range: Tuple[int, int] = (4, 12)
    scale_range: Tuple[float, float] = (0.5, 1.1)
    jitter_px: int = 40
    baseline_offset_px: int = 0
    background_mode: str = 'pool'
    samples: int = 200
    seed: int = config.DEFAULT_SEED

    def __post_init__(self):
        self.canvas_large_hw = tuple(int(v) for v in self.canvas_large_hw)
        self.canvas_small_hw = tuple(int(v) for v in self.canvas_small_hw)
        self.rows_range = tuple(int(v) for v in self.rows_range)
        self.columns_range = tuple(int(v) for v in self.columns_range)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.validate()

    def validate(self):
        if not self.product_pool:
            raise ConfigurationError("Product pool is empty")
        if any(p.class_id < 1 for p in self.product_pool):
            raise ConfigurationError("Product pool may only hold positive-class instances")
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"scale_range must be positive and ordered, got {self.scale_range}")
        for name in ('rows_range', 'columns_range'):
            r_lo, r_hi = getattr(self, name)
            if not (1 <= r_lo <= r_hi):
                raise ConfigurationError(f"{name} must satisfy 1 <= lo <= hi, got {(r_lo, r_hi)}")
        if min(self.canvas_large_hw + self.canvas_small_hw) < 1:
            raise ConfigurationError("Canvas sizes must be positive")
        if self.jitter_px < 0 or self.baseline_offset_px < 0:
            raise ConfigurationError("jitter_px and baseline_offset_px must be >= 0")
        if self.background_mode not in BACKGROUND_MODES:
            raise ConfigurationError(f"Unknown background_mode {self.background_mode!r}; use one of {BACKGROUND_MODES}")
        if self.samples < 1:
            raise ConfigurationError(f"samples must be >= 1, got {self.samples}")

    @property
    def class_ids(self) -> List[int]:
        return sorted({p.class_id for p in self.product_pool})

    def canvas_for_rows(self, rows: int) -> Tuple[int, int]:
        return self.canvas_large_hw if rows >= self.large_canvas_min_rows else self.canvas_small_hw

    def snapshot(self) -> Dict:
        """Plain-dict settings for provenance; pools are summarized by size."""
        return {
            'canvas_large_hw': list(self.canvas_large_hw),
            'canvas_small_hw': list(self.canvas_small_hw),
            'large_canvas_min_rows': self.large_canvas_min_rows,
            'rows_range': list(self.rows_range),
            'columns_range': list(self.columns_range),
            'scale_range': list(self.scale_range),
            'jitter_px': self.jitter_px,
            'baseline_offset_px': self.baseline_offset_px,
            'background_mode': self.background_mode,
            'samples': self.samples,
            'seed': self.seed,
            'product_pool_size': len(self.product_pool),
            'background_pool_size': len(self.background_pool),
            'class_ids': self.class_ids,
        }


@dataclass(frozen=True, eq=False)
class SyntheticSample:
    """Composited shelf, its label mask and the pasted (label id, box) list."""

    sample_id: str
    image: np.ndarray
    gt_mask: np.ndarray
    boxes: Tuple[Tuple[int, BoundingBox], ...]
    rows: int = 0

    @property
    def shape_hw(self) -> Tuple[int, int]:
        return self.image.shape[:2]

    def annotations(self, image_id: Optional[str] = None) -> List[Annotation]:
        image_id = image_id or self.sample_id
        return [Annotation(image_id=image_id, class_id=label, box=box) for label, box in self.boxes]


@dataclass
class SyntheticDataset:
    samples: List[SyntheticSample]
    snapshot: Dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def class_counts(self) -> Counter:
        return Counter(label for s in self.samples for label, _ in s.boxes)

    def boxes_frame(self, catalog: Optional[ClassCatalog] = None) -> pd.DataFrame:
        """One row per pasted box; class is a name when a catalog is given."""
        rows = []
        for s in self.samples:
            for label, box in s.boxes:
                rows.append([s.sample_id, catalog.name_of(label) if catalog else label, *box.as_tuple()])
        return pd.DataFrame(rows, columns=BOX_COLUMNS)


# ============================================================================
# BACKGROUNDS
# ============================================================================

def stripes_background(canvas_hw: Tuple[int, int], rows: int, rng: np.random.Generator) -> np.ndarray:
    """Flat-shaded wall with a darker shelf board at the bottom of every row band."""
    H, W = canvas_hw
    wall = rng.integers(150, 230, size=3)
    board = (wall * rng.uniform(0.35, 0.6)).astype(np.int64)
    canvas = np.empty((H, W, 3), dtype=np.uint8)
    canvas[:] = wall
    # vertical shading so bands differ slightly
    shade = np.linspace(0.9, 1.05, H)[:, None, None]
    canvas = np.clip(canvas * shade, 0, 255).astype(np.uint8)
    thickness = max(2, H // (rows * 12))
    for r in range(rows):
        bottom = math.floor((r + 1) * H / rows)
        canvas[max(0, bottom - thickness):bottom] = board
    return canvas


def _background(cfg: SynthConfig, canvas_hw: Tuple[int, int], rows: int, rng: np.random.Generator) -> np.ndarray:
    H, W = canvas_hw
    if cfg.background_mode == 'black':
        return np.zeros((H, W, 3), dtype=np.uint8)
    if cfg.background_mode == 'pool' and cfg.background_pool:
        choice = cfg.background_pool[int(rng.integers(len(cfg.background_pool)))]
        return np.asarray(Image.fromarray(choice).resize((W, H), Image.BILINEAR)).copy()
    return stripes_background(canvas_hw, rows, rng)


def _scaled_size(product: InstanceImage, scale: float) -> Tuple[int, int]:
    return max(1, round(product.height * scale)), max(1, round(product.width * scale))


def _resize_product(product: InstanceImage, size_hw: Tuple[int, int]) -> np.ndarray:
    h, w = size_hw
    if (h, w) == (product.height, product.width):
        return product.pixels
    return np.asarray(Image.fromarray(product.pixels).resize((w, h), Image.BILINEAR))


# ============================================================================
# GENERATION
# ============================================================================

def generate_shelf(cfg: SynthConfig, seed: int, sample_id: Optional[str] = None) -> SyntheticSample:
    """
    Generate one synthetic shelf.

    Args:
        cfg: Generator settings
        seed: Sample seed; the output is a pure function of (cfg, seed)
        sample_id: Identifier stored on the sample (default: the seed)

    Returns:
        SyntheticSample

    Raises:
        GenerationError: No product fits anywhere on the canvas
    """
    rng = np.random.default_rng(seed)
    rows = int(rng.integers(cfg.rows_range[0], cfg.rows_range[1] + 1))
    H, W = cfg.canvas_for_rows(rows)
    canvas = _background(cfg, (H, W), rows, rng)
    gt_mask = np.zeros((H, W), dtype=np.uint8)

    by_class: Dict[int, List[InstanceImage]] = {}
    for product in cfg.product_pool:
        by_class.setdefault(product.class_id, []).append(product)
    class_ids = cfg.class_ids

    boxes: List[Tuple[int, BoundingBox]] = []
    for r in range(rows):
        top = math.floor(r * H / rows)
        baseline = math.floor((r + 1) * H / rows) - cfg.baseline_offset_px
        columns = int(rng.integers(cfg.columns_range[0], cfg.columns_range[1] + 1))
        x = int(rng.integers(0, cfg.jitter_px + 1))
        for _ in range(columns):
            label = class_ids[int(rng.integers(len(class_ids)))]
            members = by_class[label]
            product = members[int(rng.integers(len(members)))]
            scale = float(rng.uniform(cfg.scale_range[0], cfg.scale_range[1]))
            gap = int(rng.integers(0, cfg.jitter_px + 1))

            ph, pw = _scaled_size(product, scale)
            if ph > baseline - top or x + pw > W:
                continue
            y0 = baseline - ph
            canvas[y0:baseline, x:x + pw] = _resize_product(product, (ph, pw))
            gt_mask[y0:baseline, x:x + pw] = label
            boxes.append((label, BoundingBox(x, y0, x + pw, baseline)))
            x += pw + gap

    if not boxes:
        raise GenerationError(
            f"No product fits a {H}x{W} canvas with {rows} rows at scales {cfg.scale_range}"
        )
    return SyntheticSample(sample_id=sample_id or f"{seed:05d}", image=canvas,
                           gt_mask=gt_mask, boxes=tuple(boxes), rows=rows)


def generate_dataset(cfg: SynthConfig) -> SyntheticDataset:
    """
    Generate cfg.samples shelves with per-sample seeds cfg.seed + index.

    Returns:
        SyntheticDataset: Samples plus the config snapshot
    """
    logger.info("=" * 80)
    logger.info(f"SYNTHETIC PLANOGRAMS: {cfg.samples} samples, {len(cfg.class_ids)} classes, "
                f"background={cfg.background_mode}")
    logger.info("=" * 80)
    if cfg.background_mode == 'pool' and not cfg.background_pool:
        logger.warning("⚠ Empty background pool, falling back to stripe backgrounds")

    samples = [generate_shelf(cfg, cfg.seed + i, sample_id=f"{i:05d}")
               for i in tqdm(range(cfg.samples), desc="Synthesizing shelves")]
    dataset = SyntheticDataset(samples=samples, snapshot=cfg.snapshot())

    counts = dataset.class_counts()
    n_boxes = sum(counts.values())
    logger.info(f"  ✓ {len(samples)} shelves, {n_boxes} products")
    for label in cfg.class_ids:
        logger.debug(f"    class {label}: {counts.get(label, 0)}")
    return dataset


# ============================================================================
# PERSISTENCE
# ============================================================================

def save_dataset(dataset: SyntheticDataset, root: Union[str, Path], catalog: ClassCatalog) -> Path:
    """Write images, masks, boxes.csv, the config snapshot and a normalized manifest."""
    root = Path(root)
    (root / 'images').mkdir(parents=True, exist_ok=True)
    (root / 'masks').mkdir(parents=True, exist_ok=True)

    for s in tqdm(dataset.samples, desc="Writing shelves"):
        save_image(s.image, root / 'images' / f"{s.sample_id}.png")
        save_image(s.gt_mask, root / 'masks' / f"{s.sample_id}.png")

    frame = dataset.boxes_frame(catalog)
    frame.to_csv(root / BOXES_FILE, index=False)
    with open(root / SNAPSHOT_FILE, 'w', encoding='utf-8') as f:
        json.dump(dataset.snapshot, f, indent=2)

    write_manifest(
        root, catalog,
        annotations=[(f"images/{sid}.png", name, x0, y0, x1, y1)
                     for sid, name, x0, y0, x1, y1 in frame[BOX_COLUMNS].itertuples(index=False, name=None)],
        shelves=[(f"images/{s.sample_id}.png", 'test') for s in dataset.samples],
    )
    logger.info(f"  ✓ Synthetic dataset saved to {root}")
    return root


def load_dataset(root: Union[str, Path], catalog: ClassCatalog) -> SyntheticDataset:
    """Read a directory written by save_dataset."""
    root = Path(root)
    boxes_path = root / BOXES_FILE
    if not boxes_path.exists():
        raise InvalidInputError(f"Not a synthetic dataset directory (no {BOXES_FILE}): {root}")
    frame = pd.read_csv(boxes_path, dtype={'sample_id': str, 'class': str})

    by_sample: Dict[str, List[Tuple[int, BoundingBox]]] = {}
    for sid, name, x0, y0, x1, y1 in frame[BOX_COLUMNS].itertuples(index=False, name=None):
        box = BoundingBox(float(x0), float(y0), float(x1), float(y1))
        by_sample.setdefault(sid, []).append((catalog.label_of(name), box))

    samples = []
    for image_path in sorted((root / 'images').glob('*.png')):
        sample_id = image_path.stem
        with Image.open(root / 'masks' / f"{sample_id}.png") as m:
            gt_mask = np.asarray(m, dtype=np.uint8).copy()
        samples.append(SyntheticSample(sample_id=sample_id, image=load_image(image_path), gt_mask=gt_mask,
                                       boxes=tuple(by_sample.get(sample_id, ()))))

    snapshot = {}
    if (root / SNAPSHOT_FILE).exists():
        with open(root / SNAPSHOT_FILE, 'r', encoding='utf-8') as f:
            snapshot = json.load(f)
    logger.info(f"  ✓ Loaded {len(samples)} synthetic shelves from {root}")
    return SyntheticDataset(samples=samples, snapshot=snapshot)


if __name__ == "__main__":
    demo_rng = np.random.default_rng(0)
    demo_products = [
        InstanceImage(pixels=np.full((100, 60, 3), c, dtype=np.uint8), class_id=i + 1, source_id=f"demo{i}")
        for i, c in enumerate([(200, 30, 30), (30, 30, 200)])
    ]
    demo = SynthConfig(product_pool=demo_products, background_mode='stripes', samples=3,
                       canvas_small_hw=(300, 500), canvas_large_hw=(500, 750), scale_range=(0.5, 1.0))
    demo_set = generate_dataset(demo)
    for s in demo_set.samples:
        logger.info(f"  sample {s.sample_id}: {s.rows} rows, {len(s.boxes)} products")
