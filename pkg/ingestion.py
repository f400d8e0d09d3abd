"""
Dataset ingestion for the Shelf WSOL pipeline.

This module provides:
- Normalized manifest loading and writing (classes.json, instances.csv,
  annotations.csv, optional shelves.csv)
- Image loading helpers
- Background patch extraction by rejection sampling
- Stratified train/validation splitting

Manifest layout (all paths relative to the manifest directory):

    classes.json      {"classes": [...], "include_background": true}
    instances.csv     path,class
    annotations.csv   image_path,class,x_min,y_min,x_max,y_max
    shelves.csv       image_path,split        (optional; split in test/background/train)
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image
from sklearn.model_selection import train_test_split

import config
from data_model import Annotation, BoundingBox, ClassCatalog, clip_box, iou
from errors import (
    DegenerateBoxError,
    InvalidInputError,
    ManifestLoadError,
    SamplingExhaustedError,
    StratificationError,
)

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

CLASSES_FILE = 'classes.json'
INSTANCES_FILE = 'instances.csv'
ANNOTATIONS_FILE = 'annotations.csv'
SHELVES_FILE = 'shelves.csv'

INSTANCE_COLUMNS = ['path', 'class']
ANNOTATION_COLUMNS = ['image_path', 'class', 'x_min', 'y_min', 'x_max', 'y_max']
SHELF_COLUMNS = ['image_path', 'split']

SHELF_SPLITS = ('test', 'background', 'train')
MIN_INSTANCE_SIDE = 8


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True, eq=False)
class InstanceImage:
    """
    A single-object training crop with one label id (0 = background).

    `source_box` is set for crops cut out of a larger image (background
    patches) and records where the crop came from.
    """

    pixels: np.ndarray
    class_id: int
    source_id: str
    source_box: Optional[BoundingBox] = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
            raise InvalidInputError(
                f"Instance {self.source_id}: expected (H, W, 3) uint8 pixels, got {pixels.shape} {pixels.dtype}"
            )
        if pixels.shape[0] < MIN_INSTANCE_SIDE or pixels.shape[1] < MIN_INSTANCE_SIDE:
            raise InvalidInputError(f"Instance {self.source_id} is smaller than {MIN_INSTANCE_SIDE}x{MIN_INSTANCE_SIDE}")
        if self.class_id < 0:
            raise InvalidInputError(f"Instance {self.source_id}: negative class id")
        object.__setattr__(self, 'pixels', pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class InstanceRecord:
    """One row of instances.csv, resolved and validated."""

    path: Path
    class_name: str
    class_id: int


@dataclass(frozen=True)
class ShelfRecord:
    """One shelf image with its (clipped) annotations and split tag."""

    path: Path
    image_id: str
    width: int
    height: int
    split: str
    annotations: Tuple[Annotation, ...]


@dataclass(frozen=True)
class DatasetManifest:
    """Fully validated normalized dataset."""

    root: Path
    catalog: ClassCatalog
    instances: Tuple[InstanceRecord, ...]
    shelves: Tuple[ShelfRecord, ...]

    @property
    def annotations(self) -> List[Annotation]:
        return [a for shelf in self.shelves for a in shelf.annotations]

    def counts(self) -> Tuple[int, int, int]:
        """(instances, shelves, annotations)."""
        return (len(self.instances), len(self.shelves), len(self.annotations))

    def shelves_with_split(self, split: str) -> List[ShelfRecord]:
        return [s for s in self.shelves if s.split == split]


# ============================================================================
# IMAGE IO
# ============================================================================

def load_image(path: Union[str, Path]) -> np.ndarray:
    """
    Read an image file as an (H, W, 3) uint8 RGB array.

    Args:
        path: PNG / JPEG file

    Returns:
        np.ndarray: RGB pixels
    """
    with Image.open(path) as img:
        return np.asarray(img.convert('RGB'), dtype=np.uint8).copy()


def save_image(pixels: np.ndarray, path: Union[str, Path]):
    """Write RGB (H, W, 3) or single-channel (H, W) uint8 pixels as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def _image_size(path: Path, record: str) -> Tuple[int, int]:
    if not path.exists():
        raise ManifestLoadError(f"Image file not found: {path}", record)
    try:
        with Image.open(path) as img:
            return img.size
    except Exception as e:
        raise ManifestLoadError(f"Unreadable image {path}: {e}", record) from e


# ============================================================================
# MANIFEST LOADING
# ============================================================================

def _read_csv(path: Path, columns: List[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except Exception as e:
        raise ManifestLoadError(f"Malformed CSV: {e}", path) from e
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ManifestLoadError(f"Missing columns {missing}", path)
    return df


def _read_catalog(root: Path) -> ClassCatalog:
    path = root / CLASSES_FILE
    if not path.exists():
        raise ManifestLoadError("Class header file not found", path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
        return ClassCatalog(names=tuple(data['classes']),
                            include_background=bool(data.get('include_background', True)))
    except (KeyError, TypeError, json.JSONDecodeError, InvalidInputError) as e:
        raise ManifestLoadError(f"Invalid class header: {e}", path) from e


def _resolve_class(catalog: ClassCatalog, name: str, record: str, allow_background: bool) -> int:
    try:
        label = catalog.label_of(name)
    except InvalidInputError:
        raise ManifestLoadError(f"Unknown class name {name!r}", record) from None
    if label == 0 and not (allow_background and catalog.include_background):
        raise ManifestLoadError("Background class not allowed here", record)
    return label


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """
    Load and validate a normalized dataset manifest.

    Every referenced file must exist, every class name must be in the catalog,
    and annotations are clipped to their image bounds.

    Args:
        path: Manifest directory, or the classes.json file inside it

    Returns:
        DatasetManifest: Validated manifest

    Raises:
        ManifestLoadError: Naming the offending record
    """
    root = Path(path)
    if root.is_file():
        root = root.parent
    if not root.is_dir():
        raise ManifestLoadError("Manifest directory not found", root)

    logger.info(f"Loading manifest from: {root}")
    catalog = _read_catalog(root)

    # Instances
    instances: List[InstanceRecord] = []
    instances_path = root / INSTANCES_FILE
    if instances_path.exists():
        df = _read_csv(instances_path, INSTANCE_COLUMNS)
        for i, row in df.iterrows():
            record = f"{INSTANCES_FILE}:{i + 2}"
            if not row['path'] or not row['class']:
                raise ManifestLoadError("Empty path or class", record)
            label = _resolve_class(catalog, row['class'], record, allow_background=True)
            image_path = root / row['path']
            w, h = _image_size(image_path, record)
            if w < MIN_INSTANCE_SIDE or h < MIN_INSTANCE_SIDE:
                raise ManifestLoadError(f"Instance smaller than {MIN_INSTANCE_SIDE}px: {w}x{h}", record)
            instances.append(InstanceRecord(path=image_path, class_name=row['class'], class_id=label))

    # Shelf split tags
    split_of: Dict[str, str] = {}
    shelves_path = root / SHELVES_FILE
    if shelves_path.exists():
        df = _read_csv(shelves_path, SHELF_COLUMNS)
        for i, row in df.iterrows():
            record = f"{SHELVES_FILE}:{i + 2}"
            split = row['split'] or 'test'
            if split not in SHELF_SPLITS:
                raise ManifestLoadError(f"Unknown split tag {split!r}", record)
            split_of[row['image_path']] = split

    # Annotations grouped by shelf image
    grouped: Dict[str, List[Tuple[str, int, BoundingBox]]] = {key: [] for key in split_of}
    annotations_path = root / ANNOTATIONS_FILE
    if annotations_path.exists():
        df = _read_csv(annotations_path, ANNOTATION_COLUMNS)
        for i, row in df.iterrows():
            record = f"{ANNOTATIONS_FILE}:{i + 2}"
            label = _resolve_class(catalog, row['class'], record, allow_background=False)
            try:
                coords = [float(row[c]) for c in ANNOTATION_COLUMNS[2:]]
                box = BoundingBox(*coords)
            except (ValueError, InvalidInputError) as e:
                raise ManifestLoadError(f"Malformed box: {e}", record) from e
            grouped.setdefault(row['image_path'], []).append((record, label, box))

    shelves: List[ShelfRecord] = []
    for image_id in sorted(grouped):
        image_path = root / image_id
        w, h = _image_size(image_path, f"shelf {image_id}")
        annotations = []
        for record, label, box in grouped[image_id]:
            try:
                box = clip_box(box, w, h)
            except DegenerateBoxError as e:
                raise ManifestLoadError(f"Annotation outside image: {e}", record) from e
            annotations.append(Annotation(image_id=image_id, class_id=label, box=box))
        shelves.append(ShelfRecord(path=image_path, image_id=image_id, width=w, height=h,
                                   split=split_of.get(image_id, 'test'),
                                   annotations=tuple(annotations)))

    manifest = DatasetManifest(root=root, catalog=catalog,
                               instances=tuple(instances), shelves=tuple(shelves))
    n_inst, n_shelf, n_ann = manifest.counts()
    logger.info(f"  ✓ {len(catalog.names)} classes, {n_inst} instances, {n_shelf} shelves, {n_ann} annotations")
    return manifest


def load_instances(manifest: DatasetManifest) -> List[InstanceImage]:
    """Read every instance image of a manifest."""
    images = []
    for rec in manifest.instances:
        images.append(InstanceImage(pixels=load_image(rec.path), class_id=rec.class_id,
                                    source_id=str(rec.path.relative_to(manifest.root))))
    logger.info(f"  ✓ Loaded {len(images)} instance images")
    return images


def load_shelves(shelves: Sequence[ShelfRecord]) -> List[Tuple[str, np.ndarray]]:
    """Read shelf images as (image_id, pixels) pairs."""
    return [(s.image_id, load_image(s.path)) for s in shelves]


def write_manifest(root: Union[str, Path],
                   catalog: ClassCatalog,
                   instances: Sequence[Tuple[str, str]] = (),
                   annotations: Sequence[Tuple[str, str, float, float, float, float]] = (),
                   shelves: Sequence[Tuple[str, str]] = ()) -> Path:
    """
    Write a normalized manifest directory.

    Args:
        root: Output directory (image files are expected relative to it)
        catalog: Class catalog
        instances: (path, class name) rows
        annotations: (image_path, class name, x_min, y_min, x_max, y_max) rows
        shelves: (image_path, split) rows

    Returns:
        Path: The manifest directory
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / CLASSES_FILE, 'w', encoding='utf-8') as f:
        json.dump({'classes': list(catalog.names), 'include_background': catalog.include_background}, f, indent=2)
    pd.DataFrame(list(instances), columns=INSTANCE_COLUMNS).to_csv(root / INSTANCES_FILE, index=False)
    pd.DataFrame(list(annotations), columns=ANNOTATION_COLUMNS).to_csv(root / ANNOTATIONS_FILE, index=False)
    if shelves:
        pd.DataFrame(list(shelves), columns=SHELF_COLUMNS).to_csv(root / SHELVES_FILE, index=False)
    logger.info(f"  ✓ Manifest written to {root}")
    return root


# ============================================================================
# BACKGROUND PATCHES
# ============================================================================

def _size_range(patch_hw) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """Accept (h, w) or ((h_min, h_max), (w_min, w_max))."""
    h, w = patch_hw
    h_range = tuple(h) if isinstance(h, (tuple, list)) else (h, h)
    w_range = tuple(w) if isinstance(w, (tuple, list)) else (w, w)
    if min(h_range + w_range) < MIN_INSTANCE_SIDE or h_range[0] > h_range[1] or w_range[0] > w_range[1]:
        raise InvalidInputError(f"Invalid background patch size range: {patch_hw}")
    return (int(h_range[0]), int(h_range[1])), (int(w_range[0]), int(w_range[1]))


def extract_background_patches(shelves: Sequence[Tuple[str, np.ndarray]],
                               annotations: Sequence[Annotation],
                               count: int,
                               patch_hw,
                               max_overlap_iou: float,
                               seed: int,
                               max_attempts: Optional[int] = None) -> List[InstanceImage]:
    """
    Cut background (negative class) patches out of shelf images.

    Uniform rejection sampling: a shelf, a patch size within the configured
    range and a position are drawn; the patch is kept only if its IoU with
    every annotated box on that shelf is at most `max_overlap_iou`.

    Args:
        shelves: (image_id, pixels) pairs
        annotations: Annotations of those shelves (matched by image_id)
        count: Number of patches to return
        patch_hw: (h, w) or ((h_min, h_max), (w_min, w_max))
        max_overlap_iou: Overlap ceiling in [0, 1)
        seed: Random seed
        max_attempts: Sampling budget (default 200 per requested patch)

    Returns:
        List of InstanceImage labeled background (class_id 0)

    Raises:
        SamplingExhaustedError: Budget spent before `count` patches were found
    """
    if not shelves:
        raise InvalidInputError("extract_background_patches needs at least one shelf")
    if not (0.0 <= max_overlap_iou < 1.0):
        raise InvalidInputError(f"max_overlap_iou must be in [0, 1), got {max_overlap_iou}")
    if count < 0:
        raise InvalidInputError(f"count must be non-negative, got {count}")
    (h_lo, h_hi), (w_lo, w_hi) = _size_range(patch_hw)
    if max_attempts is None:
        max_attempts = max(1000, 200 * count)

    by_image: Dict[str, List[BoundingBox]] = {}
    for a in annotations:
        by_image.setdefault(a.image_id, []).append(a.box)

    rng = np.random.default_rng(seed)
    patches: List[InstanceImage] = []
    attempts = 0
    while len(patches) < count:
        if attempts >= max_attempts:
            raise SamplingExhaustedError(count, len(patches), attempts)
        attempts += 1

        image_id, pixels = shelves[int(rng.integers(len(shelves)))]
        ph = int(rng.integers(h_lo, h_hi + 1))
        pw = int(rng.integers(w_lo, w_hi + 1))
        H, W = pixels.shape[:2]
        if ph > H or pw > W:
            continue
        y0 = int(rng.integers(0, H - ph + 1))
        x0 = int(rng.integers(0, W - pw + 1))
        box = BoundingBox(x0, y0, x0 + pw, y0 + ph)
        if any(iou(box, gt) > max_overlap_iou for gt in by_image.get(image_id, ())):
            continue
        patches.append(InstanceImage(pixels=pixels[y0:y0 + ph, x0:x0 + pw].copy(), class_id=0,
                                     source_id=f"{image_id}@{x0},{y0},{x0 + pw},{y0 + ph}",
                                     source_box=box))

    logger.info(f"  ✓ Extracted {len(patches)} background patches in {attempts} attempts")
    return patches


# ============================================================================
# TRAIN / VALIDATION SPLIT
# ============================================================================

def split_train_val(instances: Sequence[InstanceImage],
                    val_fraction: float,
                    seed: int) -> Tuple[List[InstanceImage], List[InstanceImage]]:
    """
    Stratified, deterministic train/validation split.

    Each class contributes round(n * val_fraction) items to validation,
    clamped to [1, n - 1], so every class appears on both sides.

    Args:
        instances: Instances to split
        val_fraction: Validation share in (0, 1)
        seed: Random seed

    Returns:
        (train, val) lists, each in input order

    Raises:
        InvalidInputError: val_fraction outside (0, 1) or empty input
        StratificationError: A class has a single instance
    """
    if not (0.0 < val_fraction < 1.0):
        raise InvalidInputError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if not instances:
        raise InvalidInputError("split_train_val needs at least one instance")

    by_class: Dict[int, List[int]] = {}
    for idx, inst in enumerate(instances):
        by_class.setdefault(inst.class_id, []).append(idx)

    val_idx: List[int] = []
    for class_id in sorted(by_class):
        members = by_class[class_id]
        if len(members) < 2:
            raise StratificationError(f"Class {class_id} has a single instance; cannot stratify")
        n_val = int(math.floor(len(members) * val_fraction + 0.5))
        n_val = min(max(n_val, 1), len(members) - 1)
        _, picked = train_test_split(members, test_size=n_val, random_state=seed, shuffle=True)
        val_idx.extend(picked)

    val_set = set(val_idx)
    train = [inst for i, inst in enumerate(instances) if i not in val_set]
    val = [inst for i, inst in enumerate(instances) if i in val_set]
    logger.info(f"  ✓ Split {len(instances)} instances into {len(train)} train / {len(val)} val")
    return train, val
