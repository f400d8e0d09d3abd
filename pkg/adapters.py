"""
Adapters that normalize external shelf datasets into the manifest format
read by ingestion.load_manifest().

- class_folders_to_manifest: one folder per class of product / brand crops
  -> classes.json + instances.csv
- convert_annotation_list: an annotation table in (x, y, w, h) or
  (x_min, y_min, x_max, y_max) form -> annotations.csv
- write_shelf_splits: tag a small share of shelves for background
  extraction (excluded from test) -> shelves.csv
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

import config
from data_model import ClassCatalog
from errors import InvalidInputError, ManifestLoadError
from ingestion import (
    ANNOTATION_COLUMNS,
    ANNOTATIONS_FILE,
    CLASSES_FILE,
    INSTANCE_COLUMNS,
    INSTANCES_FILE,
    SHELF_COLUMNS,
    SHELVES_FILE,
)

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {'.png', '.jpg', '.jpeg', '.bmp'}

# Share of shelves held out for background patches
BACKGROUND_SHELF_FRACTION = 0.0649


def class_folders_to_manifest(manifest_root: Union[str, Path],
                              instances_subdir: str = 'instances',
                              include_background: Optional[bool] = None) -> ClassCatalog:
    """
    Build classes.json and instances.csv from a folder-per-class tree.

    A folder named 'background' holds negative crops; its presence turns
    include_background on unless stated otherwise.

    Args:
        manifest_root: Manifest directory
        instances_subdir: Folder (relative to the root) holding one folder per class

    Returns:
        ClassCatalog written to classes.json
    """
    root = Path(manifest_root)
    tree = root / instances_subdir
    if not tree.is_dir():
        raise ManifestLoadError("Instance folder tree not found", tree)

    class_dirs = sorted(p for p in tree.iterdir() if p.is_dir())
    names = [p.name for p in class_dirs if p.name != config.BACKGROUND_NAME]
    has_background_dir = any(p.name == config.BACKGROUND_NAME for p in class_dirs)
    if include_background is None:
        include_background = has_background_dir
    catalog = ClassCatalog(names=tuple(names), include_background=include_background)

    rows = []
    for class_dir in class_dirs:
        if class_dir.name == config.BACKGROUND_NAME and not include_background:
            continue
        for image_path in sorted(class_dir.rglob('*')):
            if image_path.suffix.lower() in IMAGE_SUFFIXES:
                rows.append((image_path.relative_to(root).as_posix(), class_dir.name))

    with open(root / CLASSES_FILE, 'w', encoding='utf-8') as f:
        json.dump({'classes': list(catalog.names), 'include_background': catalog.include_background}, f, indent=2)
    pd.DataFrame(rows, columns=INSTANCE_COLUMNS).to_csv(root / INSTANCES_FILE, index=False)
    logger.info(f"  ✓ {len(rows)} instances in {len(names)} classes written to {root / INSTANCES_FILE}")
    return catalog


def convert_annotation_list(source: Union[str, Path],
                            manifest_root: Union[str, Path],
                            column_map: Optional[Dict[str, str]] = None,
                            box_format: str = 'xyxy',
                            class_names: Optional[Dict[str, str]] = None) -> pd.DataFrame:
    """
    Normalize an annotation table into annotations.csv.

    Args:
        source: CSV with one row per box
        manifest_root: Manifest directory (image paths are kept as given)
        column_map: Source column -> normalized column (image_path, class,
            x_min, y_min, and x_max/y_max or width/height)
        box_format: 'xyxy' or 'xywh'
        class_names: Optional source label -> catalog class name mapping

    Returns:
        The normalized annotation frame
    """
    if box_format not in ('xyxy', 'xywh'):
        raise InvalidInputError(f"box_format must be 'xyxy' or 'xywh', got {box_format!r}")
    df = pd.read_csv(source, dtype={'class': str})
    if column_map:
        df = df.rename(columns=column_map)
    if box_format == 'xywh':
        missing = [c for c in ('width', 'height') if c not in df.columns]
        if missing:
            raise ManifestLoadError(f"Missing columns {missing}", source)
        df['x_max'] = df['x_min'] + df['width']
        df['y_max'] = df['y_min'] + df['height']
    missing = [c for c in ANNOTATION_COLUMNS if c not in df.columns]
    if missing:
        raise ManifestLoadError(f"Missing columns {missing}", source)
    df['class'] = df['class'].astype(str)
    if class_names:
        df['class'] = df['class'].map(lambda c: class_names.get(c, c))

    out = df[ANNOTATION_COLUMNS]
    out.to_csv(Path(manifest_root) / ANNOTATIONS_FILE, index=False)
    logger.info(f"  ✓ {len(out)} annotations on {out['image_path'].nunique()} shelves normalized")
    return out


def write_shelf_splits(manifest_root: Union[str, Path],
                       background_fraction: float = BACKGROUND_SHELF_FRACTION,
                       seed: int = config.DEFAULT_SEED,
                       shelf_paths: Optional[List[str]] = None) -> pd.DataFrame:
    """
    Tag a random share of shelves as 'background' and the rest as 'test'.

    Args:
        manifest_root: Manifest directory
        background_fraction: Share of shelves reserved for background patches
        seed: Random seed
        shelf_paths: Shelf image paths (default: those in annotations.csv)

    Returns:
        The shelves.csv frame
    """
    if not 0.0 < background_fraction < 1.0:
        raise InvalidInputError(f"background_fraction must be in (0, 1), got {background_fraction}")
    root = Path(manifest_root)
    if shelf_paths is None:
        annotations = pd.read_csv(root / ANNOTATIONS_FILE, dtype=str)
        shelf_paths = sorted(annotations['image_path'].unique())
    if len(shelf_paths) < 2:
        raise InvalidInputError("Need at least two shelves to reserve background shelves")

    n_background = max(1, int(np.floor(len(shelf_paths) * background_fraction + 0.5)))
    n_background = min(n_background, len(shelf_paths) - 1)
    _, background = train_test_split(list(shelf_paths), test_size=n_background, random_state=seed)
    background = set(background)

    frame = pd.DataFrame([(p, 'background' if p in background else 'test') for p in shelf_paths],
                         columns=SHELF_COLUMNS)
    frame.to_csv(root / SHELVES_FILE, index=False)
    logger.info(f"  ✓ {len(background)} of {len(shelf_paths)} shelves reserved for background patches")
    return frame


if __name__ == "__main__":
    import sys

    if len(sys.argv) < 2:
        logger.info("Usage: python adapters.py <manifest_root>")
    else:
        class_folders_to_manifest(sys.argv[1])
