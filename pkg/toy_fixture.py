"""
Procedural toy dataset for desk-scale experiments.

Six product classes, each a saturated color patch with its own texture and a
dark package outline, plus empty stripe shelves that serve as background
patches and as synthetic-shelf backgrounds. Together with a tiny backbone
(stride 8, final kernel 4x4, 32x32 training size) the whole pipeline runs on
a laptop CPU.
"""

import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

import config
from data_model import ClassCatalog
from ingestion import InstanceImage, save_image, write_manifest
from synth_planogram import stripes_background

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

TOY_COLORS = {
    'red': (220, 40, 40),
    'green': (40, 190, 40),
    'blue': (40, 40, 220),
    'yellow': (230, 215, 30),
    'cyan': (30, 205, 215),
    'magenta': (210, 40, 210),
}
TOY_TEXTURES = ('plain', 'hstripes', 'vstripes', 'checker', 'dots', 'diagonal')

TOY_STAGES = [8, 'M', 16, 'M', 16, 'M']
TOY_FINAL_KERNEL = (4, 4)


def toy_catalog(include_background: bool = True) -> ClassCatalog:
    return ClassCatalog(names=tuple(TOY_COLORS), include_background=include_background)


def _texture(kind: str, h: int, w: int, period: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == 'hstripes':
        return (yy // period) % 2 == 0
    if kind == 'vstripes':
        return (xx // period) % 2 == 0
    if kind == 'checker':
        return ((yy // period) + (xx // period)) % 2 == 0
    if kind == 'dots':
        return ((yy % (2 * period)) < period // 2 + 1) & ((xx % (2 * period)) < period // 2 + 1)
    if kind == 'diagonal':
        return ((yy + xx) // period) % 2 == 0
    return np.zeros((h, w), dtype=bool)


def make_instance(label: int, rng: np.random.Generator, hw: Tuple[int, int] = (32, 32)) -> np.ndarray:
    """One textured product crop of class `label` (1-based, catalog order)."""
    h, w = hw
    name = list(TOY_COLORS)[label - 1]
    color = np.array(TOY_COLORS[name], dtype=np.float64) * rng.uniform(0.85, 1.1)
    pixels = np.empty((h, w, 3), dtype=np.float64)
    pixels[:] = color
    pattern = _texture(TOY_TEXTURES[label - 1], h, w, period=int(rng.integers(3, 6)))
    pixels[pattern] *= 0.75
    pixels += rng.normal(0.0, 6.0, size=pixels.shape)
    pixels[[0, -1], :] = 25
    pixels[:, [0, -1]] = 25
    return np.clip(pixels, 0, 255).astype(np.uint8)


def make_toy_instances(per_class: int,
                       seed: int = config.DEFAULT_SEED,
                       hw: Tuple[int, int] = (32, 32)) -> List[InstanceImage]:
    rng = np.random.default_rng(seed)
    instances = []
    for label in range(1, len(TOY_COLORS) + 1):
        for i in range(per_class):
            instances.append(InstanceImage(pixels=make_instance(label, rng, hw), class_id=label,
                                           source_id=f"toy-{label}-{i:04d}"))
    return instances


def make_empty_shelves(count: int,
                       shelf_hw: Tuple[int, int] = (240, 400),
                       seed: int = config.DEFAULT_SEED) -> List[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [stripes_background(shelf_hw, int(rng.integers(2, 5)), rng) for _ in range(count)]


def write_toy_dataset(root: Union[str, Path],
                      instances_per_class: int = 200,
                      background_shelves: int = 10,
                      shelf_hw: Tuple[int, int] = (240, 400),
                      instance_hw: Tuple[int, int] = (32, 32),
                      seed: int = config.DEFAULT_SEED) -> Path:
    """
    Write the toy dataset as a normalized manifest.

    Layout: instances/<class>/NNNN.png and shelves/empty_NN.png, the shelves
    tagged 'background' with no annotations.
    """
    root = Path(root)
    logger.info("=" * 80)
    logger.info(f"TOY DATASET: {len(TOY_COLORS)} classes x {instances_per_class} instances -> {root}")
    logger.info("=" * 80)

    catalog = toy_catalog()
    instance_rows = []
    for inst in make_toy_instances(instances_per_class, seed, instance_hw):
        name = catalog.name_of(inst.class_id)
        rel = f"instances/{name}/{inst.source_id.rsplit('-', 1)[1]}.png"
        save_image(inst.pixels, root / rel)
        instance_rows.append((rel, name))

    shelf_rows = []
    for i, shelf in enumerate(make_empty_shelves(background_shelves, shelf_hw, seed + 1)):
        rel = f"shelves/empty_{i:02d}.png"
        save_image(shelf, root / rel)
        shelf_rows.append((rel, 'background'))

    write_manifest(root, catalog, instances=instance_rows, shelves=shelf_rows)
    logger.info(f"  ✓ {len(instance_rows)} instances, {len(shelf_rows)} empty shelves")
    return root


if __name__ == "__main__":
    write_toy_dataset(config.DATA_DIR / 'toy')
