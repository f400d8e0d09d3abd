"""Shared fixtures: the repository root on sys.path plus small toy assets."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from fcn_classifier import FcnConfig, TrainingHyperparams, build_fcn, train_fcn  # noqa: E402
from ingestion import extract_background_patches, split_train_val  # noqa: E402
from synth_planogram import SynthConfig, generate_dataset  # noqa: E402
from toy_fixture import (  # noqa: E402
    TOY_FINAL_KERNEL,
    TOY_STAGES,
    make_empty_shelves,
    make_toy_instances,
    toy_catalog,
)


@pytest.fixture(scope="session")
def catalog():
    return toy_catalog(include_background=True)


@pytest.fixture(scope="session")
def toy_instances():
    return make_toy_instances(per_class=40, seed=3)


@pytest.fixture(scope="session")
def toy_shelves():
    return make_empty_shelves(4, shelf_hw=(240, 400), seed=4)


@pytest.fixture(scope="session")
def trained_fcn(catalog, toy_instances, toy_shelves):
    """Tiny S=8 FCN trained on the toy classes plus background patches."""
    patches = extract_background_patches(
        [(f"empty_{i}", s) for i, s in enumerate(toy_shelves)], [],
        count=60, patch_hw=((24, 64), (24, 64)), max_overlap_iou=0.1, seed=5,
    )
    train, val = split_train_val(list(toy_instances) + patches, 0.2, seed=6)
    cfg = FcnConfig.from_catalog(catalog, stages=TOY_STAGES, final_kernel=TOY_FINAL_KERNEL, seed=7)
    hp = TrainingHyperparams(learning_rate=0.02, patience=8, batch_size=32, max_epochs=25, seed=7)
    model, _ = train_fcn(build_fcn(cfg), train, val, hp)
    return model


@pytest.fixture(scope="session")
def small_synth(toy_instances, toy_shelves):
    cfg = SynthConfig(product_pool=toy_instances, background_pool=toy_shelves,
                      canvas_large_hw=(320, 480), canvas_small_hw=(240, 400),
                      large_canvas_min_rows=3, rows_range=(2, 3), columns_range=(3, 6),
                      scale_range=(0.8, 1.6), jitter_px=24, samples=6, seed=11)
    return generate_dataset(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
