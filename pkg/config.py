"""
Configuration module for the Shelf WSOL pipeline.

This module handles:
- Project paths and run directories
- Default parameters for every pipeline section (FCN, pyramid, synthetic
  shelves, refine-net, detection, baseline, evaluation)
- Checkpoint format constants
- Logging constants
"""

import os
from pathlib import Path

# ============================================================================
# PROJECT PATHS
# ============================================================================

# Base directory
BASE_DIR = Path(__file__).resolve().parent

# Data directories
DATA_DIR = BASE_DIR / 'data'
EXTERNAL_DATA_DIR = DATA_DIR / 'external'   # normalized Cigarette / Grocery manifests

# Shipped config profiles (toy, cigarette, grocery)
PROFILES_DIR = BASE_DIR / 'profiles'

# Default output directory for CLI runs
RUNS_DIR = BASE_DIR / 'runs'

# Environment variable holding the default config file path
CONFIG_ENV_VAR = 'SHELF_WSOL_CONFIG'

# ============================================================================
# GLOBAL
# ============================================================================

DEFAULT_SEED = 42

BACKGROUND_NAME = 'background'

# ============================================================================
# FCN CLASSIFIER
# ============================================================================

# VGG11 convolutional stack: ints are 3x3 conv widths, 'M' is a 2x2 max-pool.
VGG11_STAGES = [64, 'M', 128, 'M', 256, 256, 'M', 512, 512, 'M', 512, 512, 'M']

FCN_PARAMS = {
    'stages': VGG11_STAGES,
    'final_kernel': (2, 4),          # Cigarette setting; Grocery uses (7, 5)
    'use_pretrained_backbone': False,
    'in_channels': 3,
}

FCN_TRAINING_PARAMS = {
    'learning_rate': 1e-3,
    'momentum': 0.9,
    'weight_decay': 5e-4,
    'patience': 30,
    'batch_size': 32,
    'max_epochs': 200,
    'val_fraction': 0.2,
    'augment_flip': False,
    'augment_scale': False,
    'augment_rotation': False,
    'resize_policy': 'letterbox',     # or 'stretch'
    # negative-class crops cut from shelves tagged 'background'
    'background_patches': 500,
    'background_patch_hw': ((48, 256), (48, 256)),
    'background_max_overlap_iou': 0.1,
}

# ImageNet statistics, used for every input so pretrained and scratch
# backbones see the same normalization.
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)

# ============================================================================
# PYRAMID INFERENCE
# ============================================================================

PYRAMID_PARAMS = {
    'factor': 1.5,
    'max_levels': 10,
    'interpolation': 'bilinear',
}

# ============================================================================
# SYNTHETIC PLANOGRAM
# ============================================================================

SYNTH_PARAMS = {
    'canvas_large_hw': (2000, 3000),
    'canvas_small_hw': (1200, 2000),
    'large_canvas_min_rows': 4,
    'rows_range': (2, 6),
    'columns_range': (4, 12),
    'scale_range': (0.5, 1.1),
    'jitter_px': 40,
    'baseline_offset_px': 0,
    'background_mode': 'pool',       # 'pool' | 'stripes' | 'black'
    'samples': 200,
}

# ============================================================================
# REFINE-NET (ConvAE)
# ============================================================================

REFINE_PARAMS = {
    'filters': (16, 24, 32),
    'learning_rate': 1e-3,
    'momentum': 0.9,
    'weight_decay': 5e-4,
    'patience': 5,
    'batch_size': 4,
    'max_epochs': 100,
    'val_fraction': 0.2,
    'working_resolution': None,      # None -> 1/4 of the canvas, rounded to /8
    'use_pyramid': True,
    'class_weighting': 'none',       # or 'inverse_sqrt'
}

# ============================================================================
# DETECTION / POSTPROCESS
# ============================================================================

DETECT_PARAMS = {
    'threshold': 0.5,
    'class_thresholds': {},
    'connectivity': 8,
    'min_area_fraction': 1e-4,       # 0.01% of the image area
}

BASELINE_PARAMS = {
    'scales': (0.8, 1.0, 1.25),
    'aspect_ratios': (0.5, 0.75, 1.0, 1.33, 2.0),
    'stride_fraction': 0.25,
    'score_threshold': 0.5,
    'nms_iou': 0.3,
}

SWEEP_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# ============================================================================
# TOY DATASET
# ============================================================================

TOY_PARAMS = {
    'instances_per_class': 200,
    'instance_hw': (32, 32),
    'background_shelves': 10,
    'shelf_hw': (240, 400),
}

# ============================================================================
# EVALUATION
# ============================================================================

EVAL_PARAMS = {
    'iou_threshold': 0.1,
}

# ============================================================================
# CHECKPOINTS
# ============================================================================

CHECKPOINT_FORMAT = 'shelf-wsol-checkpoint'
CHECKPOINT_VERSION = 1

# ============================================================================
# LOGGING
# ============================================================================

LOG_LEVEL = os.environ.get('SHELF_WSOL_LOG_LEVEL', 'INFO')
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
