"""
Command-line entry point for the Shelf WSOL pipeline.

Subcommands:
    toy-data         write the procedural toy dataset
    train-fcn        train the FCN instance classifier
    synth            generate synthetic planogram shelves
    train-refine     train the ConvAE refine-net on FCN outputs of synthetic shelves
    detect           detect products on test shelves (--refine, --no-pyramid)
    baseline         sliding-window + NMS baseline
    eval             VOC07 11-point mAP of a detections file
    visualize        draw ground truth (blue) and predictions (red)
    sweep-threshold  mAP as a function of the binarization threshold
    diagnose-masks   raw vs. refined mask pixel accuracy and false positives on
                     synthetic shelves with label masks

Every run writes into <output_dir>/<subcommand> (or --run-name), together
with resolved_config.json and run_metadata.json. Runs refuse to write into a
non-empty run directory unless --force is given.

Usage:
    python cli.py --config profiles/toy.toml toy-data
    python cli.py --config profiles/toy.toml train-fcn
    python cli.py --config profiles/toy.toml detect --refine
"""

import argparse
import json
import logging
import platform
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import plotly.express as px
import torch

import config
from data_model import Detection
from detection_engine import ShelfDetector
from errors import ConfigurationError, InvalidInputError, ShelfLocError
from evaluation import compare_masks, mean_ap, write_mask_diagnostics, write_report
from fcn_classifier import build_fcn, load_fcn, save_fcn, train_fcn
from ingestion import (
    DatasetManifest,
    ShelfRecord,
    extract_background_patches,
    load_image,
    load_instances,
    load_manifest,
    load_shelves,
    split_train_val,
)
from overlay import render_overlay
from pipeline_config import PipelineConfig, load_pipeline_config
from postprocess import detections_from_mask, read_detections, write_detections
from refine_net import build_convae, default_working_resolution, downsample_labels, save_convae, train_refine
from synth_planogram import SynthConfig, generate_dataset, load_dataset, save_dataset
from toy_fixture import write_toy_dataset

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

SUBCOMMANDS = ('toy-data', 'train-fcn', 'synth', 'train-refine', 'detect',
               'baseline', 'eval', 'visualize', 'sweep-threshold', 'diagnose-masks')

FCN_CHECKPOINT = 'fcn.pt'
CONVAE_CHECKPOINT = 'convae.pt'
DETECTIONS_FILE = 'detections.jsonl'
HISTORY_FILE = 'history.csv'


def set_seed(seed: int):
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# ============================================================================
# INPUT RESOLUTION
# ============================================================================

def _manifest(cfg: PipelineConfig) -> DatasetManifest:
    return load_manifest(cfg.path('manifest', cfg.run_dir('toy-data')))


def _test_shelves(cfg: PipelineConfig) -> Tuple[DatasetManifest, List[ShelfRecord]]:
    path = cfg.path('test_manifest') or cfg.path('manifest', cfg.run_dir('toy-data'))
    manifest = load_manifest(path)
    shelves = manifest.shelves_with_split('test')
    if not shelves:
        raise InvalidInputError(f"No shelves tagged 'test' in {path}")
    return manifest, shelves


def _fcn_path(cfg: PipelineConfig) -> Path:
    return cfg.path('fcn_checkpoint', cfg.run_dir('train-fcn') / FCN_CHECKPOINT)


def _convae_path(cfg: PipelineConfig) -> Path:
    return cfg.path('convae_checkpoint', cfg.run_dir('train-refine') / CONVAE_CHECKPOINT)


def _detections_path(cfg: PipelineConfig, flags: Dict) -> Path:
    if flags.get('detections'):
        return Path(flags['detections'])
    return cfg.path('detections', cfg.run_dir('detect') / DETECTIONS_FILE)


def _detector(cfg: PipelineConfig, flags: Dict, refine: bool) -> ShelfDetector:
    return ShelfDetector(_fcn_path(cfg),
                         _convae_path(cfg) if refine else None,
                         pyramid_params=cfg.section('pyramid'),
                         use_pyramid=not flags.get('no_pyramid', False))


def _check_catalog(manifest: DatasetManifest, detector: ShelfDetector):
    if manifest.catalog.names != detector.catalog.names:
        raise ConfigurationError(
            f"Test manifest classes {manifest.catalog.names} differ from the model's {detector.catalog.names}"
        )


def _background_pool(cfg: PipelineConfig, manifest: DatasetManifest) -> List[np.ndarray]:
    """Empty-shelf images: paths.backgrounds_dir, else unannotated 'background' shelves."""
    folder = cfg.path('backgrounds_dir')
    if folder is not None:
        if not folder.is_dir():
            raise InvalidInputError(f"Background folder not found: {folder}")
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in ('.png', '.jpg', '.jpeg'))
        return [load_image(p) for p in files]
    empty = [s for s in manifest.shelves_with_split('background') if not s.annotations]
    return [pixels for _, pixels in load_shelves(empty)]


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_toy_data(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    t = cfg.section('toy')
    write_toy_dataset(run_dir,
                      instances_per_class=t['instances_per_class'],
                      background_shelves=t['background_shelves'],
                      shelf_hw=tuple(t['shelf_hw']),
                      instance_hw=tuple(t['instance_hw']),
                      seed=t['seed'])


def cmd_train_fcn(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    manifest = _manifest(cfg)
    catalog = manifest.catalog
    t = cfg.section('training')
    instances = load_instances(manifest)

    if catalog.include_background and t['background_patches'] > 0:
        shelves = manifest.shelves_with_split('background')
        if not shelves:
            raise ConfigurationError("Background patches need shelves tagged 'background' in shelves.csv")
        instances += extract_background_patches(
            load_shelves(shelves),
            [a for s in shelves for a in s.annotations],
            count=t['background_patches'],
            patch_hw=t['background_patch_hw'],
            max_overlap_iou=t['background_max_overlap_iou'],
            seed=t['seed'],
        )

    train, val = split_train_val(instances, t['val_fraction'], t['seed'])
    model = build_fcn(cfg.fcn_config(catalog))
    model, history = train_fcn(model, train, val, cfg.training_hyperparams())
    save_fcn(model, catalog, run_dir / FCN_CHECKPOINT)
    history.save(run_dir / HISTORY_FILE)


def cmd_synth(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    manifest = _manifest(cfg)
    products = [inst for inst in load_instances(manifest) if inst.class_id > 0]
    backgrounds = _background_pool(cfg, manifest)
    synth_cfg = SynthConfig(product_pool=products, background_pool=backgrounds, **cfg.synth_params())
    dataset = generate_dataset(synth_cfg)
    save_dataset(dataset, run_dir, manifest.catalog)


def cmd_train_refine(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    fcn, catalog = load_fcn(_fcn_path(cfg))
    dataset = load_dataset(cfg.path('synth_dir', cfg.run_dir('synth')), catalog)
    if not dataset.samples:
        raise InvalidInputError("Synthetic dataset is empty")

    convae = build_convae(cfg.convae_config(catalog))
    working_resolution = (cfg.working_resolution()
                          or default_working_resolution(dataset.samples[0].shape_hw, convae.config.downscale))
    pyramid = cfg.pyramid_config(fcn.config.input_hw) if cfg.section('refine')['use_pyramid'] else None
    convae, history = train_refine(convae, fcn, dataset.samples, cfg.refine_hyperparams(),
                                   working_resolution, pyramid)
    save_convae(convae, catalog, run_dir / CONVAE_CHECKPOINT, working_resolution)
    history.save(run_dir / HISTORY_FILE)


def cmd_detect(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    detector = _detector(cfg, flags, refine=flags.get('refine', False))
    manifest, shelves = _test_shelves(cfg)
    _check_catalog(manifest, detector)
    detections = detector.detect_shelves(shelves, cfg.detect_params(detector.catalog))
    write_detections(detections, run_dir / DETECTIONS_FILE, detector.catalog)


def cmd_baseline(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    detector = _detector(cfg, {'no_pyramid': True}, refine=False)
    manifest, shelves = _test_shelves(cfg)
    _check_catalog(manifest, detector)
    detections = detector.baseline_shelves(shelves, cfg.sliding_window_params())
    write_detections(detections, run_dir / DETECTIONS_FILE, detector.catalog)


def _evaluate(cfg: PipelineConfig, manifest: DatasetManifest, shelves: Sequence[ShelfRecord],
              detections: Sequence[Detection]):
    ids = {s.image_id for s in shelves}
    detections = [d for d in detections if d.image_id in ids]
    annotations = [a for s in shelves for a in s.annotations]
    return mean_ap(detections, annotations, cfg.eval_config(), labels=manifest.catalog.positive_labels)


def cmd_eval(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    manifest, shelves = _test_shelves(cfg)
    detections = read_detections(_detections_path(cfg, flags), manifest.catalog)
    report = _evaluate(cfg, manifest, shelves, detections)
    write_report(report, run_dir, manifest.catalog, plot=not flags.get('no_plot', False))


def cmd_visualize(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    manifest, shelves = _test_shelves(cfg)
    detections = read_detections(_detections_path(cfg, flags), manifest.catalog)
    by_image: Dict[str, List[Detection]] = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)

    limit = flags.get('limit') or len(shelves)
    for shelf in shelves[:limit]:
        name = Path(shelf.image_id).with_suffix('').as_posix().replace('/', '_')
        render_overlay(load_image(shelf.path), shelf.annotations, by_image.get(shelf.image_id, []),
                       run_dir / 'overlays' / f"{name}.png", manifest.catalog)
    logger.info(f"  ✓ {min(limit, len(shelves))} overlays written to {run_dir / 'overlays'}")


def cmd_sweep_threshold(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    detector = _detector(cfg, flags, refine=flags.get('refine', False))
    manifest, shelves = _test_shelves(cfg)
    _check_catalog(manifest, detector)
    masks = detector.score_shelves(shelves)

    rows = []
    for threshold in cfg.sweep_thresholds():
        params = cfg.detect_params(detector.catalog, threshold=threshold)
        detections = [d for shelf, mask in masks
                      for d in detections_from_mask(mask, params, shelf.image_id, (shelf.height, shelf.width))]
        m = _evaluate(cfg, manifest, shelves, detections).mean_ap
        rows.append({'threshold': threshold, 'mAP': m, 'detections': len(detections)})
        logger.info(f"  threshold {threshold:.2f}: mAP={m:.4f} ({len(detections)} detections)")

    frame = pd.DataFrame(rows, columns=['threshold', 'mAP', 'detections'])
    frame.to_csv(run_dir / 'threshold_sweep.csv', index=False)
    if not flags.get('no_plot', False):
        fig = px.line(frame, x='threshold', y='mAP', markers=True, title="mAP vs. binarization threshold")
        fig.write_html(run_dir / 'threshold_sweep.html', include_plotlyjs='cdn')
    best = frame.loc[frame['mAP'].idxmax()]
    logger.info(f"  ✓ Best threshold {best['threshold']:.2f} with mAP {best['mAP']:.4f}")


def cmd_diagnose_masks(cfg: PipelineConfig, run_dir: Path, flags: Dict):
    detector = _detector(cfg, flags, refine=True)
    root = (Path(flags['synth_dir']) if flags.get('synth_dir')
            else cfg.path('test_manifest') or cfg.path('synth_dir', cfg.run_dir('synth')))
    dataset = load_dataset(root, detector.catalog)
    threshold = cfg.section('detect')['threshold']

    rows = []
    for sample in dataset.samples:
        raw, refined = detector.mask_pair(sample.image)
        row = {'image_id': sample.sample_id}
        row.update(compare_masks(raw, refined, downsample_labels(sample.gt_mask, raw.shape_hw), threshold))
        rows.append(row)
    write_mask_diagnostics(rows, run_dir)


HANDLERS: Dict[str, Callable[[PipelineConfig, Path, Dict], None]] = {
    'toy-data': cmd_toy_data,
    'train-fcn': cmd_train_fcn,
    'synth': cmd_synth,
    'train-refine': cmd_train_refine,
    'detect': cmd_detect,
    'baseline': cmd_baseline,
    'eval': cmd_eval,
    'visualize': cmd_visualize,
    'sweep-threshold': cmd_sweep_threshold,
    'diagnose-masks': cmd_diagnose_masks,
}


# ============================================================================
# RUNNER
# ============================================================================

def prepare_run_dir(run_dir: Path, force: bool = False) -> Path:
    if run_dir.exists() and any(run_dir.iterdir()) and not force:
        raise ConfigurationError(f"Run directory {run_dir} is not empty (use --force to reuse it)")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def run_subcommand(name: str, cfg: PipelineConfig, flags: Optional[Dict] = None) -> int:
    """
    Run one pipeline step.

    Args:
        name: Subcommand name
        cfg: Resolved pipeline configuration
        flags: Subcommand flags (refine, no_pyramid, detections, limit, no_plot, synth_dir,
            force, run_name)

    Returns:
        int: 0 on success, 1 on any pipeline error
    """
    flags = flags or {}
    if name not in HANDLERS:
        logger.error(f"✗ Unknown subcommand {name!r}; choose from {', '.join(SUBCOMMANDS)}")
        return 2

    started = time.time()
    logger.info("=" * 80)
    logger.info(f"SHELF WSOL: {name}")
    logger.info("=" * 80)
    try:
        set_seed(cfg.seed)
        run_dir = prepare_run_dir(cfg.run_dir(flags.get('run_name') or name), flags.get('force', False))
        cfg.write_snapshot(run_dir)
        HANDLERS[name](cfg, run_dir, flags)
    except ShelfLocError as e:
        logger.error(f"✗ {name} failed: {e}")
        return 1

    metadata = {
        'subcommand': name,
        'flags': {k: v for k, v in flags.items() if isinstance(v, (str, int, float, bool, type(None)))},
        'config_source': str(cfg.source) if cfg.source else None,
        'started_at': datetime.fromtimestamp(started).isoformat(timespec='seconds'),
        'duration_seconds': round(time.time() - started, 3),
        'python': platform.python_version(),
        'torch': torch.__version__,
    }
    with open(run_dir / 'run_metadata.json', 'w', encoding='utf-8') as f:
        json.dump(metadata, f, indent=2)
    logger.info(f"✓ {name} finished in {metadata['duration_seconds']:.1f}s -> {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None,
                        help=f"TOML config file (default: ${config.CONFIG_ENV_VAR})")
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='Override a config value (repeatable)')
    common.add_argument('--output-dir', type=str, default=None, help='Root directory for run outputs')
    common.add_argument('--run-name', type=str, default=None, help='Run directory name (default: subcommand)')
    common.add_argument('--seed', type=int, default=None, help='Global seed')
    common.add_argument('--force', action='store_true', help='Reuse a non-empty run directory')
    common.add_argument('--log-level', type=str, default=None,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level')

    parser = argparse.ArgumentParser(description="Weakly supervised shelf product localization")
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('toy-data', parents=[common], help='Write the procedural toy dataset')
    sub.add_parser('train-fcn', parents=[common], help='Train the FCN instance classifier')
    sub.add_parser('synth', parents=[common], help='Generate synthetic planogram shelves')
    sub.add_parser('train-refine', parents=[common], help='Train the ConvAE refine-net')

    p = sub.add_parser('detect', parents=[common], help='Detect products on test shelves')
    p.add_argument('--refine', action='store_true', help='Refine FCN masks with the ConvAE')
    p.add_argument('--no-pyramid', action='store_true', help='Single-scale FCN inference')

    sub.add_parser('baseline', parents=[common], help='Sliding-window + NMS baseline')

    p = sub.add_parser('eval', parents=[common], help='VOC07 mAP of a detections file')
    p.add_argument('--detections', type=str, default=None, help='Detections JSONL file')
    p.add_argument('--no-plot', action='store_true', help='Skip the plotly PR-curve page')

    p = sub.add_parser('visualize', parents=[common], help='Draw ground truth and predictions')
    p.add_argument('--detections', type=str, default=None, help='Detections JSONL file')
    p.add_argument('--limit', type=int, default=20, help='Number of shelves to draw')

    p = sub.add_parser('sweep-threshold', parents=[common], help='mAP vs. binarization threshold')
    p.add_argument('--refine', action='store_true', help='Refine FCN masks with the ConvAE')
    p.add_argument('--no-pyramid', action='store_true', help='Single-scale FCN inference')
    p.add_argument('--no-plot', action='store_true', help='Skip the plotly page')

    p = sub.add_parser('diagnose-masks', parents=[common], help='Raw vs. refined masks on synthetic shelves')
    p.add_argument('--synth-dir', type=str, default=None, help='Synthetic dataset directory')
    p.add_argument('--no-pyramid', action='store_true', help='Single-scale FCN inference')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    try:
        cfg = load_pipeline_config(args.config, args.overrides, output_dir=args.output_dir, seed=args.seed)
    except ShelfLocError as e:
        logger.error(f"✗ Invalid configuration: {e}")
        return 1
    flags = {k: v for k, v in vars(args).items() if k not in ('config', 'overrides', 'output_dir', 'seed', 'command')}
    return run_subcommand(args.command, cfg, flags)


if __name__ == "__main__":
    sys.exit(main())
