"""
Pipeline configuration for the command-line runs.

Values are resolved in three layers:
1. Defaults from config.py
2. A TOML file (--config, or the SHELF_WSOL_CONFIG environment variable)
3. --set section.key=value overrides (values parsed as TOML literals)

The top-level `seed` fills the `seed` of every seeded section that does not
set one explicitly. The resolved tree is what gets snapshotted into each run
directory.
"""

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple, Union

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

import config
from data_model import ClassCatalog
from errors import ConfigurationError
from evaluation import EvalConfig
from fcn_classifier import FcnConfig, TrainingHyperparams
from postprocess import DetectParams, SlidingWindowParams
from pyramid_inference import PyramidConfig
from refine_net import ConvAeConfig, RefineHyperparams

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

SEEDED_SECTIONS = ('fcn', 'training', 'synth', 'refine', 'toy')

PATH_KEYS = ('manifest', 'test_manifest', 'backgrounds_dir', 'fcn_checkpoint',
             'synth_dir', 'convae_checkpoint', 'detections')

BACKGROUND_PATCH_KEYS = ('background_patches', 'background_patch_hw', 'background_max_overlap_iou')


def _defaults() -> Dict[str, Dict[str, Any]]:
    return {
        'fcn': dict(config.FCN_PARAMS),
        'training': dict(config.FCN_TRAINING_PARAMS),
        'pyramid': dict(config.PYRAMID_PARAMS),
        'synth': dict(config.SYNTH_PARAMS),
        'refine': dict(config.REFINE_PARAMS),
        'detect': dict(config.DETECT_PARAMS),
        'baseline': dict(config.BASELINE_PARAMS),
        'eval': dict(config.EVAL_PARAMS),
        'sweep': {'thresholds': list(config.SWEEP_THRESHOLDS)},
        'toy': dict(config.TOY_PARAMS),
        'paths': {key: '' for key in PATH_KEYS},
    }


def _plain(value: Any) -> Any:
    """Tuples to lists, recursively, so the tree is JSON/TOML shaped."""
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, Path):
        return str(value)
    return value


def parse_override(item: str) -> Tuple[str, str, Any]:
    """
    Parse 'section.key=value'.

    The value is read as a TOML literal (numbers, booleans, arrays, inline
    tables, quoted strings); anything else is taken as a bare string.
    """
    if '=' not in item or '.' not in item.split('=', 1)[0]:
        raise ConfigurationError(f"Override must look like section.key=value, got {item!r}")
    dotted, raw = item.split('=', 1)
    section, key = dotted.strip().split('.', 1)
    try:
        value = tomllib.loads(f"v = {raw}")['v']
    except tomllib.TOMLDecodeError:
        value = raw
    return section, key, value


@dataclass
class PipelineConfig:
    """Resolved pipeline settings: one dict per section plus seed and output dir."""

    sections: Dict[str, Dict[str, Any]]
    seed: int = config.DEFAULT_SEED
    output_dir: Path = config.RUNS_DIR
    source: Optional[Path] = None
    explicit_seeds: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)
        for section in SEEDED_SECTIONS:
            if section not in self.explicit_seeds:
                self.sections[section]['seed'] = self.seed

    def section(self, name: str) -> Dict[str, Any]:
        return self.sections[name]

    def path(self, key: str, default: Optional[Union[str, Path]] = None) -> Optional[Path]:
        """Configured path, or the default when unset."""
        value = self.sections['paths'].get(key) or default
        return Path(value) if value else None

    def run_dir(self, name: str) -> Path:
        return self.output_dir / name

    def to_dict(self) -> Dict[str, Any]:
        tree = {'seed': self.seed, 'output_dir': str(self.output_dir)}
        tree.update(_plain(self.sections))
        return tree

    def write_snapshot(self, run_dir: Union[str, Path]) -> Path:
        path = Path(run_dir) / 'resolved_config.json'
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    # ------------------------------------------------------------------
    # Builders
    # ------------------------------------------------------------------

    def fcn_config(self, catalog: ClassCatalog) -> FcnConfig:
        return FcnConfig.from_catalog(catalog, **self.sections['fcn'])

    def training_hyperparams(self) -> TrainingHyperparams:
        skip = BACKGROUND_PATCH_KEYS + ('val_fraction',)
        return TrainingHyperparams(**{k: v for k, v in self.sections['training'].items() if k not in skip})

    def pyramid_config(self, min_level_hw: Tuple[int, int]) -> PyramidConfig:
        return PyramidConfig(min_level_hw=min_level_hw, **self.sections['pyramid'])

    def synth_params(self) -> Dict[str, Any]:
        """SynthConfig keyword arguments (pools are supplied by the caller)."""
        return dict(self.sections['synth'])

    def convae_config(self, catalog: ClassCatalog) -> ConvAeConfig:
        s = self.sections['refine']
        return ConvAeConfig.for_catalog(catalog, filters=tuple(s['filters']), seed=s['seed'])

    def refine_hyperparams(self) -> RefineHyperparams:
        s = self.sections['refine']
        keys = ('learning_rate', 'momentum', 'weight_decay', 'patience', 'batch_size',
                'max_epochs', 'val_fraction', 'seed', 'class_weighting')
        return RefineHyperparams(**{k: s[k] for k in keys})

    def working_resolution(self) -> Optional[Tuple[int, int]]:
        value = self.sections['refine'].get('working_resolution')
        return tuple(int(v) for v in value) if value else None

    def detect_params(self, catalog: ClassCatalog, threshold: Optional[float] = None) -> DetectParams:
        s = self.sections['detect']
        per_class = {catalog.label_of(name): value for name, value in (s.get('class_thresholds') or {}).items()}
        return DetectParams(threshold=threshold if threshold is not None else s['threshold'],
                            class_thresholds=per_class,
                            connectivity=s['connectivity'],
                            min_area_fraction=s['min_area_fraction'])

    def sliding_window_params(self) -> SlidingWindowParams:
        return SlidingWindowParams(**self.sections['baseline'])

    def eval_config(self) -> EvalConfig:
        return EvalConfig(**self.sections['eval'])

    def sweep_thresholds(self) -> Sequence[float]:
        return [float(t) for t in self.sections['sweep']['thresholds']]


def _merge(sections: Dict[str, Dict[str, Any]], section: str, key: str, value: Any, origin: str):
    if section not in sections:
        raise ConfigurationError(f"Unknown config section [{section}] ({origin})")
    if key not in sections[section] and not (key == 'seed' and section in SEEDED_SECTIONS):
        raise ConfigurationError(f"Unknown key {section}.{key} ({origin})")
    sections[section][key] = value


def load_pipeline_config(path: Optional[Union[str, Path]] = None,
                         overrides: Iterable[str] = (),
                         output_dir: Optional[Union[str, Path]] = None,
                         seed: Optional[int] = None) -> PipelineConfig:
    """
    Resolve the pipeline configuration.

    Args:
        path: TOML file; falls back to $SHELF_WSOL_CONFIG, then to defaults only
        overrides: 'section.key=value' strings applied last
        output_dir: Overrides the file's output_dir
        seed: Overrides the file's global seed

    Returns:
        PipelineConfig

    Raises:
        ConfigurationError: Unreadable file, unknown section or key
    """
    sections = copy.deepcopy(_defaults())
    top: Dict[str, Any] = {'seed': config.DEFAULT_SEED, 'output_dir': str(config.RUNS_DIR)}
    explicit_seeds = set()

    if path is None and os.environ.get(config.CONFIG_ENV_VAR):
        path = os.environ[config.CONFIG_ENV_VAR]
    source = Path(path) if path else None

    if source is not None:
        if not source.exists():
            raise ConfigurationError(f"Config file not found: {source}")
        try:
            with open(source, 'rb') as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigurationError(f"Invalid TOML in {source}: {e}") from e
        for name, value in data.items():
            if isinstance(value, dict):
                for key, item in value.items():
                    _merge(sections, name, key, item, str(source))
                    if key == 'seed':
                        explicit_seeds.add(name)
            elif name in top:
                top[name] = value
            else:
                raise ConfigurationError(f"Unknown top-level key {name!r} in {source}")
        logger.info(f"  ✓ Config loaded from {source}")

    for item in overrides:
        section, key, value = parse_override(item)
        if section == 'global' and key in top:
            top[key] = value
            continue
        _merge(sections, section, key, value, '--set')
        if key == 'seed':
            explicit_seeds.add(section)

    if seed is not None:
        top['seed'] = seed
    if output_dir is not None:
        top['output_dir'] = str(output_dir)

    return PipelineConfig(sections=sections, seed=int(top['seed']), output_dir=Path(top['output_dir']),
                          source=source, explicit_seeds=tuple(sorted(explicit_seeds)))

