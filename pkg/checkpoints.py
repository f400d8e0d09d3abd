"""
Versioned checkpoint container shared by the FCN and the refine-net.

A checkpoint is a plain dict saved with torch.save:
    {format, version, kind, config, catalog, extra, state_dict}
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

import torch

import config
from errors import CheckpointError

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)


def save_checkpoint(path: Union[str, Path],
                    kind: str,
                    model_config: Dict,
                    catalog: Dict,
                    state_dict: Dict,
                    extra: Optional[Dict] = None) -> Path:
    """
    Write a self-describing checkpoint.

    Args:
        path: Output file
        kind: 'fcn' or 'convae'
        model_config: Plain-dict model configuration
        catalog: ClassCatalog.to_dict()
        state_dict: Model parameters
        extra: Additional plain-dict metadata (e.g. working resolution)

    Returns:
        Path: The written file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format': config.CHECKPOINT_FORMAT,
        'version': config.CHECKPOINT_VERSION,
        'kind': kind,
        'config': model_config,
        'catalog': catalog,
        'extra': extra or {},
        'state_dict': {k: v.detach().cpu() for k, v in state_dict.items()},
    }
    torch.save(payload, path)
    logger.info(f"  ✓ {kind} checkpoint saved to {path}")
    return path


def read_checkpoint(path: Union[str, Path], kind: str) -> Dict:
    """
    Read and check a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: Missing file, foreign format, unsupported version or wrong kind
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Unreadable checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get('format') != config.CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {config.CHECKPOINT_FORMAT} file")
    if payload.get('version') != config.CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if payload.get('kind') != kind:
        raise CheckpointError(f"{path} holds a {payload.get('kind')!r} model, expected {kind!r}")
    return payload
