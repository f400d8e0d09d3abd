"""
Refine-net: a small convolutional encoder-decoder (ConvAE) that maps noisy
FCN score masks to cleaner per-pixel class predictions.

It is trained on the FCN's own outputs for synthetic shelves (never on the
synthetic images directly), against the synthetic label masks, so it learns
to suppress the FCN's characteristic false positives.

The ConvAE always predicts background + N positive channels, because the
synthetic label masks always contain background.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from sklearn.model_selection import train_test_split
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

import config
from checkpoints import read_checkpoint, save_checkpoint
from data_model import ClassCatalog, ScoreMask
from errors import ConfigurationError, InvalidInputError, TrainingFailureError
from fcn_classifier import FcnModel, TrainingHistory
from pyramid_inference import PyramidConfig, pyramid_forward, resize_mask, single_scale_forward
from synth_planogram import SyntheticSample

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class ConvAeConfig:
    """
    ConvAE layout: one encoder block (conv3x3 + ReLU + maxpool2) per filter
    count, mirrored decoder blocks (bilinear x2 + conv3x3 + ReLU), then a 1x1
    projection to out_channels logits.

    The default three blocks give a downscale of 8. Any depth >= 1 is accepted
    (a one-block net is small enough for gradient checks); the working
    resolution must then be a multiple of 2 ** len(filters).
    """

    in_channels: int
    out_channels: int
    filters: Tuple[int, ...] = (16, 24, 32)
    seed: int = config.DEFAULT_SEED

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        if self.in_channels < 1 or self.out_channels < 2:
            raise ConfigurationError(
                f"ConvAE needs >= 1 input and >= 2 output channels, got {self.in_channels}/{self.out_channels}"
            )
        if not self.filters or min(self.filters) < 1:
            raise ConfigurationError(f"filters must be positive, got {self.filters}")

    @property
    def blocks(self) -> int:
        return len(self.filters)

    @property
    def downscale(self) -> int:
        """Spatial reduction through the encoder; inputs must be multiples of it."""
        return 2 ** self.blocks

    def to_dict(self):
        data = asdict(self)
        data['filters'] = list(self.filters)
        return data

    @classmethod
    def from_dict(cls, data) -> 'ConvAeConfig':
        return cls(**data)

    @classmethod
    def for_catalog(cls, catalog: ClassCatalog, **params) -> 'ConvAeConfig':
        """Input = the FCN's channel layout, output = background + positives."""
        return cls(in_channels=catalog.num_channels, out_channels=catalog.num_classes + 1, **params)


# Per-class loss weights for the refine-net: 'none' or 'inverse_sqrt' of the
# training-split pixel frequency.
CLASS_WEIGHTINGS = ('none', 'inverse_sqrt')


@dataclass
class RefineHyperparams:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    patience: int = 5
    batch_size: int = 4
    max_epochs: int = 100
    val_fraction: float = 0.2
    seed: int = config.DEFAULT_SEED
    class_weighting: str = 'none'

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigurationError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.class_weighting not in CLASS_WEIGHTINGS:
            raise ConfigurationError(
                f"Unknown class_weighting {self.class_weighting!r}; use one of {CLASS_WEIGHTINGS}"
            )


def default_working_resolution(canvas_hw: Tuple[int, int], multiple: int = 8) -> Tuple[int, int]:
    """A quarter of the canvas, rounded to the nearest multiple of `multiple`."""
    return tuple(max(multiple, int(round(side / 4 / multiple)) * multiple) for side in canvas_hw)


# ============================================================================
# MODEL
# ============================================================================

class ConvAeModel(nn.Module):
    def __init__(self, cfg: ConvAeConfig):
        super().__init__()
        self.config = cfg
        encoder = []
        prev = cfg.in_channels
        for f in cfg.filters:
            encoder.append(nn.Sequential(
                nn.Conv2d(prev, f, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(kernel_size=2, stride=2),
            ))
            prev = f
        self.encoder = nn.ModuleList(encoder)

        decoder = []
        for i in reversed(range(cfg.blocks)):
            out = cfg.filters[i - 1] if i > 0 else cfg.filters[0]
            decoder.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode='bilinear', align_corners=False),
                nn.Conv2d(cfg.filters[i], out, kernel_size=3, padding=1),
                nn.ReLU(inplace=True),
            ))
        self.decoder = nn.ModuleList(decoder)
        self.head = nn.Conv2d(cfg.filters[0], cfg.out_channels, kernel_size=1)

    def encode_features(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Output of every encoder block, shallowest first."""
        features = []
        for block in self.encoder:
            x = block(x)
            features.append(x)
        return features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.encode_features(x)[-1]
        for block in self.decoder:
            x = block(x)
        return self.head(x)


def build_convae(cfg: ConvAeConfig) -> ConvAeModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = ConvAeModel(cfg)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"  ✓ ConvAE built: filters={cfg.filters}, {cfg.in_channels}->{cfg.out_channels} "
                f"channels, params={n_params:,}")
    return model


# ============================================================================
# TRAINING DATA
# ============================================================================

def downsample_labels(gt_mask: np.ndarray, target_hw: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a label grid."""
    if gt_mask.shape == tuple(target_hw):
        return gt_mask
    return np.asarray(Image.fromarray(gt_mask).resize((target_hw[1], target_hw[0]), Image.NEAREST))


def fcn_score_mask(fcn_model: FcnModel,
                   image: np.ndarray,
                   pyramid_cfg: Optional[PyramidConfig] = None) -> ScoreMask:
    """FCN mask at image resolution; single-scale when pyramid_cfg is None."""
    if pyramid_cfg is None:
        return single_scale_forward(fcn_model, image)
    return pyramid_forward(fcn_model, image, pyramid_cfg)


def prepare_refine_pairs(fcn_model: FcnModel,
                         samples: Sequence[SyntheticSample],
                         working_resolution: Tuple[int, int],
                         pyramid_cfg: Optional[PyramidConfig] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Run the frozen FCN over synthetic shelves.

    Returns:
        (inputs (B, C, h, w) float32, targets (B, h, w) int64) at working_resolution
    """
    fcn_model.eval()
    xs, ys = [], []
    for sample in tqdm(samples, desc="FCN masks for refine training"):
        mask = fcn_score_mask(fcn_model, sample.image, pyramid_cfg)
        xs.append(torch.from_numpy(resize_mask(mask, working_resolution)))
        ys.append(torch.from_numpy(downsample_labels(sample.gt_mask, working_resolution).astype(np.int64)))
    return torch.stack(xs), torch.stack(ys)


def _check_resolution(cfg: ConvAeConfig, working_resolution: Tuple[int, int]):
    h, w = working_resolution
    if h < cfg.downscale or w < cfg.downscale or h % cfg.downscale or w % cfg.downscale:
        raise ConfigurationError(
            f"Working resolution {working_resolution} must be a positive multiple of {cfg.downscale}"
        )


# ============================================================================
# TRAINING
# ============================================================================

def class_weights(targets: torch.Tensor, num_classes: int, scheme: str = 'none') -> Optional[torch.Tensor]:
    """
    Cross-entropy weights from the pixel counts of a label tensor.

    'inverse_sqrt' weights class c by 1 / sqrt(count_c + 1), normalized so the
    pixel-weighted mean weight is 1. 'none' returns None.
    """
    if scheme not in CLASS_WEIGHTINGS:
        raise ConfigurationError(f"Unknown class_weighting {scheme!r}; use one of {CLASS_WEIGHTINGS}")
    if scheme == 'none':
        return None
    counts = torch.bincount(targets.flatten().long(), minlength=num_classes)[:num_classes].double()
    weights = 1.0 / torch.sqrt(counts + 1.0)
    weights = weights * counts.sum() / (weights * counts).sum().clamp_min(1e-12)
    return weights.float()


def _evaluate(model: nn.Module, loader: DataLoader, criterion: nn.Module) -> Tuple[float, float]:
    model.eval()
    total_loss, correct, total, seen = 0.0, 0, 0, 0
    with torch.no_grad():
        for xb, yb in loader:
            logits = model(xb)
            total_loss += criterion(logits, yb).item() * xb.size(0)
            correct += (logits.argmax(dim=1) == yb).sum().item()
            total += yb.numel()
            seen += xb.size(0)
    return total_loss / seen, correct / total


def train_refine_on_pairs(convae: ConvAeModel,
                          inputs: torch.Tensor,
                          targets: torch.Tensor,
                          hp: RefineHyperparams) -> Tuple[ConvAeModel, TrainingHistory]:
    """
    Fit the ConvAE to precomputed (FCN mask, label grid) pairs.

    Per-pixel cross-entropy (optionally class-weighted), SGD with momentum,
    early stopping on held-out loss (strictly lower counts as improvement). A single pair is used for
    both training and validation.
    """
    cfg = convae.config
    if len(inputs) == 0:
        raise InvalidInputError("Refine training needs at least one sample")
    if inputs.shape[1] != cfg.in_channels:
        raise InvalidInputError(f"Masks have {inputs.shape[1]} channels, ConvAE expects {cfg.in_channels}")
    if int(targets.max()) >= cfg.out_channels:
        raise InvalidInputError(f"Label {int(targets.max())} outside the ConvAE's {cfg.out_channels} outputs")
    _check_resolution(cfg, tuple(inputs.shape[2:]))

    indices = list(range(len(inputs)))
    if len(indices) == 1:
        train_idx, val_idx = indices, indices
    else:
        n_val = min(max(1, int(math.floor(len(indices) * hp.val_fraction + 0.5))), len(indices) - 1)
        train_idx, val_idx = train_test_split(indices, test_size=n_val, random_state=hp.seed, shuffle=True)
        train_idx, val_idx = sorted(train_idx), sorted(val_idx)

    logger.info("=" * 80)
    logger.info(f"REFINE-NET TRAINING: {len(train_idx)} train / {len(val_idx)} val shelves "
                f"at {tuple(inputs.shape[2:])}")
    logger.info("=" * 80)

    torch.manual_seed(hp.seed)
    generator = torch.Generator().manual_seed(hp.seed)
    train_loader = DataLoader(TensorDataset(inputs[train_idx], targets[train_idx]),
                              batch_size=hp.batch_size, shuffle=True, generator=generator)
    val_loader = DataLoader(TensorDataset(inputs[val_idx], targets[val_idx]),
                            batch_size=hp.batch_size, shuffle=False)

    weights = class_weights(targets[train_idx], cfg.out_channels, hp.class_weighting)
    if weights is not None:
        logger.info(f"  Class weights ({hp.class_weighting}): {[round(w, 3) for w in weights.tolist()]}")
    criterion = nn.CrossEntropyLoss(weight=weights)
    optimizer = torch.optim.SGD(convae.parameters(), lr=hp.learning_rate,
                                momentum=hp.momentum, weight_decay=hp.weight_decay)

    history = TrainingHistory()
    best_loss, best_state, since_best = math.inf, None, 0
    for epoch in tqdm(range(hp.max_epochs), desc="ConvAE epochs"):
        convae.train()
        running, seen = 0.0, 0
        for xb, yb in train_loader:
            optimizer.zero_grad()
            loss = criterion(convae(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingFailureError("Non-finite ConvAE training loss", epoch)
            loss.backward()
            optimizer.step()
            running += loss.item() * xb.size(0)
            seen += xb.size(0)

        val_loss, val_acc = _evaluate(convae, val_loader, criterion)
        if not math.isfinite(val_loss):
            raise TrainingFailureError("Non-finite ConvAE validation loss", epoch)
        history.train_loss.append(running / seen)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        logger.info(f"  epoch {epoch + 1}: train_loss={running / seen:.4f} "
                    f"val_loss={val_loss:.4f} pixel_acc={val_acc:.4f}")

        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, copy.deepcopy(convae.state_dict()), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= hp.patience:
                history.stopping_reason = 'early_stop'
                break
    else:
        history.stopping_reason = 'max_epochs'

    convae.load_state_dict(best_state)
    convae.eval()
    logger.info(f"  ✓ Stopped ({history.stopping_reason}) after {history.epochs} epochs; "
                f"best epoch {history.best_epoch + 1} with val_loss={best_loss:.4f}")
    return convae, history


def train_refine(convae: ConvAeModel,
                 fcn_model: FcnModel,
                 synthetic_dataset: Sequence[SyntheticSample],
                 hp: RefineHyperparams,
                 working_resolution: Tuple[int, int],
                 pyramid_cfg: Optional[PyramidConfig] = None) -> Tuple[ConvAeModel, TrainingHistory]:
    """
    Train the ConvAE on frozen-FCN outputs of synthetic shelves.

    Args:
        convae: Model from build_convae
        fcn_model: Trained FCN; its parameters are never updated
        synthetic_dataset: Synthetic samples (label masks are the targets)
        hp: Hyperparameters
        working_resolution: (h, w) both divisible by the ConvAE downscale
        pyramid_cfg: Pyramid used to score each shelf (None = single scale)

    Returns:
        (trained ConvAE, TrainingHistory)
    """
    _check_resolution(convae.config, working_resolution)
    if not synthetic_dataset:
        raise InvalidInputError("train_refine needs a non-empty synthetic dataset")
    inputs, targets = prepare_refine_pairs(fcn_model, synthetic_dataset, working_resolution, pyramid_cfg)
    return train_refine_on_pairs(convae, inputs, targets, hp)


# ============================================================================
# INFERENCE
# ============================================================================

def refine_mask(convae: ConvAeModel, mask: ScoreMask) -> ScoreMask:
    """
    Refine a score mask of any size.

    The mask is edge-padded on the bottom/right to the next multiple of the
    downscale, forwarded, softmaxed and cropped back to its own size.

    Returns:
        ScoreMask with a background channel and the input's spatial shape
    """
    cfg = convae.config
    if mask.channels != cfg.in_channels:
        raise InvalidInputError(f"Mask has {mask.channels} channels, ConvAE expects {cfg.in_channels}")
    H, W = mask.shape_hw
    d = cfg.downscale
    pad_h, pad_w = (-H) % d, (-W) % d

    x = torch.from_numpy(np.array(mask.values, dtype=np.float32)).unsqueeze(0)
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode='replicate')
    convae.eval()
    with torch.no_grad():
        probs = F.softmax(convae(x), dim=1)[0, :, :H, :W]
    return ScoreMask(values=probs.numpy(), has_background=True)


def refine_at_working_resolution(convae: ConvAeModel,
                                 mask: ScoreMask,
                                 working_resolution: Tuple[int, int]) -> ScoreMask:
    """Resize an image-resolution FCN mask to the training resolution, then refine it."""
    small = ScoreMask(values=resize_mask(mask, working_resolution), has_background=mask.has_background)
    return refine_mask(convae, small)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_convae(model: ConvAeModel,
                catalog: ClassCatalog,
                path: Union[str, Path],
                working_resolution: Tuple[int, int]) -> Path:
    return save_checkpoint(path, 'convae', model.config.to_dict(), catalog.to_dict(), model.state_dict(),
                           extra={'working_resolution': list(working_resolution)})


def load_convae(path: Union[str, Path]) -> Tuple[ConvAeModel, ClassCatalog, Tuple[int, int]]:
    """Returns (frozen ConvAE, catalog, working resolution)."""
    payload = read_checkpoint(path, 'convae')
    model = ConvAeModel(ConvAeConfig.from_dict(payload['config']))
    model.load_state_dict(payload['state_dict'])
    model.eval()
    working_resolution = tuple(payload['extra']['working_resolution'])
    return model, ClassCatalog.from_dict(payload['catalog']), working_resolution


if __name__ == "__main__":
    logger.info("=" * 80)
    logger.info("CONVAE SHAPES")
    logger.info("=" * 80)
    demo = build_convae(ConvAeConfig(in_channels=11, out_channels=11))
    demo_x = torch.zeros(1, 11, 96, 160)
    for i, feat in enumerate(demo.encode_features(demo_x)):
        logger.info(f"  encoder block {i + 1}: {tuple(feat.shape[1:])}")
    logger.info(f"  output: {tuple(demo(demo_x).shape[1:])}")
