"""
Fully convolutional instance classifier.

The backbone is a configurable conv/pool stage list (VGG11 by default) with
the dense layers removed; a single valid convolution of kernel (kh, kw)
reduces the training-size feature map to 1x1, so the same network classifies
instance crops and produces a dense score mask on larger images.

Workflow:
1. build_fcn(config)            -> FcnModel
2. train_fcn(model, train, val) -> (model, TrainingHistory)
3. classify_instance / forward_mask at inference time
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import DataLoader, TensorDataset
from torchvision import transforms
from tqdm import tqdm

import config
from checkpoints import read_checkpoint, save_checkpoint
from data_model import ClassCatalog, ScoreMask
from errors import ConfigurationError, InvalidInputError, TrainingFailureError
from ingestion import InstanceImage

logging.basicConfig(level=config.LOG_LEVEL, format=config.LOG_FORMAT)
logger = logging.getLogger(__name__)

POOL = 'M'

# 'letterbox' keeps the crop's aspect ratio on a black canvas, 'stretch' fills
# the training size.
RESIZE_POLICIES = ('letterbox', 'stretch')


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class FcnConfig:
    """
    FCN architecture.

    `stages` lists 3x3 conv widths (ints) and 2x2 max-pools ('M'); the total
    stride S is 2 ** (number of pools). The training input size is derived
    as (kh * S, kw * S) unless given explicitly, in which case it must match.
    """

    num_classes: int
    include_background: bool = True
    final_kernel: Tuple[int, int] = (2, 4)
    stages: Tuple = tuple(config.VGG11_STAGES)
    use_pretrained_backbone: bool = False
    in_channels: int = 3
    seed: int = config.DEFAULT_SEED
    training_input_hw: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        self.final_kernel = tuple(int(k) for k in self.final_kernel)
        self.stages = tuple(s if s == POOL else int(s) for s in self.stages)
        if self.training_input_hw is not None:
            self.training_input_hw = tuple(int(v) for v in self.training_input_hw)
        self.validate()

    @property
    def stride(self) -> int:
        return 2 ** sum(1 for s in self.stages if s == POOL)

    @property
    def num_outputs(self) -> int:
        return self.num_classes + (1 if self.include_background else 0)

    @property
    def input_hw(self) -> Tuple[int, int]:
        """Training input size (H0, W0)."""
        if self.training_input_hw is not None:
            return self.training_input_hw
        kh, kw = self.final_kernel
        return (kh * self.stride, kw * self.stride)

    @property
    def feature_channels(self) -> int:
        widths = [s for s in self.stages if s != POOL]
        return widths[-1] if widths else self.in_channels

    def validate(self):
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.final_kernel) != 2 or min(self.final_kernel) < 1:
            raise ConfigurationError(f"final_kernel must be two positive ints, got {self.final_kernel}")
        if not any(s != POOL for s in self.stages):
            raise ConfigurationError("Backbone needs at least one conv stage")
        if self.training_input_hw is not None:
            S = self.stride
            kh, kw = self.final_kernel
            fh, fw = self.training_input_hw[0] // S, self.training_input_hw[1] // S
            if fh < kh or fw < kw:
                raise ConfigurationError(
                    f"Final kernel {self.final_kernel} larger than the {fh}x{fw} feature map "
                    f"of a {self.training_input_hw} training input (S={S})"
                )
            if self.training_input_hw != (kh * S, kw * S):
                raise ConfigurationError(
                    f"Training input {self.training_input_hw} must equal (kh*S, kw*S) = {(kh * S, kw * S)}"
                )
        if self.use_pretrained_backbone and list(self.stages) != list(config.VGG11_STAGES):
            raise ConfigurationError("Pretrained weights are only available for the VGG11 stage list")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['stages'] = list(self.stages)
        data['final_kernel'] = list(self.final_kernel)
        data['training_input_hw'] = list(self.training_input_hw) if self.training_input_hw else None
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'FcnConfig':
        data = dict(data)
        if data.get('training_input_hw') is not None:
            data['training_input_hw'] = tuple(data['training_input_hw'])
        return cls(**data)

    @classmethod
    def from_catalog(cls, catalog: ClassCatalog, **params) -> 'FcnConfig':
        return cls(num_classes=catalog.num_classes, include_background=catalog.include_background, **params)


@dataclass
class TrainingHyperparams:
    """SGD + early stopping settings shared by the FCN and the refine-net."""

    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    patience: int = 30
    batch_size: int = 32
    max_epochs: int = 200
    seed: int = config.DEFAULT_SEED
    augment_flip: bool = False
    augment_scale: bool = False
    augment_rotation: bool = False
    resize_policy: str = 'letterbox'

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigurationError("batch_size and max_epochs must be >= 1")
        if self.resize_policy not in RESIZE_POLICIES:
            raise ConfigurationError(
                f"Unknown resize_policy {self.resize_policy!r}; use one of {RESIZE_POLICIES}"
            )


@dataclass
class TrainingHistory:
    """Per-epoch metrics of one training run. best_epoch is 0-based."""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    best_epoch: int = -1
    stopping_reason: str = ''

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'epoch': list(range(1, self.epochs + 1)),
            'train_loss': self.train_loss,
            'val_loss': self.val_loss,
            'val_accuracy': self.val_accuracy,
        })

    def save(self, path: Union[str, Path]) -> Path:
        """Write the history as CSV plus a JSON sidecar with the stopping summary."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        summary = pd.Series({'best_epoch': self.best_epoch + 1,
                             'stopping_reason': self.stopping_reason,
                             'epochs': self.epochs})
        summary.to_json(path.with_suffix('.json'), indent=2)
        return path


# ============================================================================
# MODEL
# ============================================================================

def make_backbone(stages: Sequence, in_channels: int = 3) -> nn.Sequential:
    """Conv3x3(+ReLU) / MaxPool2x2 stack laid out like torchvision's VGG features."""
    layers: List[nn.Module] = []
    channels = in_channels
    for s in stages:
        if s == POOL:
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            layers.append(nn.Conv2d(channels, s, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            channels = s
    return nn.Sequential(*layers)


class FcnModel(nn.Module):
    """Backbone + single valid convolution to N(+1) channels. No dense layers."""

    def __init__(self, cfg: FcnConfig):
        super().__init__()
        self.config = cfg
        self.features = make_backbone(cfg.stages, cfg.in_channels)
        self.classifier = nn.Conv2d(cfg.feature_channels, cfg.num_outputs,
                                    kernel_size=cfg.final_kernel, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


def build_fcn(cfg: FcnConfig) -> FcnModel:
    """
    Build the FCN; initialization is reproducible from cfg.seed.

    Args:
        cfg: Validated FcnConfig

    Returns:
        FcnModel: Untrained (or VGG11-initialized) model
    """
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = FcnModel(cfg)

    if cfg.use_pretrained_backbone:
        from torchvision.models import VGG11_Weights, vgg11
        logger.info("Loading pretrained VGG11 convolutional stack...")
        pretrained = vgg11(weights=VGG11_Weights.IMAGENET1K_V1)
        model.features.load_state_dict(pretrained.features.state_dict())
        logger.info("  ✓ VGG11 weights loaded")

    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"  ✓ FCN built: S={cfg.stride}, kernel={cfg.final_kernel}, "
                f"input={cfg.input_hw}, outputs={cfg.num_outputs}, params={n_params:,}")
    return model


def output_shape_for(cfg: FcnConfig, input_hw: Tuple[int, int]) -> Tuple[int, int]:
    """
    Mask size produced for an input of size input_hw.

    h_out = floor(H / S) - kh + 1, w_out = floor(W / S) - kw + 1.
    """
    H, W = int(input_hw[0]), int(input_hw[1])
    H0, W0 = cfg.input_hw
    if H < H0 or W < W0:
        raise InvalidInputError(f"Input {H}x{W} smaller than training size {H0}x{W0}")
    S = cfg.stride
    kh, kw = cfg.final_kernel
    return (H // S - kh + 1, W // S - kw + 1)


# ============================================================================
# PREPROCESSING
# ============================================================================

def letterbox(pixels: np.ndarray, target_hw: Tuple[int, int]) -> np.ndarray:
    """Aspect-preserving resize onto a black (H0, W0) canvas, centered."""
    H0, W0 = target_hw
    h, w = pixels.shape[:2]
    if (h, w) == (H0, W0):
        return pixels
    scale = min(H0 / h, W0 / w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    resized = np.asarray(Image.fromarray(pixels).resize((nw, nh), Image.BILINEAR))
    canvas = np.zeros((H0, W0, 3), dtype=np.uint8)
    y0, x0 = (H0 - nh) // 2, (W0 - nw) // 2
    canvas[y0:y0 + nh, x0:x0 + nw] = resized
    return canvas


def fit_to_input(pixels: np.ndarray, target_hw: Tuple[int, int], policy: str = 'letterbox') -> np.ndarray:
    """Bring a crop to the training size with the given resize policy."""
    if policy == 'letterbox':
        return letterbox(pixels, target_hw)
    if pixels.shape[:2] == tuple(target_hw):
        return pixels
    return np.asarray(Image.fromarray(pixels).resize((target_hw[1], target_hw[0]), Image.BILINEAR))


def to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> normalized float (3, H, W)."""
    x = torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float() / 255.0
    mean = torch.tensor(config.IMAGE_MEAN).view(3, 1, 1)
    std = torch.tensor(config.IMAGE_STD).view(3, 1, 1)
    return (x - mean) / std


def _stack_instances(instances: Sequence[InstanceImage],
                     cfg: FcnConfig,
                     policy: str = 'letterbox') -> Tuple[torch.Tensor, torch.Tensor]:
    xs, ys = [], []
    for inst in instances:
        if inst.class_id == 0 and not cfg.include_background:
            raise InvalidInputError(f"Background instance {inst.source_id} but the FCN has no background channel")
        if inst.class_id > cfg.num_classes:
            raise InvalidInputError(f"Instance {inst.source_id} has label {inst.class_id} outside the catalog")
        xs.append(to_tensor(fit_to_input(inst.pixels, cfg.input_hw, policy)))
        ys.append(inst.class_id if cfg.include_background else inst.class_id - 1)
    return torch.stack(xs), torch.tensor(ys, dtype=torch.long)


def _augmentation(hp: TrainingHyperparams) -> Optional[transforms.Compose]:
    steps = []
    if hp.augment_flip:
        steps.append(transforms.RandomHorizontalFlip(p=0.5))
    if hp.augment_scale or hp.augment_rotation:
        steps.append(transforms.RandomAffine(degrees=10 if hp.augment_rotation else 0,
                                             scale=(0.85, 1.15) if hp.augment_scale else None))
    return transforms.Compose(steps) if steps else None


# ============================================================================
# TRAINING
# ============================================================================

def _evaluate(model: nn.Module, loader: DataLoader, criterion: nn.Module) -> Tuple[float, float]:
    model.eval()
    total_loss, correct, total = 0.0, 0, 0
    with torch.no_grad():
        for xb, yb in loader:
            logits = model(xb).flatten(1)
            total_loss += criterion(logits, yb).item() * xb.size(0)
            correct += (logits.argmax(dim=1) == yb).sum().item()
            total += xb.size(0)
    return total_loss / total, correct / total


def train_fcn(model: FcnModel,
              train_instances: Sequence[InstanceImage],
              val_instances: Sequence[InstanceImage],
              hp: TrainingHyperparams) -> Tuple[FcnModel, TrainingHistory]:
    """
    Train the FCN as an instance classifier on its 1x1 output.

    Cross-entropy over the N(+1) channels, SGD with momentum and weight
    decay, early stopping on validation accuracy (equal accuracy counts as an
    improvement when the validation loss is lower). The parameters of the best
    validation epoch are restored before returning.

    Args:
        model: Model from build_fcn
        train_instances: Training crops (letterboxed to the training size here)
        val_instances: Validation crops
        hp: Hyperparameters

    Returns:
        (trained model, TrainingHistory)

    Raises:
        InvalidInputError: Empty split, or a class with no training instance
        TrainingFailureError: Non-finite loss
    """
    cfg = model.config
    if not train_instances or not val_instances:
        raise InvalidInputError("train_fcn needs non-empty train and validation splits")

    x_train, y_train = _stack_instances(train_instances, cfg, hp.resize_policy)
    x_val, y_val = _stack_instances(val_instances, cfg, hp.resize_policy)
    missing = set(range(cfg.num_outputs)) - set(y_train.tolist())
    if missing:
        raise InvalidInputError(f"No training instances for channels {sorted(missing)}")
    missing_val = set(range(cfg.num_outputs)) - set(y_val.tolist())
    if missing_val:
        logger.warning(f"⚠ Validation split has no instances for channels {sorted(missing_val)}")

    logger.info("=" * 80)
    logger.info(f"FCN TRAINING: {len(x_train)} train / {len(x_val)} val, input {cfg.input_hw}")
    logger.info("=" * 80)

    torch.manual_seed(hp.seed)
    generator = torch.Generator().manual_seed(hp.seed)
    train_loader = DataLoader(TensorDataset(x_train, y_train), batch_size=hp.batch_size,
                              shuffle=True, generator=generator)
    val_loader = DataLoader(TensorDataset(x_val, y_val), batch_size=hp.batch_size, shuffle=False)
    augment = _augmentation(hp)

    criterion = nn.CrossEntropyLoss()
    optimizer = torch.optim.SGD(model.parameters(), lr=hp.learning_rate,
                                momentum=hp.momentum, weight_decay=hp.weight_decay)

    history = TrainingHistory()
    best_acc, best_loss, best_state, since_best = -1.0, math.inf, None, 0

    for epoch in tqdm(range(hp.max_epochs), desc="FCN epochs"):
        model.train()
        running, seen = 0.0, 0
        for xb, yb in train_loader:
            if augment is not None:
                xb = torch.stack([augment(x) for x in xb])
            optimizer.zero_grad()
            loss = criterion(model(xb).flatten(1), yb)
            if not torch.isfinite(loss):
                raise TrainingFailureError("Non-finite FCN training loss", epoch)
            loss.backward()
            optimizer.step()
            running += loss.item() * xb.size(0)
            seen += xb.size(0)

        val_loss, val_acc = _evaluate(model, val_loader, criterion)
        if not math.isfinite(val_loss):
            raise TrainingFailureError("Non-finite FCN validation loss", epoch)
        history.train_loss.append(running / seen)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        logger.info(f"  epoch {epoch + 1}: train_loss={running / seen:.4f} "
                    f"val_loss={val_loss:.4f} val_acc={val_acc:.4f}")

        if val_acc > best_acc or (val_acc == best_acc and val_loss < best_loss):
            best_acc, best_loss, since_best = val_acc, val_loss, 0
            best_state = copy.deepcopy(model.state_dict())
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= hp.patience:
                history.stopping_reason = 'early_stop'
                break
    else:
        history.stopping_reason = 'max_epochs'

    model.load_state_dict(best_state)
    model.eval()
    logger.info(f"  ✓ Stopped ({history.stopping_reason}) after {history.epochs} epochs; "
                f"best epoch {history.best_epoch + 1} with val_acc={best_acc:.4f}")
    return model, history


# ============================================================================
# INFERENCE
# ============================================================================

def class_probabilities(model: FcnModel, batch: Sequence[np.ndarray]) -> np.ndarray:
    """Softmax probabilities (B, C) for images already at the training size."""
    H0, W0 = model.config.input_hw
    for pixels in batch:
        if pixels.shape[:2] != (H0, W0):
            raise InvalidInputError(f"Expected a {H0}x{W0} image, got {pixels.shape[0]}x{pixels.shape[1]}")
    model.eval()
    with torch.no_grad():
        x = torch.stack([to_tensor(p) for p in batch])
        probs = F.softmax(model(x).flatten(1), dim=1)
    return probs.numpy().astype(np.float64)


def classify_instance(model: FcnModel, image: np.ndarray) -> Tuple[int, np.ndarray]:
    """
    Classify one training-size image.

    Returns:
        (label id of the argmax channel, probability vector over channels)
    """
    probs = class_probabilities(model, [image])[0]
    channel = int(np.argmax(probs))
    label = channel if model.config.include_background else channel + 1
    return label, probs


def forward_mask(model: FcnModel, image: np.ndarray) -> ScoreMask:
    """
    Dense forward pass of an image at least as large as the training size.

    Returns:
        ScoreMask of shape output_shape_for(config, image size), softmaxed per pixel
    """
    cfg = model.config
    output_shape_for(cfg, image.shape[:2])
    model.eval()
    with torch.no_grad():
        probs = F.softmax(model(to_tensor(image).unsqueeze(0)), dim=1)[0]
    return ScoreMask(values=probs.numpy(), has_background=cfg.include_background)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_fcn(model: FcnModel, catalog: ClassCatalog, path: Union[str, Path]) -> Path:
    return save_checkpoint(path, 'fcn', model.config.to_dict(), catalog.to_dict(), model.state_dict())


def load_fcn(path: Union[str, Path]) -> Tuple[FcnModel, ClassCatalog]:
    """Rebuild a frozen FCN and its catalog from a checkpoint."""
    payload = read_checkpoint(path, 'fcn')
    cfg = FcnConfig.from_dict({**payload['config'], 'use_pretrained_backbone': False})
    model = FcnModel(cfg)
    model.load_state_dict(payload['state_dict'])
    model.eval()
    return model, ClassCatalog.from_dict(payload['catalog'])


if __name__ == "__main__":
    logger.info("=" * 80)
    logger.info("FCN SHAPE DEMONSTRATION")
    logger.info("=" * 80)
    demo_cfg = FcnConfig(num_classes=10, include_background=True, final_kernel=(2, 4))
    demo_model = build_fcn(demo_cfg)
    for hw in [(64, 128), (128, 256), (1200, 1600)]:
        logger.info(f"  input {hw} -> mask {output_shape_for(demo_cfg, hw)}")
