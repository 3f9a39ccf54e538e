# core/networks.py
"""
3D classification networks for fused CT volumes.

Two families are provided:

- Hybrid-DeCoVNet: stem (3D conv, 3 -> 16 channels), four residual stages
  (64/128/256/512 channels), a classification head (adaptive max-pool to
  4x7x7, three 3D convs 512 -> 256 -> 128 -> 64, global max-pool) and a
  decision head (one linear layer, 2 logits). Never pretrained.
- 3D-ResNet-18/50 laid out like the action-recognition checkpoints
  (conv1/bn1/layer1..4/fc), so those weights load by name. The decision layer
  ``fc`` is always fresh and has 2 outputs.

Every architecture takes a ``width_multiplier`` that scales all channel
counts; 1.0 is the full-size network, 0.25 is the desk-scale one. Spatial
size is free because both families end in adaptive pooling.
"""
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core import console
from core.errors import ConfigError, MissingPath, MissingWeights, NumericalError, WeightLoadError
from core.utils import PathLike
from core.version import VERSION

DECISION_LAYER = "fc"
N_CLASSES = 2


def _scale(channels: int, multiplier: float) -> int:
    return max(1, int(round(channels * multiplier)))


class Arch(str, Enum):
    HYBRID_DECOVNET = "hybrid_decovnet"
    RESNET3D_18 = "resnet3d_18"
    RESNET3D_50 = "resnet3d_50"

    @property
    def display_name(self) -> str:
        return {
            Arch.HYBRID_DECOVNET: "Hybrid-DeCoVNet",
            Arch.RESNET3D_18: "3D-ResNet-18",
            Arch.RESNET3D_50: "3D-ResNet-50",
        }[self]

    @property
    def depth(self) -> Optional[int]:
        return {Arch.RESNET3D_18: 18, Arch.RESNET3D_50: 50}.get(self)


class HybridDeCoVNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    in_channels: int = 3
    stem_out: int = 16
    stem_kernel: Tuple[int, int, int] = (7, 7, 5)  # (h, w, d)
    stage_channels: List[int] = Field(default_factory=lambda: [64, 128, 256, 512])
    blocks_per_stage: List[int] = Field(default_factory=lambda: [2, 2, 2, 2])
    adaptive_pool_out: Tuple[int, int, int] = (4, 7, 7)  # (d, h, w)
    head_channels: List[int] = Field(default_factory=lambda: [256, 128, 64])
    n_classes: int = N_CLASSES
    width_multiplier: float = 1.0

    @model_validator(mode="after")
    def _check_invariants(self):
        self.check()
        return self

    def check(self):
        """Raise ConfigError when an architectural invariant is violated"""
        if self.in_channels != 3:
            raise ConfigError(f"in_channels must be 3 (gray, lung, infection), got {self.in_channels}")
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"n_classes must be {N_CLASSES}, got {self.n_classes}")
        if not (0.0 < self.width_multiplier <= 1.0):
            raise ConfigError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("exactly four residual stages are required")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError(f"every stage needs at least one block, got {self.blocks_per_stage}")
        if any(a >= b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"stage_channels must be strictly increasing, got {self.stage_channels}")
        if len(self.head_channels) != 3:
            raise ConfigError(f"the classification head has three convolutions, got {self.head_channels}")
        if self.width_multiplier == 1.0 and tuple(self.stem_kernel) != (7, 7, 5):
            raise ConfigError(f"stem_kernel is fixed to (7, 7, 5) at full width, got {self.stem_kernel}")
        if any(k < 1 or k % 2 == 0 for k in self.stem_kernel):
            raise ConfigError(f"stem_kernel sizes must be odd, got {self.stem_kernel}")
        if any(p < 1 for p in self.adaptive_pool_out):
            raise ConfigError(f"adaptive_pool_out must be positive, got {self.adaptive_pool_out}")


class ModelSpec(BaseModel):
    """What to build; ``width_multiplier`` applies to every architecture"""
    model_config = ConfigDict(extra="forbid")

    arch: Arch = Arch.HYBRID_DECOVNET
    pretrained: bool = False
    config: HybridDeCoVNetConfig = Field(default_factory=HybridDeCoVNetConfig)
    width_multiplier: float = 1.0
    weights_path: Optional[str] = None
    model_id: str = ""

    @model_validator(mode="after")
    def _check_spec(self):
        if self.arch is Arch.HYBRID_DECOVNET and self.pretrained:
            raise ConfigError("hybrid_decovnet has no pretrained weights")
        if not (0.0 < self.width_multiplier <= 1.0):
            raise ConfigError(f"width_multiplier must be in (0, 1], got {self.width_multiplier}")
        return self

    @property
    def depth(self) -> Optional[int]:
        return self.arch.depth

    def hybrid_config(self) -> HybridDeCoVNetConfig:
        return self.config.model_copy(update={"width_multiplier": self.width_multiplier})


# --- Building blocks ---

def conv3x3x3(in_planes: int, out_planes: int, stride=1) -> nn.Conv3d:
    return nn.Conv3d(in_planes, out_planes, kernel_size=3, stride=stride, padding=1, bias=False)


def conv1x1x1(in_planes: int, out_planes: int, stride=1) -> nn.Conv3d:
    return nn.Conv3d(in_planes, out_planes, kernel_size=1, stride=stride, bias=False)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride=1, downsample: Optional[nn.Module] = None):
        super().__init__()
        self.conv1 = conv3x3x3(in_planes, planes, stride)
        self.bn1 = nn.BatchNorm3d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = conv3x3x3(planes, planes)
        self.bn2 = nn.BatchNorm3d(planes)
        self.downsample = downsample

    def forward(self, x):
        residual = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + residual)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_planes: int, planes: int, stride=1, downsample: Optional[nn.Module] = None):
        super().__init__()
        self.conv1 = conv1x1x1(in_planes, planes)
        self.bn1 = nn.BatchNorm3d(planes)
        self.conv2 = conv3x3x3(planes, planes, stride)
        self.bn2 = nn.BatchNorm3d(planes)
        self.conv3 = conv1x1x1(planes, planes * self.expansion)
        self.bn3 = nn.BatchNorm3d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        residual = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + residual)


def _make_layer(block, in_planes: int, planes: int, blocks: int, stride=1) -> Tuple[nn.Sequential, int]:
    downsample = None
    if stride != 1 or in_planes != planes * block.expansion:
        downsample = nn.Sequential(
            conv1x1x1(in_planes, planes * block.expansion, stride),
            nn.BatchNorm3d(planes * block.expansion),
        )
    layers = [block(in_planes, planes, stride, downsample)]
    in_planes = planes * block.expansion
    for _ in range(1, blocks):
        layers.append(block(in_planes, planes))
    return nn.Sequential(*layers), in_planes


def _init_weights(model: nn.Module):
    for m in model.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.constant_(m.weight, 1)
            nn.init.constant_(m.bias, 0)
    fc = getattr(model, DECISION_LAYER, None)
    if isinstance(fc, nn.Linear) and fc.bias is not None:
        nn.init.zeros_(fc.bias)


# --- Hybrid-DeCoVNet ---

class HybridDeCoVNet(nn.Module):
    def __init__(self, config: HybridDeCoVNetConfig):
        super().__init__()
        m = config.width_multiplier
        kh, kw, kd = config.stem_kernel
        stem_out = _scale(config.stem_out, m)
        self.stem = nn.Sequential(
            nn.Conv3d(config.in_channels, stem_out, kernel_size=(kd, kh, kw), stride=(1, 2, 2),
                      padding=(kd // 2, kh // 2, kw // 2), bias=False),
            nn.BatchNorm3d(stem_out),
            nn.ReLU(inplace=True),
        )
        in_planes = stem_out
        stages = []
        for i, (channels, blocks) in enumerate(zip(config.stage_channels, config.blocks_per_stage)):
            layer, in_planes = _make_layer(BasicBlock, in_planes, _scale(channels, m), blocks,
                                           stride=1 if i == 0 else 2)
            stages.append(layer)
        self.layer1, self.layer2, self.layer3, self.layer4 = stages

        head: List[nn.Module] = [nn.AdaptiveMaxPool3d(config.adaptive_pool_out)]
        for channels in config.head_channels:
            out = _scale(channels, m)
            head += [conv3x3x3(in_planes, out), nn.BatchNorm3d(out), nn.ReLU(inplace=True)]
            in_planes = out
        head.append(nn.AdaptiveMaxPool3d(1))
        self.head = nn.Sequential(*head)
        self.fc = nn.Linear(in_planes, config.n_classes)
        _init_weights(self)

    @property
    def stem_channels(self) -> int:
        return self.stem[0].out_channels

    @property
    def stage_out_channels(self) -> List[int]:
        return [layer[-1].bn2.num_features for layer in (self.layer1, self.layer2, self.layer3, self.layer4)]

    def features(self, x):
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return x

    def forward(self, x):
        x = self.head(self.features(x))
        return self.fc(torch.flatten(x, 1))


def build_hybrid_decovnet(config: Optional[HybridDeCoVNetConfig] = None) -> HybridDeCoVNet:
    config = config or HybridDeCoVNetConfig()
    config.check()
    return HybridDeCoVNet(config)


# --- 3D-ResNet (action-recognition layout) ---

RESNET_LAYOUTS = {
    18: (BasicBlock, [2, 2, 2, 2]),
    50: (Bottleneck, [3, 4, 6, 3]),
}


class ResNet3d(nn.Module):
    def __init__(self, block, layers: List[int], widen_factor: float = 1.0,
                 n_input_channels: int = 3, n_classes: int = N_CLASSES):
        super().__init__()
        planes = [_scale(c, widen_factor) for c in (64, 128, 256, 512)]
        self.in_planes = planes[0]
        self.conv1 = nn.Conv3d(n_input_channels, self.in_planes, kernel_size=(7, 7, 7),
                               stride=(1, 2, 2), padding=(3, 3, 3), bias=False)
        self.bn1 = nn.BatchNorm3d(self.in_planes)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool3d(kernel_size=3, stride=2, padding=1)
        in_planes = self.in_planes
        self.layer1, in_planes = _make_layer(block, in_planes, planes[0], layers[0])
        self.layer2, in_planes = _make_layer(block, in_planes, planes[1], layers[1], stride=2)
        self.layer3, in_planes = _make_layer(block, in_planes, planes[2], layers[2], stride=2)
        self.layer4, in_planes = _make_layer(block, in_planes, planes[3], layers[3], stride=2)
        self.avgpool = nn.AdaptiveAvgPool3d((1, 1, 1))
        self.fc = nn.Linear(in_planes, n_classes)
        _init_weights(self)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        x = self.avgpool(x)
        return self.fc(torch.flatten(x, 1))


def _read_state_dict(weights_path: Path) -> Dict[str, torch.Tensor]:
    try:
        raw = torch.load(weights_path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise WeightLoadError(f"cannot read checkpoint {weights_path}: {e}") from e
    if isinstance(raw, dict) and isinstance(raw.get("state_dict"), dict):
        raw = raw["state_dict"]
    if not isinstance(raw, dict):
        raise WeightLoadError(f"{weights_path}: no state dict found")
    state = {}
    for key, value in raw.items():
        if key.startswith("module."):
            key = key[len("module."):]
        state[key] = value
    return state


def load_pretrained(model: nn.Module, weights_path: Optional[PathLike]) -> nn.Module:
    """
    Copy every parameter and buffer except the decision layer from a checkpoint.

    Accepts raw state dicts or dicts holding one under "state_dict", with or
    without a "module." prefix. Any missing, unexpected or differently shaped
    tensor outside ``fc`` raises WeightLoadError; the model keeps its fresh
    decision layer.
    """
    if not weights_path or not Path(weights_path).is_file():
        raise MissingWeights(f"pretrained weights not found: {weights_path}")
    weights_path = Path(weights_path)
    checkpoint = {k: v for k, v in _read_state_dict(weights_path).items()
                  if not k.startswith(DECISION_LAYER + ".")}
    target = model.state_dict()

    conv1 = checkpoint.get("conv1.weight")
    if conv1 is not None and conv1.shape[1] != target["conv1.weight"].shape[1]:
        raise WeightLoadError(f"first convolution expects {conv1.shape[1]} input channels, "
                              f"model has {target['conv1.weight'].shape[1]}")
    for key, value in target.items():
        if key.startswith(DECISION_LAYER + "."):
            continue
        if key not in checkpoint:
            if key.endswith("num_batches_tracked"):
                continue
            raise WeightLoadError(f"checkpoint is missing '{key}'")
        if tuple(checkpoint[key].shape) != tuple(value.shape):
            raise WeightLoadError(f"shape mismatch for '{key}': checkpoint {tuple(checkpoint[key].shape)}, "
                                  f"model {tuple(value.shape)}")
    unexpected = sorted(set(checkpoint) - set(target))
    if unexpected:
        raise WeightLoadError(f"checkpoint has unexpected tensors: {', '.join(unexpected[:5])}")

    model.load_state_dict(checkpoint, strict=False)
    console.info(f"Loaded pretrained weights from {weights_path.name} ({len(checkpoint)} tensors)")
    return model


def build_resnet3d(depth: int, pretrained: bool = False, weights_path: Optional[PathLike] = None,
                   widen_factor: float = 1.0) -> ResNet3d:
    if depth not in RESNET_LAYOUTS:
        raise ConfigError(f"unsupported 3D-ResNet depth {depth} (expected one of {sorted(RESNET_LAYOUTS)})")
    block, layers = RESNET_LAYOUTS[depth]
    model = ResNet3d(block, layers, widen_factor=widen_factor)
    if pretrained:
        load_pretrained(model, weights_path)
    return model


def build_model(spec: ModelSpec) -> nn.Module:
    if spec.arch is Arch.HYBRID_DECOVNET:
        model = build_hybrid_decovnet(spec.hybrid_config())
    else:
        model = build_resnet3d(spec.depth, pretrained=spec.pretrained, weights_path=spec.weights_path,
                               widen_factor=spec.width_multiplier)
    console.debug(f"Built {spec.arch.display_name} ({parameter_count(model):,} parameters)")
    return model


def parameter_count(model: nn.Module) -> int:
    return int(sum(p.numel() for p in model.parameters()))


def input_channels(model: nn.Module) -> int:
    """Channel count of the first convolution"""
    for m in model.modules():
        if isinstance(m, nn.Conv3d):
            return m.in_channels
    raise ConfigError("model has no 3D convolution")


# --- Forward / probabilities ---

def _as_batch(batch: Union[torch.Tensor, np.ndarray]) -> torch.Tensor:
    x = torch.as_tensor(batch, dtype=torch.float32)
    return x[None] if x.ndim == 4 else x


def _first_nonfinite_layer(model: nn.Module, x: torch.Tensor) -> str:
    if not torch.isfinite(x).all():
        return "input"
    found: List[str] = []
    handles = []

    def _hook(name):
        def fn(_module, _inputs, output):
            if not found and isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
                found.append(name)
        return fn

    for name, module in model.named_modules():
        if name and not list(module.children()):
            handles.append(module.register_forward_hook(_hook(name)))
    try:
        with torch.no_grad():
            model(x)
    finally:
        for h in handles:
            h.remove()
    return found[0] if found else "output"


def forward(model: nn.Module, batch: Union[torch.Tensor, np.ndarray]) -> torch.Tensor:
    """
    Logits (B, 2) for a (B, 3, D, H, W) batch (a single (3, D, H, W) volume is
    promoted to B=1). Runs without gradients; callers put the model in eval mode.
    Raises NumericalError naming the first layer with non-finite output.
    """
    x = _as_batch(batch)
    with torch.no_grad():
        logits = model(x)
    if not torch.isfinite(logits).all():
        layer = _first_nonfinite_layer(model, x)
        raise NumericalError(f"non-finite values first produced by layer '{layer}'", layer=layer)
    return logits


def probs(logits: Union[torch.Tensor, np.ndarray]) -> np.ndarray:
    """Row-wise softmax in float64"""
    t = torch.as_tensor(logits).to(torch.float64)
    if t.ndim == 1:
        t = t[None]
    return torch.softmax(t, dim=1).numpy()


# --- Checkpoints ---

class CheckpointMeta(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model_id: str
    arch: Arch
    config: Dict[str, Any]  # ModelSpec dump
    seed: int = 0
    epochs_trained: int = 0
    best_epoch: int = -1
    best_val_macro_f1: float = 0.0
    data_fingerprint: str = ""
    param_count: int = 0
    width_multiplier: float = 1.0
    input_shape: List[int] = Field(default_factory=list)  # (C, D, H, W)
    scenario: str = ""
    created_with: str = VERSION

    def model_spec(self) -> ModelSpec:
        # weights come from the checkpoint, never from a pretrained file
        return ModelSpec.model_validate({**self.config, "pretrained": False, "weights_path": None})


class TrainedModel(BaseModel):
    """A network together with the metadata it was saved with"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    module: nn.Module
    meta: CheckpointMeta

    @property
    def model_id(self) -> str:
        return self.meta.model_id

    @property
    def input_shape(self) -> Optional[Tuple[int, ...]]:
        return tuple(self.meta.input_shape) if self.meta.input_shape else None


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(model: nn.Module, meta: CheckpointMeta, path: PathLike) -> Path:
    """Write <path> (state dict) and its JSON sidecar next to it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    with open(sidecar_path(path), 'w', encoding='utf-8') as f:
        f.write(meta.model_dump_json(indent=2))
    return path


def load_checkpoint(path: PathLike) -> TrainedModel:
    path = Path(path)
    if not path.is_file():
        raise MissingPath(f"checkpoint not found: {path}")
    meta_file = sidecar_path(path)
    if not meta_file.is_file():
        raise MissingPath(f"checkpoint sidecar not found: {meta_file}")
    with open(meta_file, 'r', encoding='utf-8') as f:
        meta = CheckpointMeta.model_validate_json(f.read())
    model = build_model(meta.model_spec())
    try:
        model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    except RuntimeError as e:
        raise WeightLoadError(f"{path}: {e}") from e
    model.eval()
    return TrainedModel(module=model, meta=meta)
