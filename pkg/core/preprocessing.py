# core/preprocessing.py
"""
Slice filtering, channel fusion and fixed-size resampling.

The three stages run in this order for every scan:
filter_slices -> fuse_channels -> resize_volume. The fused stack is resized
as a whole, so after trilinear interpolation the mask channels carry soft
values in [0,1] rather than hard 0/1.
"""
import functools
from enum import Enum
from pathlib import Path
from typing import List, Literal, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field

from core import console
from core.errors import EmptyVolume, MissingMask, MissingModel
from core.models import FusedVolume, SlicedScan
from core.utils import PathLike


class SliceFilterKind(str, Enum):
    MASK_AREA = "mask_area"
    LEARNED2D = "learned2d"
    NONE = "none"


class SliceFilterSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: SliceFilterKind = SliceFilterKind.MASK_AREA
    area_threshold: float = Field(default=0.005, ge=0.0, lt=1.0)  # fraction of slice pixels
    model_path: Optional[str] = None


class ResizeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    depth: int = Field(default=64, ge=8)
    height: int = Field(default=224, ge=8)
    width: int = Field(default=224, ge=8)
    gray_interp: Literal["trilinear"] = "trilinear"
    mask_interp: Literal["trilinear-after-fusion"] = "trilinear-after-fusion"

    @property
    def target(self):
        return (self.depth, self.height, self.width)


# --- Learned 2D slice filter ---

class SliceFilterNet(nn.Module):
    """Small 2D CNN scoring whether a grayscale slice shows lung"""

    INPUT_SIZE = 64

    def __init__(self):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, 8, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(8),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(8, 16, kernel_size=3, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(16, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(torch.flatten(self.features(x), 1)).squeeze(1)


def _slice_batch(slices: Sequence[np.ndarray]) -> torch.Tensor:
    x = torch.from_numpy(np.stack(slices).astype(np.float32))[:, None]
    size = SliceFilterNet.INPUT_SIZE
    return F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)


def slice_filter_probs(model: SliceFilterNet, slices: Sequence[np.ndarray]) -> np.ndarray:
    """Lung-presence probability per slice"""
    model.eval()
    with torch.no_grad():
        return torch.sigmoid(model(_slice_batch(slices))).numpy().astype(np.float64)


def train_slice_filter(scans: Sequence[SlicedScan], area_threshold: float = 0.005,
                       epochs: int = 5, batch_size: int = 64, lr: float = 1e-3,
                       seed: int = 0) -> SliceFilterNet:
    """
    Fit a SliceFilterNet on masked scans.

    Targets come from the lung masks: a slice is positive when its lung area
    fraction reaches area_threshold.
    """
    slices: List[np.ndarray] = []
    targets: List[float] = []
    for scan in scans:
        if scan.lung_masks is None:
            raise MissingMask(f"{scan.scan_id}: training the slice filter needs lung masks")
        for s, m in zip(scan.slices, scan.lung_masks):
            slices.append(s)
            targets.append(1.0 if float(m.mean()) >= area_threshold else 0.0)

    torch.manual_seed(seed)
    model = SliceFilterNet()
    x_all = _slice_batch(slices)
    y_all = torch.tensor(targets, dtype=torch.float32)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    criterion = nn.BCEWithLogitsLoss()
    generator = torch.Generator().manual_seed(seed)
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(slices), generator=generator)
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            optimizer.zero_grad()
            loss = criterion(model(x_all[idx]), y_all[idx])
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        console.debug(f"slice filter epoch {epoch}: loss {total / len(order):.4f}")
    model.eval()
    return model


def save_slice_filter(model: SliceFilterNet, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    return path


@functools.lru_cache(maxsize=4)
def load_slice_filter(path: str) -> SliceFilterNet:
    """Load (and cache) a slice filter; the returned model is shared read-only"""
    if not Path(path).is_file():
        raise MissingModel(f"slice filter model not found: {path}")
    model = SliceFilterNet()
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model


# --- Pipeline stages ---

def filter_slices(scan: SlicedScan, spec: SliceFilterSpec,
                  model: Optional[SliceFilterNet] = None) -> SlicedScan:
    """
    Keep slices that show lung, preserving order.

    mask_area keeps slices whose lung-mask area fraction >= spec.area_threshold;
    learned2d keeps slices whose filter probability >= 0.5. If nothing
    survives, the original scan is returned with a warning attached.
    """
    if spec.kind is SliceFilterKind.NONE:
        return scan
    if spec.kind is SliceFilterKind.MASK_AREA:
        if scan.lung_masks is None:
            raise MissingMask(f"{scan.scan_id}: mask_area filtering needs lung masks")
        keep = [k for k, m in enumerate(scan.lung_masks) if float(m.mean()) >= spec.area_threshold]
    else:
        if model is None:
            if not spec.model_path:
                raise MissingModel(f"{scan.scan_id}: learned2d filtering needs a model")
            model = load_slice_filter(str(spec.model_path))
        probs = slice_filter_probs(model, scan.slices)
        keep = [k for k, p in enumerate(probs) if p >= 0.5]

    if not keep:
        message = f"{scan.scan_id}: no slice passed the {spec.kind.value} filter; keeping all {scan.n_slices}"
        console.warn(message)
        return scan.model_copy(update={"warnings": scan.warnings + [message]})
    console.debug(f"{scan.scan_id}: kept {len(keep)}/{scan.n_slices} slices")
    return scan.subset(keep)


def fuse_channels(scan: SlicedScan) -> np.ndarray:
    """Stack grayscale, lung and infection into a (3, N, H, W) float32 array"""
    if not scan.has_masks:
        raise MissingMask(f"{scan.scan_id}: fusion needs lung and infection masks")
    gray = np.stack(scan.slices).astype(np.float32)
    lung = np.stack(scan.lung_masks).astype(np.float32)
    infection = np.stack(scan.infection_masks).astype(np.float32)
    return np.stack([gray, lung, infection])


def resize_volume(fused: np.ndarray, spec: ResizeSpec, scan_id: str = "") -> FusedVolume:
    """
    Trilinearly resample every channel to spec's (depth, height, width).

    Corners are aligned, so a volume already at the target size is returned
    unchanged and linear ramps keep their endpoints. Output is clamped to [0,1].
    """
    if fused.ndim != 4 or fused.shape[1] == 0:
        raise EmptyVolume(f"{scan_id}: cannot resize a volume of shape {fused.shape}")
    x = torch.from_numpy(np.ascontiguousarray(fused, dtype=np.float32))[None]
    if tuple(x.shape[2:]) != spec.target:
        x = F.interpolate(x, size=spec.target, mode="trilinear", align_corners=True)
    data = x[0].clamp(0.0, 1.0).numpy()
    return FusedVolume(data=np.ascontiguousarray(data), scan_id=scan_id)


def preprocess_scan(scan: SlicedScan, filter_spec: SliceFilterSpec, resize_spec: ResizeSpec,
                    filter_model: Optional[SliceFilterNet] = None) -> FusedVolume:
    """filter -> fuse -> resize"""
    kept = filter_slices(scan, filter_spec, model=filter_model)
    return resize_volume(fuse_channels(kept), resize_spec, scan_id=scan.scan_id)
