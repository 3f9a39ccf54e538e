# core/augmentation.py
"""
Volume augmentation shared by training and test-time augmentation.

The menu is an albumentations pipeline run on one volume at a time: the
grayscale channel goes in as the image (depth slices as image channels) and
the lung and infection channels go in as masks. Geometric transforms
(rotation, flips, grid shuffle) move image and masks with the same parameters
on every depth slice; photometric transforms (multiplicative noise,
brightness, contrast) are image-only, so masks are never rescaled.

Each call takes exactly one draw from the caller's generator and uses it to
seed the pipeline, so one seed always yields the same output.
"""
from typing import Annotated, List, Tuple

import albumentations as A
import cv2
import numpy as np
from albumentations.core.transforms_interface import BasicTransform
from pydantic import BaseModel, ConfigDict, Field

from core.models import FusedVolume

Probability = Annotated[float, Field(ge=0.0, le=1.0)]


class AugmentationSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rotation_p: Probability = 0.2
    rotation_deg: Tuple[float, float] = (-40.0, 40.0)
    hflip_p: Probability = 0.2
    vflip_p: Probability = 0.2
    multiplicative_noise_p: Probability = 0.2
    noise_range: Tuple[float, float] = (0.9, 1.1)
    brightness_p: Probability = 0.2
    brightness_limit: float = Field(default=0.2, ge=0.0)
    brightness_contrast_p: Probability = 0.2
    brightness_contrast_limits: Tuple[float, float] = (0.2, 0.2)  # (brightness, contrast)
    contrast_p: Probability = 0.2
    contrast_limit: float = Field(default=0.2, ge=0.0)
    grid_shuffle_p: Probability = 0.2
    grid: Tuple[int, int] = (3, 3)

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        """Every transform disabled"""
        return cls(rotation_p=0.0, hflip_p=0.0, vflip_p=0.0, multiplicative_noise_p=0.0,
                   brightness_p=0.0, brightness_contrast_p=0.0, contrast_p=0.0, grid_shuffle_p=0.0)

    @property
    def is_identity(self) -> bool:
        return all(p == 0.0 for p in (self.rotation_p, self.hflip_p, self.vflip_p,
                                      self.multiplicative_noise_p, self.brightness_p,
                                      self.brightness_contrast_p, self.contrast_p,
                                      self.grid_shuffle_p))


def build_transforms(spec: AugmentationSpec) -> List[BasicTransform]:
    """The menu in application order; masks follow the geometric transforms with linear interpolation"""
    b_lim, c_lim = spec.brightness_contrast_limits
    return [
        A.Rotate(limit=spec.rotation_deg, interpolation=cv2.INTER_LINEAR, mask_interpolation=cv2.INTER_LINEAR,
                 border_mode=cv2.BORDER_CONSTANT, fill=0, fill_mask=0, p=spec.rotation_p),
        A.HorizontalFlip(p=spec.hflip_p),
        A.VerticalFlip(p=spec.vflip_p),
        A.MultiplicativeNoise(multiplier=spec.noise_range, p=spec.multiplicative_noise_p),  # one factor per volume
        A.RandomBrightnessContrast(brightness_limit=(-spec.brightness_limit, spec.brightness_limit),
                                   contrast_limit=(0.0, 0.0), p=spec.brightness_p),
        A.RandomBrightnessContrast(brightness_limit=(-b_lim, b_lim), contrast_limit=(-c_lim, c_lim),
                                   p=spec.brightness_contrast_p),
        A.RandomBrightnessContrast(brightness_limit=(0.0, 0.0),
                                   contrast_limit=(-spec.contrast_limit, spec.contrast_limit), p=spec.contrast_p),
        A.RandomGridShuffle(grid=spec.grid, p=spec.grid_shuffle_p),
    ]


def build_pipeline(spec: AugmentationSpec, seed: int) -> A.Compose:
    return A.Compose(build_transforms(spec), seed=seed)


def _to_hwc(channel: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(channel.transpose(1, 2, 0))


def _from_hwc(channel: np.ndarray) -> np.ndarray:
    return np.asarray(channel, dtype=np.float32).transpose(2, 0, 1)


def augment(volume: FusedVolume, spec: AugmentationSpec, rng: np.random.Generator) -> FusedVolume:
    """Apply the augmentation menu to one volume; output clamped to [0,1], shape unchanged"""
    seed = int(rng.integers(0, 2**32))
    if spec.is_identity:
        return FusedVolume(data=np.array(volume.data, dtype=np.float32, copy=True), scan_id=volume.scan_id)

    data = np.asarray(volume.data, dtype=np.float32)
    out = build_pipeline(spec, seed)(image=_to_hwc(data[0]), masks=[_to_hwc(data[1]), _to_hwc(data[2])])
    lung, infection = out["masks"]
    fused = np.stack([_from_hwc(out["image"]), _from_hwc(lung), _from_hwc(infection)])
    np.clip(fused, 0.0, 1.0, out=fused)
    return FusedVolume(data=np.ascontiguousarray(fused), scan_id=volume.scan_id)
