# core/inference.py
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field

from core import console
from core.augmentation import AugmentationSpec, augment
from core.errors import EmptyEnsemble, ShapeError
from core.models import FusedVolume, PredictionMode, PredictionRecord
from core.networks import TrainedModel, forward, input_channels, probs
from core.utils import derive_seed

AnyModel = Union[nn.Module, TrainedModel]


class TTASpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_augmentations: int = Field(default=10, ge=1)
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    seed: int = 0


def _unwrap(model: AnyModel) -> Tuple[nn.Module, Optional[Tuple[int, ...]], str]:
    if isinstance(model, TrainedModel):
        return model.module, model.input_shape, model.model_id
    return model, None, type(model).__name__


def average_probs(vectors: Sequence[np.ndarray]) -> np.ndarray:
    """
    Arithmetic mean of probability vectors.

    Vectors are put in lexicographic order and averaged as v0 + mean(v - v0),
    so the result does not depend on input order and k identical vectors
    average to exactly that vector.
    """
    if not vectors:
        raise EmptyEnsemble("nothing to average")
    stacked = np.asarray([np.asarray(v, dtype=np.float64) for v in vectors])
    order = np.lexsort(stacked.T[::-1])
    stacked = stacked[order]
    base = stacked[0]
    return base + (stacked - base).mean(axis=0)


def predict(model: AnyModel, volume: FusedVolume,
            mode: PredictionMode = PredictionMode.SINGLE) -> PredictionRecord:
    """Single forward pass; predicted = argmax with ties going to NonCovid"""
    module, input_shape, model_id = _unwrap(model)
    if volume.shape[0] != input_channels(module):
        raise ShapeError(f"{volume.scan_id}: volume has {volume.shape[0]} channels, "
                         f"model expects {input_channels(module)}")
    if input_shape is not None and tuple(volume.shape) != tuple(input_shape):
        raise ShapeError(f"{volume.scan_id}: volume shape {volume.shape} != model input {tuple(input_shape)}")
    module.eval()
    p = probs(forward(module, volume.data))[0]
    return PredictionRecord.from_probs(volume.scan_id, p, mode=mode, model_ids=[model_id])


def tta_copies(volume: FusedVolume, spec: TTASpec) -> List[FusedVolume]:
    """Copy k is augmented with an RNG seeded from (spec.seed, scan_id, k)"""
    return [augment(volume, spec.augmentation, np.random.default_rng(derive_seed(spec.seed, volume.scan_id, k)))
            for k in range(spec.n_augmentations)]


def predict_tta(model: AnyModel, volume: FusedVolume, spec: TTASpec) -> PredictionRecord:
    records = [predict(model, copy) for copy in tta_copies(volume, spec)]
    averaged = average_probs([np.asarray(r.probs) for r in records])
    return PredictionRecord.from_probs(volume.scan_id, averaged, mode=PredictionMode.TTA,
                                       model_ids=records[0].model_ids)


def ensemble_predict(models: Sequence[AnyModel], volume: FusedVolume,
                     tta: Optional[TTASpec] = None) -> PredictionRecord:
    """Equal-weight mean of per-model probability vectors (each TTA-averaged when tta is given)"""
    if not models:
        raise EmptyEnsemble("ensemble needs at least one model")
    if tta is None:
        members = [predict(m, volume) for m in models]
        mode = PredictionMode.ENSEMBLE
    else:
        members = [predict_tta(m, volume, tta) for m in models]
        mode = PredictionMode.ENSEMBLE_TTA
    averaged = average_probs([np.asarray(r.probs) for r in members])
    model_ids = [mid for r in members for mid in r.model_ids]
    return PredictionRecord.from_probs(volume.scan_id, averaged, mode=mode, model_ids=model_ids)


def predict_many(models: Sequence[AnyModel], volumes: Iterable[FusedVolume],
                 tta: Optional[TTASpec] = None, total: Optional[int] = None) -> List[PredictionRecord]:
    """
    Predict a stream of volumes. One model gives single/tta records, several
    give ensemble/ensemble_tta records.
    """
    if not models:
        raise EmptyEnsemble("no models to predict with")
    records = []
    for volume in console.progress(volumes, total=total, desc="Predicting", unit="scan"):
        if len(models) > 1:
            records.append(ensemble_predict(models, volume, tta))
        elif tta is not None:
            records.append(predict_tta(models[0], volume, tta))
        else:
            records.append(predict(models[0], volume))
    return records
