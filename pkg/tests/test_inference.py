import math

import numpy as np
import pytest
import torch.nn as nn

from core.augmentation import AugmentationSpec
from core.errors import EmptyEnsemble, ShapeError
from core.inference import TTASpec, average_probs, ensemble_predict, predict, predict_many, predict_tta, tta_copies
from core.models import PredictionMode, ScanLabel
from core.networks import Arch, CheckpointMeta, TrainedModel
from tests.conftest import ConstantLogits


def _constant(p_noncovid, p_covid):
    return ConstantLogits([math.log(p_noncovid), math.log(p_covid)])


def _on_simplex(record):
    p0, p1 = record.probs
    return p0 >= 0 and p1 >= 0 and abs(p0 + p1 - 1) <= 1e-6


def test_single_prediction(tiny_model, covid_volume):
    a = predict(tiny_model, covid_volume)
    b = predict(tiny_model, covid_volume)
    assert _on_simplex(a)
    assert a.probs == b.probs
    assert a.mode is PredictionMode.SINGLE
    assert a.model_ids == ["HybridDeCoVNet"]


def test_tie_goes_to_noncovid(covid_volume):
    record = predict(ConstantLogits([3.0, 3.0]), covid_volume)
    assert record.probs == (0.5, 0.5)
    assert record.predicted is ScanLabel.NON_COVID


def test_shape_checks(covid_volume):
    meta = CheckpointMeta(model_id="m", arch=Arch.HYBRID_DECOVNET, config={}, input_shape=[3, 8, 32, 32])
    with pytest.raises(ShapeError):
        predict(TrainedModel(module=ConstantLogits([0.0, 1.0]), meta=meta), covid_volume)
    gray_only = nn.Sequential(nn.Conv3d(1, 1, kernel_size=1))
    with pytest.raises(ShapeError):
        predict(gray_only, covid_volume)


def test_trained_model_id_is_reported(covid_volume):
    meta = CheckpointMeta(model_id="r18-s0", arch=Arch.RESNET3D_18, config={},
                          input_shape=list(covid_volume.shape))
    record = predict(TrainedModel(module=_constant(0.3, 0.7), meta=meta), covid_volume)
    assert record.model_ids == ["r18-s0"]
    assert record.predicted is ScanLabel.COVID


# --- TTA ---

def test_identity_tta_equals_single_prediction(tiny_model, covid_volume):
    spec = TTASpec(n_augmentations=4, augmentation=AugmentationSpec.identity())
    assert predict_tta(tiny_model, covid_volume, spec).probs == predict(tiny_model, covid_volume).probs


def test_tta_average_matches_recomputation(tiny_model, covid_volume):
    spec = TTASpec(n_augmentations=10, seed=7)
    record = predict_tta(tiny_model, covid_volume, spec)
    assert record.mode is PredictionMode.TTA
    assert _on_simplex(record)

    individual = [np.asarray(predict(tiny_model, copy).probs) for copy in tta_copies(covid_volume, spec)]
    total = np.zeros(2)
    for p in reversed(individual):
        total += p
    assert np.allclose(record.probs, total / len(individual), atol=1e-12, rtol=0)


def test_tta_is_reproducible(tiny_model, noncovid_volume):
    spec = TTASpec(n_augmentations=3, seed=1)
    assert predict_tta(tiny_model, noncovid_volume, spec).probs == \
        predict_tta(tiny_model, noncovid_volume, spec).probs
    copies = tta_copies(noncovid_volume, spec)
    assert len(copies) == 3
    assert all(c.scan_id == noncovid_volume.scan_id and c.shape == noncovid_volume.shape for c in copies)
    again = tta_copies(noncovid_volume, spec)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(copies, again))


# --- ensemble ---

def test_singleton_and_duplicate_ensembles(tiny_model, covid_volume):
    single = predict(tiny_model, covid_volume)
    assert ensemble_predict([tiny_model], covid_volume).probs == single.probs
    triple = ensemble_predict([tiny_model] * 3, covid_volume)
    assert np.allclose(triple.probs, single.probs, atol=1e-12, rtol=0)
    assert triple.mode is PredictionMode.ENSEMBLE
    assert len(triple.model_ids) == 3


def test_ensemble_averages_probabilities(covid_volume):
    record = ensemble_predict([_constant(0.6, 0.4), _constant(0.2, 0.8)], covid_volume)
    assert record.probs[1] == pytest.approx(0.6, abs=1e-6)
    assert record.predicted is ScanLabel.COVID


def test_ensemble_ignores_member_order(covid_volume):
    members = [_constant(0.6, 0.4), _constant(0.2, 0.8), _constant(0.45, 0.55), _constant(0.9, 0.1)]
    a = ensemble_predict(members, covid_volume)
    b = ensemble_predict(members[::-1], covid_volume)
    c = ensemble_predict([members[2], members[0], members[3], members[1]], covid_volume)
    assert a.probs == b.probs == c.probs


def test_unanimous_members_decide_the_ensemble(covid_volume):
    covid = ensemble_predict([_constant(0.4, 0.6), _constant(0.1, 0.9), _constant(0.3, 0.7)], covid_volume)
    assert covid.predicted is ScanLabel.COVID
    noncovid = ensemble_predict([_constant(0.6, 0.4), _constant(0.8, 0.2)], covid_volume)
    assert noncovid.predicted is ScanLabel.NON_COVID


def test_ensemble_with_tta(tiny_model, covid_volume):
    spec = TTASpec(n_augmentations=2)
    record = ensemble_predict([tiny_model, tiny_model], covid_volume, tta=spec)
    assert record.mode is PredictionMode.ENSEMBLE_TTA
    assert np.allclose(record.probs, predict_tta(tiny_model, covid_volume, spec).probs, atol=1e-12, rtol=0)


def test_empty_ensembles(covid_volume):
    with pytest.raises(EmptyEnsemble):
        ensemble_predict([], covid_volume)
    with pytest.raises(EmptyEnsemble):
        predict_many([], [covid_volume])
    with pytest.raises(EmptyEnsemble):
        average_probs([])


def test_predict_many_modes(tiny_model, covid_volume, noncovid_volume):
    volumes = [covid_volume, noncovid_volume]
    single = predict_many([tiny_model], volumes)
    assert [r.scan_id for r in single] == [covid_volume.scan_id, noncovid_volume.scan_id]
    assert {r.mode for r in single} == {PredictionMode.SINGLE}
    assert {r.mode for r in predict_many([tiny_model], volumes, tta=TTASpec(n_augmentations=2))} == \
        {PredictionMode.TTA}
    assert {r.mode for r in predict_many([tiny_model, tiny_model], volumes)} == {PredictionMode.ENSEMBLE}
