import numpy as np
import pytest
from sklearn.metrics import accuracy_score, balanced_accuracy_score, f1_score

from core.errors import DuplicatePrediction, EmptySplit, MissingPrediction
from core.evaluation import (compute_metrics, format_value, metrics_from_labels, render_dataset_summary,
                             render_report, row_label)
from core.models import Manifest, ManifestEntry, PredictionMode, PredictionRecord, ScanLabel, Split


def _labels_for(confusion):
    truth, predicted = [], []
    for t in (0, 1):
        for p in (0, 1):
            truth += [t] * confusion[t][p]
            predicted += [p] * confusion[t][p]
    return truth, predicted


def test_known_confusion_matrix():
    report = metrics_from_labels(*_labels_for([[8, 2], [3, 7]]), split="val1")
    assert report.confusion == [[8, 2], [3, 7]]
    assert report.n == 20
    assert report.accuracy == pytest.approx(0.75)
    assert report.f1_per_class[0] == pytest.approx(16 / 21)
    assert report.covid_f1 == pytest.approx(14 / 19)
    assert report.macro_f1 == pytest.approx((16 / 21 + 14 / 19) / 2)
    assert round(report.macro_f1, 4) == 0.7494
    assert not report.warnings


def test_perfect_predictions():
    report = metrics_from_labels([0, 1, 1, 0], [0, 1, 1, 0])
    assert report.accuracy == 1.0 and report.macro_f1 == 1.0


def test_absent_class_gets_zero_f1_and_a_warning():
    report = metrics_from_labels([1, 1, 1], [1, 1, 0], split="val2")
    assert report.accuracy == pytest.approx(2 / 3)
    assert report.covid_f1 == pytest.approx(0.8)
    assert report.f1_per_class[0] == 0.0
    assert report.macro_f1 == pytest.approx(0.4)
    assert len(report.warnings) == 1 and "Non-Covid-19" in report.warnings[0]


def test_zero_precision_and_recall_are_warned_about():
    report = metrics_from_labels([0, 1], [1, 0], split="val1")
    assert report.confusion == [[0, 1], [1, 0]]
    assert report.accuracy == 0.0
    assert report.f1_per_class == (0.0, 0.0) and report.macro_f1 == 0.0
    assert len(report.warnings) == 2
    assert all("precision and recall" in w for w in report.warnings)
    assert "Non-Covid-19" in report.warnings[0]


def test_empty_labels():
    with pytest.raises(EmptySplit):
        metrics_from_labels([], [])


def test_matches_reference_metrics_on_random_labels():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        truth = rng.integers(0, 2, n).tolist()
        predicted = rng.integers(0, 2, n).tolist()
        report = metrics_from_labels(truth, predicted)
        assert report.accuracy == pytest.approx(accuracy_score(truth, predicted), abs=1e-12)
        expected = f1_score(truth, predicted, labels=[0, 1], average="macro", zero_division=0)
        assert report.macro_f1 == pytest.approx(expected, abs=1e-12)


def test_swapping_classes_keeps_macro_scores():
    rng = np.random.default_rng(1)
    truth = rng.integers(0, 2, 40).tolist()
    predicted = rng.integers(0, 2, 40).tolist()
    a = metrics_from_labels(truth, predicted)
    b = metrics_from_labels([1 - t for t in truth], [1 - p for p in predicted])
    assert b.accuracy == pytest.approx(a.accuracy)
    assert b.macro_f1 == pytest.approx(a.macro_f1)
    assert b.f1_per_class == pytest.approx(a.f1_per_class[::-1])


def test_accuracy_is_macro_recall_on_balanced_splits():
    rng = np.random.default_rng(2)
    for _ in range(200):
        per_class = int(rng.integers(1, 20))
        truth = [0] * per_class + [1] * per_class
        predicted = rng.integers(0, 2, 2 * per_class).tolist()
        report = metrics_from_labels(truth, predicted)
        cm = np.array(report.confusion)
        macro_recall = float(np.mean(np.diag(cm) / cm.sum(axis=1)))
        assert report.accuracy == pytest.approx(macro_recall, abs=1e-12)
        assert report.accuracy == pytest.approx(balanced_accuracy_score(truth, predicted), abs=1e-12)


# --- split scoring ---

def _manifest(n=4, split=Split.VAL1):
    return Manifest(entries=[ManifestEntry(scan_id=f"s{i}", scan_path="-", label=ScanLabel(i % 2), split=split)
                             for i in range(n)])


def _prediction(scan_id, covid_prob, mode=PredictionMode.SINGLE):
    return PredictionRecord.from_probs(scan_id, (1 - covid_prob, covid_prob), mode=mode)


def test_compute_metrics_on_split():
    predictions = [_prediction(f"s{i}", 0.9 if i % 2 else 0.1, PredictionMode.TTA) for i in range(4)]
    predictions.append(_prediction("unlabeled_extra", 0.3, PredictionMode.TTA))
    report = compute_metrics(predictions, _manifest(), Split.VAL1)
    assert report.accuracy == 1.0 and report.n == 4
    assert report.split == "val1"
    assert report.mode is PredictionMode.TTA


def test_compute_metrics_errors():
    manifest = _manifest()
    with pytest.raises(MissingPrediction) as info:
        compute_metrics([_prediction("s0", 0.1)], manifest, Split.VAL1)
    assert info.value.scan_ids == ["s1", "s2", "s3"]
    with pytest.raises(DuplicatePrediction):
        compute_metrics([_prediction("s0", 0.1), _prediction("s0", 0.2)], manifest, Split.VAL1)
    with pytest.raises(EmptySplit):
        compute_metrics([], manifest, Split.VAL2)


# --- rendering ---

def test_format_value():
    assert format_value(0.87523) == "87.52"
    assert format_value(0.87523, percent=False) == "0.8752"
    assert format_value(None) == "-"


def test_render_single_row():
    report = metrics_from_labels(*_labels_for([[8, 2], [3, 7]]), split="val1")
    report.row_label = "Hybrid-DeCoVNet"
    csv_text = render_report([report], fmt="csv")
    header, row = csv_text.splitlines()
    assert header == "Model,val1 Accuracy,val1 F1"
    assert row == "Hybrid-DeCoVNet,75.00,74.94"

    text = render_report([report, report.model_copy(update={"split": "val2"})], fmt="text")
    lines = text.splitlines()
    assert len(lines) == 3
    assert len(lines[2].split()) == 5  # label plus four cells


def test_render_empty_and_baseline():
    assert render_report([], fmt="csv") == "Model\n"
    text = render_report([], fmt="text")
    assert text.splitlines()[0].strip() == "Model"

    report = metrics_from_labels([0, 1], [0, 1], split="val1")
    csv_text = render_report([report], fmt="csv", baseline={"val1": 0.77, "val2": 0.69})
    lines = csv_text.splitlines()
    assert lines[0] == "Model,val1 Accuracy,val1 F1,val2 Accuracy,val2 F1"
    assert lines[1] == "Model,100.00,100.00,-,-"
    assert lines[2] == "Baseline,-,77.00,-,69.00"

    with pytest.raises(ValueError):
        render_report([report], fmt="html")


def test_row_labels():
    assert row_label("Hybrid-DeCoVNet", PredictionMode.SINGLE) == "Hybrid-DeCoVNet"
    assert row_label("Hybrid-DeCoVNet", PredictionMode.TTA) == "Hybrid-DeCoVNet + TTA"
    assert row_label("3D-ResNet-18", PredictionMode.ENSEMBLE) == "Ensemble"
    assert row_label("3D-ResNet-18", PredictionMode.ENSEMBLE_TTA) == "Ensemble + TTA"
    assert row_label("X", None) == "X"


def test_dataset_summary():
    entries = [ManifestEntry(scan_id=f"a{i}", scan_path="-", label=ScanLabel(i % 2), split=Split.TRAIN1)
               for i in range(5)]
    entries += [ManifestEntry(scan_id="b0", scan_path="-", label=ScanLabel.COVID, split=Split.VAL2)]
    lines = render_dataset_summary(Manifest(entries=entries), fmt="csv").splitlines()
    assert lines[0] == "Challenge,Train Covid,Train Non-Covid,Val Covid,Val Non-Covid"
    assert lines[1] == "Covid-19 Detection,2,3,0,0"
    assert lines[2] == "Covid-19 Domain Adaptation,0,0,1,0"
