# core/evaluation.py
import csv
import io
from collections import Counter
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field
from sklearn.metrics import confusion_matrix

from core import console
from core.errors import DuplicatePrediction, EmptySplit, MissingPrediction
from core.models import Manifest, PredictionMode, PredictionRecord, ScanLabel, Split

MISSING_CELL = "-"
BASELINE_LABEL = "Baseline"
ENSEMBLE_LABEL = "Ensemble"


class MetricsReport(BaseModel):
    split: str
    confusion: List[List[int]]  # rows = truth, cols = predicted, index 0 = NonCovid
    accuracy: float
    f1_per_class: Tuple[float, float]
    macro_f1: float
    n: int
    warnings: List[str] = Field(default_factory=list)
    row_label: str = ""
    mode: Optional[PredictionMode] = None

    @property
    def covid_f1(self) -> float:
        return self.f1_per_class[ScanLabel.COVID]


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def metrics_from_labels(truth: Sequence[int], predicted: Sequence[int], split: str = "") -> MetricsReport:
    """
    Accuracy, per-class F1 and macro F1 from aligned label lists.

    F1 of a class is 0 whenever precision, recall or their sum is 0/0; every
    such case is warned about and recorded on the report.
    """
    if len(truth) != len(predicted):
        raise ValueError(f"{len(truth)} labels vs {len(predicted)} predictions")
    if not truth:
        raise EmptySplit(f"no labeled scans to evaluate in split '{split}'")
    cm = confusion_matrix([int(t) for t in truth], [int(p) for p in predicted], labels=[0, 1])
    n = int(cm.sum())
    warnings: List[str] = []
    f1 = []
    for cls in (0, 1):
        tp = int(cm[cls, cls])
        precision = _ratio(tp, int(cm[:, cls].sum()))
        recall = _ratio(tp, int(cm[cls, :].sum()))
        name = ScanLabel(cls).display_name
        if precision is None or recall is None or precision + recall == 0:
            if precision is None or recall is None:
                which = "precision" if precision is None else "recall"
                message = f"split '{split}': {which} of {name} is 0/0, F1 set to 0"
            else:
                message = f"split '{split}': precision and recall of {name} are both 0, F1 set to 0"
            console.warn(message)
            warnings.append(message)
            f1.append(0.0)
        else:
            f1.append(2 * precision * recall / (precision + recall))
    report = MetricsReport(
        split=split,
        confusion=cm.astype(int).tolist(),
        accuracy=float(np.trace(cm)) / n,
        f1_per_class=(f1[0], f1[1]),
        macro_f1=(f1[0] + f1[1]) / 2.0,
        n=n,
        warnings=warnings,
    )
    console.debug(f"split '{split}': Covid-class F1 {report.covid_f1:.4f}")
    return report


def compute_metrics(predictions: Iterable[PredictionRecord], manifest: Manifest,
                    split: Union[Split, str]) -> MetricsReport:
    """Score predictions against the labeled scans of one split"""
    split = Split(split)
    predictions = list(predictions)
    counts = Counter(p.scan_id for p in predictions)
    duplicates = [sid for sid, c in counts.items() if c > 1]
    if duplicates:
        raise DuplicatePrediction(duplicates)
    by_id = {p.scan_id: p for p in predictions}

    labeled = [e for e in manifest.by_split(split) if e.label is not None]
    if not labeled:
        raise EmptySplit(f"split '{split.value}' has no labeled scans")
    missing = [e.scan_id for e in labeled if e.scan_id not in by_id]
    if missing:
        raise MissingPrediction(missing)

    used = [by_id[e.scan_id] for e in labeled]
    report = metrics_from_labels([int(e.label) for e in labeled], [int(p.predicted) for p in used],
                                 split=split.value)
    modes = {p.mode for p in used}
    if len(modes) == 1:
        report.mode = modes.pop()
    return report


def row_label(name: str, mode: Optional[PredictionMode]) -> str:
    """Report row label for a model name and prediction mode"""
    if mode in (PredictionMode.ENSEMBLE, PredictionMode.ENSEMBLE_TTA):
        name = ENSEMBLE_LABEL
    if mode in (PredictionMode.TTA, PredictionMode.ENSEMBLE_TTA):
        return f"{name} + TTA"
    return name


# --- Rendering ---

def format_value(value: Optional[float], percent: bool = True) -> str:
    if value is None:
        return MISSING_CELL
    return f"{value * 100:.2f}" if percent else f"{value:.4f}"


def _text_table(header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i])
              for i in range(len(header))]
    line = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                   for i, (c, w) in enumerate(zip(cells, widths)))
    out = [line(header), "  ".join("-" * w for w in widths)]
    out += [line(r) for r in rows]
    return "\n".join(out) + "\n"


def _csv_table(header: List[str], rows: List[List[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def render_report(reports: Sequence[MetricsReport], fmt: str = "text", percent: bool = True,
                  splits: Optional[Sequence[str]] = None,
                  baseline: Optional[Dict[str, float]] = None) -> str:
    """
    One row per row label, paired Accuracy / F1 columns per split.

    Splits and rows appear in first-seen order unless ``splits`` is given.
    ``baseline`` maps split -> F1 and adds a Baseline row with no accuracy.
    Missing cells render as "-".
    """
    if splits is None:
        splits = list(dict.fromkeys(r.split for r in reports))
        if baseline:
            splits += [s for s in baseline if s not in splits]
    header = ["Model"]
    for s in splits:
        header += [f"{s} Accuracy", f"{s} F1"]

    cells: Dict[str, Dict[str, MetricsReport]] = {}
    for r in reports:
        cells.setdefault(r.row_label or "Model", {})[r.split] = r
    rows = []
    for label, by_split in cells.items():
        row = [label]
        for s in splits:
            r = by_split.get(s)
            row += [format_value(r.accuracy if r else None, percent),
                    format_value(r.macro_f1 if r else None, percent)]
        rows.append(row)
    if baseline:
        row = [BASELINE_LABEL]
        for s in splits:
            row += [MISSING_CELL, format_value(baseline.get(s), percent)]
        rows.append(row)

    if fmt == "csv":
        return _csv_table(header, rows)
    if fmt != "text":
        raise ValueError(f"unknown report format '{fmt}'")
    return _text_table(header, rows)


def render_dataset_summary(manifest: Manifest, fmt: str = "text") -> str:
    """Per-challenge Covid / Non-Covid counts for the train and validation splits"""
    header = ["Challenge", "Train Covid", "Train Non-Covid", "Val Covid", "Val Non-Covid"]
    rows = []
    for name, train, val in (("Covid-19 Detection", Split.TRAIN1, Split.VAL1),
                             ("Covid-19 Domain Adaptation", Split.TRAIN2, Split.VAL2)):
        t, v = manifest.class_counts(train), manifest.class_counts(val)
        rows.append([name, str(t[ScanLabel.COVID]), str(t[ScanLabel.NON_COVID]),
                     str(v[ScanLabel.COVID]), str(v[ScanLabel.NON_COVID])])
    return _csv_table(header, rows) if fmt == "csv" else _text_table(header, rows)
