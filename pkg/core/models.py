# core/models.py
from enum import Enum, IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from core.errors import DuplicateId, InconsistentShape, ManifestParseError, MissingMask

PROB_TOLERANCE = 1e-6


class ScanLabel(IntEnum):
    NON_COVID = 0
    COVID = 1

    @property
    def display_name(self) -> str:
        return "Non-Covid-19" if self is ScanLabel.NON_COVID else "Covid-19"


class Split(str, Enum):
    TRAIN1 = "train1"
    VAL1 = "val1"
    TRAIN2 = "train2"
    VAL2 = "val2"
    TEST = "test"

    @property
    def is_labeled(self) -> bool:
        """Train/val splits must carry labels; test labels are optional"""
        return self is not Split.TEST


class PredictionMode(str, Enum):
    SINGLE = "single"
    TTA = "tta"
    ENSEMBLE = "ensemble"
    ENSEMBLE_TTA = "ensemble_tta"


def _check_binary(mask: np.ndarray) -> bool:
    return bool(((mask == 0) | (mask == 1)).all())


class SlicedScan(BaseModel):
    """One CT scan as an ordered stack of 2D slices in [0,1], with optional masks"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    scan_id: str
    slices: List[np.ndarray]
    lung_masks: Optional[List[np.ndarray]] = None
    infection_masks: Optional[List[np.ndarray]] = None
    source_path: str = ""
    warnings: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_invariants(self):
        if not self.slices:
            return self
        shape = self.slices[0].shape
        if len(shape) != 2:
            raise InconsistentShape(f"{self.scan_id}: slices must be 2D, got shape {shape}")
        for k, s in enumerate(self.slices):
            if s.shape != shape:
                raise InconsistentShape(f"{self.scan_id}: slice {k} has shape {s.shape}, expected {shape}")
            if s.size and (s.min() < 0.0 or s.max() > 1.0):
                raise ValueError(f"{self.scan_id}: slice {k} values outside [0,1]")
        for kind, masks in (("lung", self.lung_masks), ("infection", self.infection_masks)):
            if masks is None:
                continue
            if len(masks) != len(self.slices):
                raise MissingMask(f"{self.scan_id}: {len(masks)} {kind} masks for {len(self.slices)} slices")
            for k, m in enumerate(masks):
                if m.shape != shape:
                    raise InconsistentShape(f"{self.scan_id}: {kind} mask {k} has shape {m.shape}, expected {shape}")
                if not _check_binary(m):
                    raise ValueError(f"{self.scan_id}: {kind} mask {k} is not binary")
        return self

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.slices[0].shape if self.slices else (0, 0)

    @property
    def has_masks(self) -> bool:
        return self.lung_masks is not None and self.infection_masks is not None

    def subset(self, indices: Sequence[int]) -> "SlicedScan":
        """Scan restricted to the given slice indices (order as given)"""
        pick = lambda seq: [seq[i] for i in indices] if seq is not None else None
        return SlicedScan(
            scan_id=self.scan_id,
            slices=pick(self.slices),
            lung_masks=pick(self.lung_masks),
            infection_masks=pick(self.infection_masks),
            source_path=self.source_path,
            warnings=list(self.warnings),
        )


class FusedVolume(BaseModel):
    """Fixed-size (channel=3, depth, height, width) tensor: gray, lung, infection"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray
    scan_id: str

    @model_validator(mode="after")
    def _check_layout(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise InconsistentShape(f"{self.scan_id}: expected (3, D, H, W), got {self.data.shape}")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ValueError(f"{self.scan_id}: volume values outside [0,1]")
        return self

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)


class ManifestEntry(BaseModel):
    scan_id: str
    scan_path: str
    label: Optional[ScanLabel] = None
    split: Split


class Manifest(BaseModel):
    entries: List[ManifestEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_entries(self):
        seen = set()
        for row, entry in enumerate(self.entries, start=2):
            if entry.scan_id in seen:
                raise DuplicateId(f"duplicate scan_id '{entry.scan_id}'", line=row)
            seen.add(entry.scan_id)
            if entry.split.is_labeled and entry.label is None:
                raise ManifestParseError(f"split '{entry.split.value}' requires a label ('{entry.scan_id}')", line=row)
        return self

    def by_split(self, *splits: Split) -> List[ManifestEntry]:
        wanted = {Split(s) for s in splits}
        return [e for e in self.entries if e.split in wanted]

    def get(self, scan_id: str) -> Optional[ManifestEntry]:
        for e in self.entries:
            if e.scan_id == scan_id:
                return e
        return None

    def labels(self) -> Dict[str, ScanLabel]:
        return {e.scan_id: e.label for e in self.entries if e.label is not None}

    def class_counts(self, split: Split) -> Dict[ScanLabel, int]:
        counts = {ScanLabel.COVID: 0, ScanLabel.NON_COVID: 0}
        for e in self.by_split(split):
            if e.label is not None:
                counts[e.label] += 1
        return counts


def decide(probs: Iterable[float]) -> ScanLabel:
    """Argmax over the two classes, ties broken toward NonCovid (index 0)"""
    p = list(probs)
    return ScanLabel.COVID if p[1] > p[0] else ScanLabel.NON_COVID


class PredictionRecord(BaseModel):
    scan_id: str
    probs: Tuple[float, float]
    predicted: ScanLabel
    mode: PredictionMode = PredictionMode.SINGLE
    model_ids: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_simplex(self):
        p0, p1 = self.probs
        if p0 < 0.0 or p1 < 0.0:
            raise ValueError(f"{self.scan_id}: negative probability {self.probs}")
        if abs(p0 + p1 - 1.0) > PROB_TOLERANCE:
            raise ValueError(f"{self.scan_id}: probabilities sum to {p0 + p1}, not 1")
        if self.predicted != decide(self.probs):
            raise ValueError(f"{self.scan_id}: predicted {self.predicted.name} is not argmax of {self.probs}")
        return self

    @classmethod
    def from_probs(cls, scan_id: str, probs: Sequence[float],
                   mode: PredictionMode = PredictionMode.SINGLE,
                   model_ids: Optional[List[str]] = None) -> "PredictionRecord":
        p = (float(probs[0]), float(probs[1]))
        return cls(scan_id=scan_id, probs=p, predicted=decide(p), mode=mode,
                   model_ids=list(model_ids or []))
