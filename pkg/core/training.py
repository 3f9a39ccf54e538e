# core/training.py
import csv
import math
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch.optim.lr_scheduler import LRScheduler
from torch.utils.data import DataLoader, Dataset

from core import console
from core.augmentation import AugmentationSpec, augment
from core.errors import ConfigError, DivergedError, EmptySplit, MissingPath, RangeError
from core.evaluation import metrics_from_labels
from core.models import FusedVolume, Manifest, ManifestEntry, ScanLabel, Split, decide
from core.networks import (Arch, CheckpointMeta, ModelSpec, build_model, parameter_count,
                           probs, save_checkpoint, sidecar_path)
from core.scan_io import read_volume, volume_path
from core.utils import PathLike, derive_seed, ensure_dir, fingerprint

LOG_HEADER = ["epoch", "lr", "train_loss", "val_acc", "val_macro_f1"]

# (batch_size, epochs) when not set explicitly
ARCH_DEFAULTS = {
    Arch.HYBRID_DECOVNET: (16, 80),
    Arch.RESNET3D_18: (16, 80),
    Arch.RESNET3D_50: (8, 40),
}


class Scenario(str, Enum):
    SCENARIO1 = "scenario1"  # train on train1
    SCENARIO2 = "scenario2"  # train on train1 + train2


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    arch: ModelSpec = Field(default_factory=ModelSpec)
    batch_size: Optional[int] = Field(default=None, ge=1)  # per-architecture default when None
    epochs: Optional[int] = Field(default=None, ge=1)
    lr0: float = Field(default=1e-4, gt=0.0)
    warmup_epochs: int = Field(default=5, ge=0)
    optimizer: str = "adam"
    loss: str = "cross_entropy"
    seed: int = 0
    scenario: Scenario = Scenario.SCENARIO1
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    num_workers: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer '{self.optimizer}' (only 'adam')")
        if self.loss != "cross_entropy":
            raise ConfigError(f"unsupported loss '{self.loss}' (only 'cross_entropy')")
        if self.warmup_epochs >= self.run_epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.run_epochs})")
        return self

    @property
    def run_batch_size(self) -> int:
        return self.batch_size if self.batch_size is not None else ARCH_DEFAULTS[self.arch.arch][0]

    @property
    def run_epochs(self) -> int:
        return self.epochs if self.epochs is not None else ARCH_DEFAULTS[self.arch.arch][1]


# --- Learning-rate schedule ---

def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """
    Warm-up cosine learning rate for a 0-based epoch.

    lr0*(e+1)/warmup during warm-up, then lr0*0.5*(1 + cos(pi*(e - warmup)/(epochs - warmup))).
    """
    epochs, warmup = cfg.run_epochs, cfg.warmup_epochs
    if not 0 <= epoch < epochs:
        raise RangeError(f"epoch {epoch} outside [0, {epochs})")
    if epoch < warmup:
        return cfg.lr0 * (epoch + 1) / warmup
    progress = (epoch - warmup) / (epochs - warmup)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


class WarmupCosineSchedule(LRScheduler):
    """Epoch-wise scheduler that sets every group's lr to lr_at(epoch)"""

    def __init__(self, optimizer: torch.optim.Optimizer, cfg: TrainConfig):
        self.cfg = cfg
        super().__init__(optimizer)

    def get_lr(self) -> List[float]:
        epoch = min(self.last_epoch, self.cfg.run_epochs - 1)
        return [lr_at(epoch, self.cfg) for _ in self.optimizer.param_groups]


# --- Data ---

class VolumeSample(BaseModel):
    """A labeled volume, either on disk (path) or in memory (volume)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    scan_id: str
    label: ScanLabel
    path: Optional[str] = None
    volume: Optional[FusedVolume] = None

    def load(self) -> FusedVolume:
        return self.volume if self.volume is not None else read_volume(self.path)


class VolumeDataset(Dataset):
    """
    Samples -> (tensor, label). With an augmentation spec, each item is
    augmented with an RNG seeded from (seed, scan_id, epoch), so results do
    not depend on worker count or loading order.
    """

    def __init__(self, samples: Sequence[VolumeSample], augmentation: Optional[AugmentationSpec] = None,
                 seed: int = 0):
        self.samples = list(samples)
        self.augmentation = augmentation
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index: int):
        sample = self.samples[index]
        volume = sample.load()
        if self.augmentation is not None:
            rng = np.random.default_rng(derive_seed(self.seed, sample.scan_id, self.epoch))
            volume = augment(volume, self.augmentation, rng)
        return torch.from_numpy(np.ascontiguousarray(volume.data, dtype=np.float32)), int(sample.label)


def select_training_pool(manifest: Manifest, scenario: Scenario) -> Tuple[List[ManifestEntry], List[ManifestEntry]]:
    """(train entries, validation entries); validation is always val1"""
    if Scenario(scenario) is Scenario.SCENARIO2:
        train_entries = manifest.by_split(Split.TRAIN1, Split.TRAIN2)
    else:
        train_entries = manifest.by_split(Split.TRAIN1)
    return train_entries, manifest.by_split(Split.VAL1)


def samples_from_entries(entries: Sequence[ManifestEntry], volumes_dir: PathLike) -> List[VolumeSample]:
    samples, missing = [], []
    for e in entries:
        path = volume_path(volumes_dir, e.scan_id)
        if not path.is_file():
            missing.append(e.scan_id)
        samples.append(VolumeSample(scan_id=e.scan_id, label=e.label, path=str(path)))
    if missing:
        raise MissingPath(f"no preprocessed volume in {volumes_dir} for: {', '.join(missing[:10])}")
    return samples


# --- Training loop ---

class EpochLog(BaseModel):
    epoch: int
    lr: float
    train_loss: float
    val_acc: float
    val_macro_f1: float


class TrainResult(BaseModel):
    model_id: str
    checkpoint_path: str
    log_path: str
    best_epoch: int
    best_val_macro_f1: float
    best_val_acc: float
    history: List[EpochLog]


def seed_everything(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _class_counts(samples: Sequence[VolumeSample]) -> str:
    covid = sum(1 for s in samples if s.label is ScanLabel.COVID)
    return f"{covid} Covid / {len(samples) - covid} Non-Covid"


def evaluate_samples(model: nn.Module, samples: Sequence[VolumeSample], batch_size: int) -> Tuple[float, float]:
    """(accuracy, macro F1) of an eval-mode pass without augmentation"""
    model.eval()
    loader = DataLoader(VolumeDataset(samples), batch_size=batch_size, shuffle=False)
    truth, predicted = [], []
    with torch.no_grad():
        for x, y in loader:
            for p in probs(model(x)):
                predicted.append(int(decide(p)))
            truth.extend(int(v) for v in y)
    report = metrics_from_labels(truth, predicted, split="validation")
    return report.accuracy, report.macro_f1


def train(cfg: TrainConfig, train_set: Sequence[VolumeSample], val_set: Sequence[VolumeSample],
          out_dir: PathLike) -> TrainResult:
    """
    Train one model; after every epoch evaluate on val_set and overwrite
    best.pt when validation macro F1 strictly improves (ties go to higher
    accuracy, then to the earlier epoch). Writes best.pt, best.json and
    train_log.csv under out_dir.
    """
    if not train_set:
        raise EmptySplit("training split is empty")
    if not val_set:
        raise EmptySplit("validation split is empty")
    out_dir = ensure_dir(out_dir)
    ckpt_path = out_dir / "best.pt"
    log_path = out_dir / "train_log.csv"

    seed_everything(cfg.seed)
    model = build_model(cfg.arch)
    model_id = cfg.arch.model_id or f"{cfg.arch.arch.value}-{cfg.scenario.value}-s{cfg.seed}"
    console.info(f"Training {cfg.arch.arch.display_name} ({model_id}, {parameter_count(model):,} parameters)")
    console.info(f"  train: {_class_counts(train_set)} | val: {_class_counts(val_set)}")

    dataset = VolumeDataset(train_set, augmentation=cfg.augmentation, seed=cfg.seed)
    loader = DataLoader(dataset, batch_size=cfg.run_batch_size, shuffle=True,
                        num_workers=cfg.num_workers,
                        generator=torch.Generator().manual_seed(cfg.seed))
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    schedule = WarmupCosineSchedule(optimizer, cfg)
    criterion = nn.CrossEntropyLoss()

    meta = CheckpointMeta(
        model_id=model_id,
        arch=cfg.arch.arch,
        config=cfg.arch.model_dump(mode="json"),
        seed=cfg.seed,
        data_fingerprint=fingerprint(sorted(f"{s.scan_id}:{int(s.label)}" for s in [*train_set, *val_set])),
        param_count=parameter_count(model),
        width_multiplier=cfg.arch.width_multiplier,
        input_shape=list(train_set[0].load().shape),
        scenario=cfg.scenario.value,
    )

    history: List[EpochLog] = []
    best: Optional[Tuple[float, float]] = None
    with open(log_path, 'w', encoding='utf-8', newline='') as log_file:
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for epoch in console.progress(range(cfg.run_epochs), desc="Epochs", unit="epoch"):
            lr = optimizer.param_groups[0]["lr"]
            dataset.set_epoch(epoch)
            model.train()
            total, seen = 0.0, 0
            for step, (x, y) in enumerate(loader):
                optimizer.zero_grad()
                loss = criterion(model(x), y)
                if not torch.isfinite(loss):
                    raise DivergedError(epoch, step, float(loss))
                loss.backward()
                optimizer.step()
                total += float(loss) * len(y)
                seen += len(y)
                console.debug(f"  epoch {epoch} step {step}: loss {float(loss):.5f}")
            schedule.step()

            val_acc, val_f1 = evaluate_samples(model, val_set, cfg.run_batch_size)
            entry = EpochLog(epoch=epoch, lr=lr, train_loss=total / seen, val_acc=val_acc, val_macro_f1=val_f1)
            history.append(entry)
            writer.writerow([epoch, repr(lr), repr(entry.train_loss), repr(val_acc), repr(val_f1)])
            log_file.flush()

            if best is None or (val_f1, val_acc) > best:
                best = (val_f1, val_acc)
                meta.best_epoch = epoch
                meta.best_val_macro_f1 = val_f1
                meta.epochs_trained = epoch + 1
                save_checkpoint(model, meta, ckpt_path)
                console.debug(f"  epoch {epoch}: new best macro F1 {val_f1:.4f}")
            console.info(f"Epoch {epoch + 1}/{cfg.run_epochs}  lr {lr:.2e}  loss {entry.train_loss:.4f}  "
                         f"val acc {val_acc:.4f}  val F1 {val_f1:.4f}")

    meta.epochs_trained = cfg.run_epochs
    with open(sidecar_path(ckpt_path), 'w', encoding='utf-8') as f:
        f.write(meta.model_dump_json(indent=2))
    console.success(f"Best epoch {meta.best_epoch + 1}: val macro F1 {meta.best_val_macro_f1:.4f} -> {ckpt_path}")
    return TrainResult(model_id=model_id, checkpoint_path=str(ckpt_path), log_path=str(log_path),
                       best_epoch=meta.best_epoch, best_val_macro_f1=best[0], best_val_acc=best[1],
                       history=history)


def read_train_log(path: PathLike) -> List[EpochLog]:
    path = Path(path)
    if not path.is_file():
        raise MissingPath(f"training log not found: {path}")
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return [EpochLog(**{k: float(v) if k != "epoch" else int(v) for k, v in row.items()})
                for row in csv.DictReader(f)]


def overfit(spec: ModelSpec, volumes: torch.Tensor, labels: torch.Tensor, steps: int = 200,
            lr: float = 1e-3, seed: int = 0) -> List[float]:
    """Cross-entropy per step while fitting one fixed batch (gradient-flow check)"""
    seed_everything(seed)
    model = build_model(spec)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    criterion = nn.CrossEntropyLoss()
    losses = []
    for step in range(steps):
        optimizer.zero_grad()
        loss = criterion(model(volumes), labels)
        if not torch.isfinite(loss):
            raise DivergedError(0, step, float(loss))
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
    return losses
