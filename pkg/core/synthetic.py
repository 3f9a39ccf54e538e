# core/synthetic.py
"""
Phantom CT volumes with exact lung and infection masks.

Each phantom is a body cylinder holding two dark ellipsoidal lungs; Covid
phantoms add 1-4 bright spherical blobs clipped to the lung ellipsoids. The
masks are the generating geometry itself, so every downstream stage can be
checked against ground truth. Phantoms are deliberately easy to separate:
blob intensity sits far above lung intensity (several noise sigmas).
"""
import concurrent.futures
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from core import console
from core.errors import ConfigError, GeometryError, IoError
from core.models import Manifest, ManifestEntry, ScanLabel, SlicedScan, Split
from core.scan_io import write_manifest, write_scan
from core.utils import PathLike, derive_seed

MAX_BLOB_RETRIES = 50
MIN_BLOB_RADIUS = 2.0  # voxels


class PhantomSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    seed: int
    label: ScanLabel
    n_slices: Optional[int] = Field(default=None, ge=16)  # sampled from n_slices_range when None
    n_slices_range: Tuple[int, int] = (40, 80)
    height: int = Field(default=224, ge=16)
    width: int = Field(default=224, ge=16)
    infection_blob_count: Optional[Tuple[int, int]] = None  # Covid: (1, 4), NonCovid: (0, 0)
    blob_radius: Tuple[float, float] = (0.05, 0.09)  # fraction of the slice size (in-plane) and slice count (z)
    noise_sigma: float = Field(default=0.05, ge=0.0)
    body_intensity: float = 0.6
    lung_intensity: float = 0.15
    blob_intensity: float = 0.85
    intensity_offset: float = 0.0  # domain-shift knob, added to every tissue intensity

    @model_validator(mode="after")
    def _fill_defaults(self):
        lo, hi = self.n_slices_range
        if lo < 16 or hi < lo:
            raise ValueError(f"n_slices_range must satisfy 16 <= lo <= hi, got {self.n_slices_range}")
        r_lo, r_hi = self.blob_radius
        if not 0.0 < r_lo <= r_hi <= 0.25:
            raise ValueError(f"blob_radius must satisfy 0 < lo <= hi <= 0.25, got {self.blob_radius}")
        if self.infection_blob_count is None:
            self.infection_blob_count = (1, 4) if self.label is ScanLabel.COVID else (0, 0)
        b_lo, b_hi = self.infection_blob_count
        if self.label is ScanLabel.NON_COVID and b_hi != 0:
            raise ValueError("NonCovid phantoms carry no infection blobs")
        if self.label is ScanLabel.COVID and (b_lo < 1 or b_hi < b_lo):
            raise ValueError(f"Covid phantoms need 1 <= blobs, got {self.infection_blob_count}")
        return self


def _ellipsoid(zz, yy, xx, center, radii) -> np.ndarray:
    cz, cy, cx = center
    rz, ry, rx = radii
    return ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _lung_geometry(n: int, h: int, w: int):
    """Centers and radii of the two lung ellipsoids (z, y, x)"""
    radii = (0.35 * n, 0.25 * h, 0.14 * w)
    left = (n / 2.0, h / 2.0, w / 2.0 - 0.2 * w)
    right = (n / 2.0, h / 2.0, w / 2.0 + 0.2 * w)
    return [(left, radii), (right, radii)]


def generate_phantom(spec: PhantomSpec) -> Tuple[SlicedScan, ScanLabel]:
    """
    Generate one phantom scan with masks from its spec.

    Deterministic under spec.seed. Gaussian noise is added to the grayscale
    only; masks are exact. Raises GeometryError when a blob cannot be placed
    inside the lungs after MAX_BLOB_RETRIES attempts.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_slices if spec.n_slices is not None else int(rng.integers(spec.n_slices_range[0], spec.n_slices_range[1] + 1))
    h, w = spec.height, spec.width
    zz, yy, xx = np.ogrid[:n, :h, :w]
    zz = zz + 0.5
    yy = yy + 0.5
    xx = xx + 0.5

    body = np.broadcast_to(((yy - h / 2.0) / (0.38 * h)) ** 2 + ((xx - w / 2.0) / (0.45 * w)) ** 2 <= 1.0, (n, h, w))
    lungs = _lung_geometry(n, h, w)
    lung = np.zeros((n, h, w), dtype=bool)
    for center, radii in lungs:
        lung |= _ellipsoid(zz, yy, xx, center, radii)
    lung &= body

    infection = np.zeros((n, h, w), dtype=bool)
    b_lo, b_hi = spec.infection_blob_count
    n_blobs = int(rng.integers(b_lo, b_hi + 1)) if b_hi > 0 else 0
    for _ in range(n_blobs):
        for _attempt in range(MAX_BLOB_RETRIES):
            center, radii = lungs[int(rng.integers(0, len(lungs)))]
            # uniform point inside the unit ball, scaled to the ellipsoid
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction) + 1e-12
            r = rng.random() ** (1.0 / 3.0) * 0.8
            bz, by, bx = (c + r * d * rad for c, d, rad in zip(center, direction, radii))
            radius_xy = max(MIN_BLOB_RADIUS, float(rng.uniform(*spec.blob_radius)) * min(h, w))
            radius_z = max(MIN_BLOB_RADIUS, float(rng.uniform(*spec.blob_radius)) * n)
            blob = _ellipsoid(zz, yy, xx, (bz, by, bx), (radius_z, radius_xy, radius_xy)) & lung
            if blob.any():
                infection |= blob
                break
        else:
            raise GeometryError(f"could not place infection blob inside lungs after {MAX_BLOB_RETRIES} attempts (seed {spec.seed})")

    if spec.label is ScanLabel.COVID and not infection.any():
        raise GeometryError(f"Covid phantom without infection voxels (seed {spec.seed})")

    gray = np.zeros((n, h, w), dtype=np.float64)
    gray[body] = spec.body_intensity + spec.intensity_offset
    gray[lung] = spec.lung_intensity + spec.intensity_offset
    gray[infection] = spec.blob_intensity + spec.intensity_offset
    if spec.noise_sigma > 0:
        gray += rng.normal(0.0, spec.noise_sigma, size=gray.shape)
    gray = np.clip(gray, 0.0, 1.0).astype(np.float32)

    lung_u8 = lung.astype(np.uint8)
    inf_u8 = infection.astype(np.uint8)
    scan = SlicedScan(
        scan_id=f"phantom_{spec.seed}",
        slices=[gray[k] for k in range(n)],
        lung_masks=[lung_u8[k] for k in range(n)],
        infection_masks=[inf_u8[k] for k in range(n)],
        source_path="synthetic",
    )
    return scan, spec.label


# --- Dataset generation ---

def _phantom_spec(**fields) -> PhantomSpec:
    try:
        return PhantomSpec(**fields)
    except ValidationError as e:
        raise ConfigError(f"invalid phantom settings: {e}") from e


def _split_counts(n: int, fractions: Tuple[float, ...]) -> List[int]:
    """Round-half-up split of n items; the last part takes the remainder"""
    counts = [int(math.floor(n * f + 0.5)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


def _assign_splits(ids: List[str], splits: Tuple[Split, ...], fractions: Tuple[float, ...],
                   rng: np.random.Generator) -> Dict[str, Split]:
    order = list(rng.permutation(len(ids)))
    out: Dict[str, Split] = {}
    start = 0
    for split, count in zip(splits, _split_counts(len(ids), fractions)):
        for idx in order[start:start + count]:
            out[ids[idx]] = split
        start += count
    return out


def generate_dataset(n_per_class: int, seed: int, out_root: PathLike,
                     size: int = 224,
                     n_slices_range: Tuple[int, int] = (40, 80),
                     noise_sigma: float = 0.05,
                     domain_shift: bool = False,
                     n_per_class_b: Optional[int] = None,
                     domain_offset: float = 0.08,
                     max_workers: int = 4) -> Manifest:
    """
    Write a phantom dataset in the slice-directory layout and return its manifest.

    Layout: <out_root>/scans/<scan_id>/<k>.png, <out_root>/masks/{lung,infection}/<scan_id>/<k>.png,
    <out_root>/manifest.csv. Each class is split 70/15/15 into train1/val1/test.
    With domain_shift, a second domain (intensity offset domain_offset) adds
    n_per_class_b scans per class split 60/40 into train2/val2.
    """
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    out_root = Path(out_root)
    scans_root = out_root / "scans"
    masks_root = out_root / "masks"
    try:
        scans_root.mkdir(parents=True, exist_ok=True)
        masks_root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"output root not writable: {out_root}: {e}") from e

    split_rng = np.random.default_rng(derive_seed(seed, "splits"))
    jobs: List[Tuple[str, PhantomSpec, Split]] = []
    for label in (ScanLabel.COVID, ScanLabel.NON_COVID):
        prefix = "covid" if label is ScanLabel.COVID else "noncovid"
        ids = [f"{prefix}_{i:04d}" for i in range(n_per_class)]
        assigned = _assign_splits(ids, (Split.TRAIN1, Split.VAL1, Split.TEST), (0.70, 0.15, 0.15), split_rng)
        for sid in ids:
            spec = _phantom_spec(seed=derive_seed(seed, "phantom", sid), label=label,
                                 n_slices_range=n_slices_range, height=size, width=size,
                                 noise_sigma=noise_sigma)
            jobs.append((sid, spec, assigned[sid]))

    if domain_shift:
        n_b = n_per_class_b if n_per_class_b is not None else max(1, n_per_class // 4)
        for label in (ScanLabel.COVID, ScanLabel.NON_COVID):
            prefix = "b_covid" if label is ScanLabel.COVID else "b_noncovid"
            ids = [f"{prefix}_{i:04d}" for i in range(n_b)]
            assigned = _assign_splits(ids, (Split.TRAIN2, Split.VAL2), (0.60, 0.40), split_rng)
            for sid in ids:
                spec = _phantom_spec(seed=derive_seed(seed, "phantom", sid), label=label,
                                     n_slices_range=n_slices_range, height=size, width=size,
                                     noise_sigma=noise_sigma, intensity_offset=domain_offset)
                jobs.append((sid, spec, assigned[sid]))

    def _make(job) -> ManifestEntry:
        sid, spec, split = job
        scan, label = generate_phantom(spec)
        scan = scan.model_copy(update={"scan_id": sid})
        scan_dir = write_scan(scan, scans_root, masks_root)
        return ManifestEntry(scan_id=sid, scan_path=str(scan_dir), label=label, split=split)

    entries: Dict[str, ManifestEntry] = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = {executor.submit(_make, job): job[0] for job in jobs}
        with console.progress(total=len(jobs), desc="Phantoms", unit="scan") as pbar:
            for future in concurrent.futures.as_completed(futures):
                entries[futures[future]] = future.result()
                pbar.update(1)

    split_order = {s: i for i, s in enumerate(Split)}
    ordered = sorted(entries.values(), key=lambda e: (split_order[e.split], e.scan_id))
    manifest = Manifest(entries=ordered)
    write_manifest(manifest, out_root / "manifest.csv")
    console.success(f"Wrote {len(ordered)} phantoms to {out_root}")
    return manifest
