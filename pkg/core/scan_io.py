# core/scan_io.py
import csv
import struct
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
from PIL import Image

from core.errors import (BadSplit, DuplicateId, InconsistentShape, IoError, ManifestParseError, MissingPath,
                         MissingManifest, MissingMask, NoSlices)
from core.models import (FusedVolume, Manifest, ManifestEntry, PredictionMode, PredictionRecord,
                         ScanLabel, SlicedScan, Split)
from core.utils import PathLike, numeric_sort_key

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
MANIFEST_HEADER = ["scan_id", "scan_path", "label", "split"]
PREDICTION_HEADER = ["scan_id", "prob_noncovid", "prob_covid", "predicted", "mode"]

# Binary volume file: little-endian header then float32 voxels, channel-major
VOLUME_MAGIC = b"CVOL"
VOLUME_VERSION = 1
VOLUME_SUFFIX = ".cvol"


def _slice_files(directory: Path) -> List[Path]:
    files = [p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(files, key=numeric_sort_key)


def _read_gray(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def _read_mask(path: Path) -> np.ndarray:
    return (_read_gray(path) > 127).astype(np.uint8)


def load_scan(scan_path: PathLike, masks_root: Optional[PathLike] = None,
              scan_id: Optional[str] = None) -> SlicedScan:
    """
    Load a scan directory of 8-bit grayscale slices into a SlicedScan.

    Slices are ordered by the numeric value of their filename stems and scaled
    to [0,1] by dividing by 255. When masks_root is given, lung and infection
    masks are read from <masks_root>/lung/<scan_id>/ and
    <masks_root>/infection/<scan_id>/ under the same filenames.
    """
    directory = Path(scan_path)
    scan_id = scan_id or directory.name
    if not directory.is_dir():
        raise NoSlices(f"{scan_id}: scan directory not found ({directory})")
    files = _slice_files(directory)
    if not files:
        raise NoSlices(f"{scan_id}: no slice images in {directory}")

    raw = [_read_gray(f) for f in files]
    shape = raw[0].shape
    for f, arr in zip(files, raw):
        if arr.shape != shape:
            raise InconsistentShape(f"{scan_id}: slice {f.name} has shape {arr.shape}, expected {shape}")
    slices = [arr.astype(np.float32) / np.float32(255.0) for arr in raw]

    lung_masks = infection_masks = None
    if masks_root is not None:
        root = Path(masks_root)
        lung_masks, infection_masks = [], []
        for kind, target in (("lung", lung_masks), ("infection", infection_masks)):
            for f in files:
                mask_path = root / kind / scan_id / f.name
                if not mask_path.is_file():
                    raise MissingMask(f"{scan_id}: missing {kind} mask {mask_path}")
                target.append(_read_mask(mask_path))

    return SlicedScan(scan_id=scan_id, slices=slices, lung_masks=lung_masks,
                      infection_masks=infection_masks, source_path=str(directory))


def write_scan(scan: SlicedScan, scans_root: PathLike, masks_root: Optional[PathLike] = None) -> Path:
    """Write a scan (and its masks, if present) in the slice-directory layout; returns the scan dir"""
    scan_dir = Path(scans_root) / scan.scan_id
    try:
        scan_dir.mkdir(parents=True, exist_ok=True)
        for k, s in enumerate(scan.slices):
            pixels = np.clip(np.rint(s * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(pixels).save(scan_dir / f"{k}.png")
        if masks_root is not None and scan.has_masks:
            for kind, masks in (("lung", scan.lung_masks), ("infection", scan.infection_masks)):
                mask_dir = Path(masks_root) / kind / scan.scan_id
                mask_dir.mkdir(parents=True, exist_ok=True)
                for k, m in enumerate(masks):
                    Image.fromarray((m * 255).astype(np.uint8)).save(mask_dir / f"{k}.png")
    except OSError as e:
        raise IoError(f"cannot write scan {scan.scan_id} under {scans_root}: {e}") from e
    return scan_dir


# --- Manifest CSV ---

def _parse_label(token: str, line: int) -> Optional[ScanLabel]:
    token = token.strip()
    if token == "":
        return None
    if token not in ("0", "1"):
        raise ManifestParseError(f"label must be 0, 1 or blank, got '{token}'", line=line)
    return ScanLabel(int(token))


def _parse_split(token: str, line: int) -> Split:
    try:
        return Split(token.strip().lower())
    except ValueError:
        raise BadSplit(f"unknown split '{token}' (expected one of {[s.value for s in Split]})", line=line)


def read_manifest(path: PathLike) -> Manifest:
    """
    Read a manifest CSV (scan_id,scan_path,label,split).

    Relative scan paths are resolved against the manifest's directory.
    Errors carry the 1-based line number (the header is line 1).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingManifest(f"manifest not found: {path}")
    entries: List[ManifestEntry] = []
    seen = set()
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestParseError(f"expected header {','.join(MANIFEST_HEADER)}", line=1)
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestParseError(f"expected {len(MANIFEST_HEADER)} fields, got {len(row)}", line=line)
            scan_id, scan_path, label_tok, split_tok = (cell.strip() for cell in row)
            if not scan_id:
                raise ManifestParseError("empty scan_id", line=line)
            if scan_id in seen:
                raise DuplicateId(f"duplicate scan_id '{scan_id}'", line=line)
            seen.add(scan_id)
            label = _parse_label(label_tok, line)
            split = _parse_split(split_tok, line)
            if split.is_labeled and label is None:
                raise ManifestParseError(f"split '{split.value}' requires a label", line=line)
            resolved = Path(scan_path)
            if not resolved.is_absolute():
                resolved = path.parent / resolved
            entries.append(ManifestEntry(scan_id=scan_id, scan_path=str(resolved), label=label, split=split))
    return Manifest(entries=entries)


def write_manifest(manifest: Manifest, path: PathLike, relative_to: Optional[PathLike] = None) -> Path:
    """Write a manifest CSV; scan paths are made relative to relative_to when possible"""
    path = Path(path)
    base = Path(relative_to) if relative_to is not None else path.parent
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for e in manifest.entries:
                scan_path = Path(e.scan_path)
                try:
                    scan_path = scan_path.relative_to(base)
                except ValueError:
                    pass
                label = "" if e.label is None else str(int(e.label))
                writer.writerow([e.scan_id, scan_path.as_posix(), label, e.split.value])
    except OSError as e:
        raise IoError(f"cannot write manifest {path}: {e}") from e
    return path


# --- Prediction CSV ---

def write_predictions(records: Iterable[PredictionRecord], path: PathLike) -> Path:
    """Write predictions as scan_id,prob_noncovid,prob_covid,predicted,mode"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(PREDICTION_HEADER)
            for r in records:
                writer.writerow([r.scan_id, f"{r.probs[0]:.8f}", f"{r.probs[1]:.8f}",
                                 int(r.predicted), r.mode.value])
    except OSError as e:
        raise IoError(f"cannot write predictions {path}: {e}") from e
    return path


def read_predictions(path: PathLike) -> List[PredictionRecord]:
    """Read a prediction CSV written by write_predictions (duplicates are kept)"""
    path = Path(path)
    if not path.is_file():
        raise MissingManifest(f"predictions file not found: {path}")
    records: List[PredictionRecord] = []
    with open(path, 'r', encoding='utf-8', newline='') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PREDICTION_HEADER:
            raise ManifestParseError(f"expected header {','.join(PREDICTION_HEADER)}", line=1)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PREDICTION_HEADER):
                raise ManifestParseError(f"expected {len(PREDICTION_HEADER)} fields, got {len(row)}", line=line)
            try:
                p0, p1 = float(row[1]), float(row[2])
                mode = PredictionMode(row[4].strip())
                record = PredictionRecord.from_probs(row[0].strip(), (p0, p1), mode=mode)
                predicted = int(row[3])
            except ValueError as e:
                raise ManifestParseError(str(e), line=line) from e
            if int(record.predicted) != predicted:
                raise ManifestParseError(f"predicted column {row[3]} disagrees with probabilities", line=line)
            records.append(record)
    return records


# --- Binary volume files ---

def volume_path(volumes_dir: PathLike, scan_id: str) -> Path:
    return Path(volumes_dir) / f"{scan_id}{VOLUME_SUFFIX}"


def write_volume(volume: FusedVolume, path: PathLike) -> Path:
    """
    Write a FusedVolume as: b"CVOL", uint32 version, uint32 ndim=4, 4×uint32 dims,
    uint32 id length + UTF-8 scan_id, then float32 voxels (C-order), all little-endian.
    """
    path = Path(path)
    data = np.ascontiguousarray(volume.data, dtype="<f4")
    sid = volume.scan_id.encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(VOLUME_MAGIC)
            f.write(struct.pack("<II", VOLUME_VERSION, data.ndim))
            f.write(struct.pack("<4I", *data.shape))
            f.write(struct.pack("<I", len(sid)))
            f.write(sid)
            f.write(data.tobytes(order="C"))
    except OSError as e:
        raise IoError(f"cannot write volume {path}: {e}") from e
    return path


def _unpack(f, fmt: str, path: Path) -> tuple:
    raw = f.read(struct.calcsize(fmt))
    try:
        return struct.unpack(fmt, raw)
    except struct.error as e:
        raise ManifestParseError(f"{path}: truncated volume header") from e


def read_volume(path: PathLike) -> FusedVolume:
    path = Path(path)
    if not path.is_file():
        raise MissingPath(f"volume file not found: {path}")
    with open(path, 'rb') as f:
        if f.read(4) != VOLUME_MAGIC:
            raise ManifestParseError(f"{path}: not a volume file")
        version, ndim = _unpack(f, "<II", path)
        if version != VOLUME_VERSION or ndim != 4:
            raise ManifestParseError(f"{path}: unsupported volume version {version} / ndim {ndim}")
        dims = _unpack(f, "<4I", path)
        (id_len,) = _unpack(f, "<I", path)
        raw_id = f.read(id_len)
        if len(raw_id) != id_len:
            raise ManifestParseError(f"{path}: truncated volume header")
        try:
            scan_id = raw_id.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ManifestParseError(f"{path}: scan id is not UTF-8") from e
        payload = f.read()
    if len(payload) % 4:
        raise InconsistentShape(f"{path}: payload of {len(payload)} bytes is not float32 data")
    data = np.frombuffer(payload, dtype="<f4")
    expected = int(np.prod(dims))
    if data.size != expected:
        raise InconsistentShape(f"{path}: expected {expected} voxels, found {data.size}")
    return FusedVolume(data=data.reshape(dims).astype(np.float32), scan_id=scan_id)
