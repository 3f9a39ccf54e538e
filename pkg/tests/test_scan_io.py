import numpy as np
import pytest
from PIL import Image

from core.errors import (BadSplit, DuplicateId, InconsistentShape, ManifestParseError, MissingManifest,
                         MissingMask, MissingPath, NoSlices)
from core.models import FusedVolume, PredictionMode, PredictionRecord, ScanLabel, Split
from core.scan_io import (load_scan, read_manifest, read_predictions, read_volume, volume_path,
                          write_predictions, write_scan, write_volume)
from tests.conftest import make_phantom


def _png(path, value, shape=(8, 8)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full(shape, value, dtype=np.uint8)).save(path)


def test_slices_sorted_numerically(tmp_path):
    scan_dir = tmp_path / "scan"
    for name, value in (("10", 30), ("2", 20), ("1", 10)):
        _png(scan_dir / f"{name}.png", value)
    scan = load_scan(scan_dir)
    assert [round(float(s[0, 0]) * 255) for s in scan.slices] == [10, 20, 30]
    assert scan.scan_id == "scan"
    assert all(s.dtype == np.float32 for s in scan.slices)


def test_empty_directory_is_no_slices(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(NoSlices):
        load_scan(tmp_path / "empty")


def test_mismatched_slice_shapes(tmp_path):
    _png(tmp_path / "s" / "0.png", 0, (8, 8))
    _png(tmp_path / "s" / "1.png", 0, (8, 9))
    with pytest.raises(InconsistentShape):
        load_scan(tmp_path / "s")


def test_masks_are_binarized_and_required(tmp_path):
    _png(tmp_path / "scans" / "a" / "0.png", 100)
    _png(tmp_path / "scans" / "a" / "1.png", 100)
    for kind in ("lung", "infection"):
        _png(tmp_path / "masks" / kind / "a" / "0.png", 200)
        _png(tmp_path / "masks" / kind / "a" / "1.png", 100)
    scan = load_scan(tmp_path / "scans" / "a", tmp_path / "masks")
    assert scan.lung_masks[0].max() == 1 and scan.lung_masks[1].max() == 0

    (tmp_path / "masks" / "infection" / "a" / "1.png").unlink()
    with pytest.raises(MissingMask):
        load_scan(tmp_path / "scans" / "a", tmp_path / "masks")


def test_written_scan_loads_back(tmp_path):
    scan = make_phantom(3, ScanLabel.COVID, size=16, n_slices=16)
    write_scan(scan, tmp_path / "scans", tmp_path / "masks")
    loaded = load_scan(tmp_path / "scans" / scan.scan_id, tmp_path / "masks")
    assert loaded.n_slices == scan.n_slices
    assert np.abs(np.stack(loaded.slices) - np.stack(scan.slices)).max() <= 0.5 / 255 + 1e-6
    assert np.array_equal(np.stack(loaded.infection_masks), np.stack(scan.infection_masks))


MANIFEST = """scan_id,scan_path,label,split
a,scans/a,1,train1
b,scans/b,0,val1
c,/abs/c,,test
"""


def test_read_manifest_resolves_relative_paths(tmp_path):
    (tmp_path / "manifest.csv").write_text(MANIFEST)
    manifest = read_manifest(tmp_path / "manifest.csv")
    assert [e.scan_id for e in manifest.entries] == ["a", "b", "c"]
    assert manifest.get("a").scan_path == str(tmp_path / "scans" / "a")
    assert manifest.get("c").scan_path == "/abs/c"
    assert manifest.get("c").label is None
    assert manifest.get("a").label is ScanLabel.COVID
    assert manifest.class_counts(Split.TRAIN1)[ScanLabel.COVID] == 1


@pytest.mark.parametrize("body, error, line", [
    ("a,x,1,train1\na,y,0,val1\n", DuplicateId, 3),
    ("a,x,1,train9\n", BadSplit, 2),
    ("a,x,,train1\n", ManifestParseError, 2),
    ("a,x,2,train1\n", ManifestParseError, 2),
])
def test_manifest_errors_carry_line(tmp_path, body, error, line):
    path = tmp_path / "m.csv"
    path.write_text("scan_id,scan_path,label,split\n" + body)
    with pytest.raises(error) as info:
        read_manifest(path)
    assert info.value.line == line


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingManifest):
        read_manifest(tmp_path / "nope.csv")


def test_predictions_file(tmp_path):
    records = [
        PredictionRecord.from_probs("a", (0.25, 0.75), mode=PredictionMode.TTA),
        PredictionRecord.from_probs("b", (0.5, 0.5)),
    ]
    path = write_predictions(records, tmp_path / "preds.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "scan_id,prob_noncovid,prob_covid,predicted,mode"
    assert lines[1] == "a,0.25000000,0.75000000,1,tta"
    assert lines[2] == "b,0.50000000,0.50000000,0,single"
    loaded = read_predictions(path)
    assert [r.predicted for r in loaded] == [ScanLabel.COVID, ScanLabel.NON_COVID]


def test_prediction_column_must_match_probs(tmp_path):
    path = tmp_path / "preds.csv"
    path.write_text("scan_id,prob_noncovid,prob_covid,predicted,mode\na,0.9,0.1,1,single\n")
    with pytest.raises(ManifestParseError):
        read_predictions(path)


def test_volume_file_layout(tmp_path):
    data = np.random.default_rng(0).random((3, 4, 5, 6)).astype(np.float32)
    path = write_volume(FusedVolume(data=data, scan_id="vol_1"), volume_path(tmp_path, "vol_1"))
    raw = path.read_bytes()
    assert raw[:4] == b"CVOL"
    assert len(raw) == 4 + 8 + 16 + 4 + len("vol_1") + data.size * 4
    volume = read_volume(path)
    assert volume.scan_id == "vol_1"
    assert np.array_equal(volume.data, data)


def test_volume_errors(tmp_path):
    with pytest.raises(MissingPath):
        read_volume(tmp_path / "missing.cvol")
    (tmp_path / "bad.cvol").write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(ManifestParseError):
        read_volume(tmp_path / "bad.cvol")


@pytest.mark.parametrize("cut", [6, 12, 20, 30, 36])
def test_truncated_volume_header(tmp_path, cut):
    data = np.zeros((3, 2, 2, 2), dtype=np.float32)
    raw = write_volume(FusedVolume(data=data, scan_id="vol_2"), volume_path(tmp_path, "vol_2")).read_bytes()
    (tmp_path / "short.cvol").write_bytes(raw[:cut])
    with pytest.raises(ManifestParseError):
        read_volume(tmp_path / "short.cvol")


def test_truncated_volume_payload(tmp_path):
    data = np.zeros((3, 2, 2, 2), dtype=np.float32)
    raw = write_volume(FusedVolume(data=data, scan_id="vol_3"), volume_path(tmp_path, "vol_3")).read_bytes()
    (tmp_path / "short.cvol").write_bytes(raw[:-3])
    with pytest.raises(InconsistentShape):
        read_volume(tmp_path / "short.cvol")
