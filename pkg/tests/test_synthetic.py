import numpy as np
import pytest

from core.errors import ConfigError
from core.models import ScanLabel, Split
from core.scan_io import load_scan, read_manifest
from core.synthetic import PhantomSpec, generate_dataset, generate_phantom


def test_phantom_is_deterministic_per_seed():
    spec = PhantomSpec(seed=11, label=ScanLabel.COVID, height=32, width=32)
    a, _ = generate_phantom(spec)
    b, _ = generate_phantom(spec)
    assert a.n_slices == b.n_slices
    assert all(np.array_equal(x, y) for x, y in zip(a.slices, b.slices))
    assert all(np.array_equal(x, y) for x, y in zip(a.infection_masks, b.infection_masks))


def test_slice_count_drawn_from_range():
    for seed in range(5):
        scan, _ = generate_phantom(PhantomSpec(seed=seed, label=ScanLabel.NON_COVID, height=16, width=16,
                                               n_slices_range=(16, 20)))
        assert 16 <= scan.n_slices <= 20


def test_noncovid_has_no_infection():
    scan, label = generate_phantom(PhantomSpec(seed=5, label=ScanLabel.NON_COVID, n_slices=16, height=32, width=32))
    assert label is ScanLabel.NON_COVID
    assert max(int(m.max()) for m in scan.infection_masks) == 0
    assert sum(int(m.sum()) for m in scan.lung_masks) > 0


def test_class_invariants_hold_for_many_seeds():
    for seed in range(100):
        scan, _ = generate_phantom(PhantomSpec(seed=seed, label=ScanLabel.COVID, n_slices=16, height=32, width=32))
        lung = np.stack(scan.lung_masks).astype(bool)
        infection = np.stack(scan.infection_masks).astype(bool)
        assert infection.any(), seed
        assert not (infection & ~lung).any(), seed

        scan, _ = generate_phantom(PhantomSpec(seed=seed, label=ScanLabel.NON_COVID, n_slices=16, height=32, width=32))
        assert not any(m.any() for m in scan.infection_masks), seed
        assert any(m.any() for m in scan.lung_masks), seed


def test_blobs_are_brighter_than_lung():
    for seed in range(100):
        spec = PhantomSpec(seed=seed, label=ScanLabel.COVID, n_slices=16, height=32, width=32)
        scan, _ = generate_phantom(spec)
        gray = np.stack(scan.slices)
        lung = np.stack(scan.lung_masks).astype(bool)
        infection = np.stack(scan.infection_masks).astype(bool)
        gap = gray[infection].mean() - gray[lung & ~infection].mean()
        assert gap > 3 * spec.noise_sigma, seed


def test_blob_radius_is_validated():
    with pytest.raises(ValueError):
        PhantomSpec(seed=0, label=ScanLabel.COVID, blob_radius=(0.1, 0.05))
    with pytest.raises(ValueError):
        PhantomSpec(seed=0, label=ScanLabel.COVID, blob_radius=(0.0, 0.05))


def test_bad_phantom_settings_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        generate_dataset(2, seed=0, out_root=tmp_path, size=16, n_slices_range=(30, 20))
    with pytest.raises(ConfigError):
        generate_dataset(0, seed=0, out_root=tmp_path, size=16)


def test_values_in_unit_range():
    scan, _ = generate_phantom(PhantomSpec(seed=9, label=ScanLabel.COVID, n_slices=16, height=32, width=32,
                                           noise_sigma=0.3))
    gray = np.stack(scan.slices)
    assert gray.min() >= 0.0 and gray.max() <= 1.0


def test_spec_rejects_blobs_for_noncovid():
    with pytest.raises(ValueError):
        PhantomSpec(seed=0, label=ScanLabel.NON_COVID, infection_blob_count=(1, 2))


def test_dataset_layout_and_splits(tmp_path):
    manifest = generate_dataset(20, seed=3, out_root=tmp_path, size=16, n_slices_range=(16, 17), max_workers=2)
    assert len(manifest.entries) == 40
    for label in (ScanLabel.COVID, ScanLabel.NON_COVID):
        counts = {split: sum(1 for e in manifest.by_split(split) if e.label is label)
                  for split in (Split.TRAIN1, Split.VAL1, Split.TEST)}
        assert counts == {Split.TRAIN1: 14, Split.VAL1: 3, Split.TEST: 3}
    assert not manifest.by_split(Split.TRAIN2, Split.VAL2)

    on_disk = read_manifest(tmp_path / "manifest.csv")
    assert [e.scan_id for e in on_disk.entries] == [e.scan_id for e in manifest.entries]
    first = on_disk.entries[0]
    scan = load_scan(first.scan_path, tmp_path / "masks", scan_id=first.scan_id)
    assert scan.has_masks and scan.shape == (16, 16)


def test_dataset_is_deterministic(tmp_path):
    a = generate_dataset(4, seed=8, out_root=tmp_path / "a", size=16, n_slices_range=(16, 16))
    b = generate_dataset(4, seed=8, out_root=tmp_path / "b", size=16, n_slices_range=(16, 16))
    assert [(e.scan_id, e.split) for e in a.entries] == [(e.scan_id, e.split) for e in b.entries]
    sid = a.entries[0].scan_id
    assert (tmp_path / "a" / "scans" / sid / "0.png").read_bytes() == \
        (tmp_path / "b" / "scans" / sid / "0.png").read_bytes()


def test_domain_shift_adds_second_domain(tmp_path):
    manifest = generate_dataset(8, seed=1, out_root=tmp_path, size=16, n_slices_range=(16, 16),
                                domain_shift=True, n_per_class_b=5)
    train2, val2 = manifest.by_split(Split.TRAIN2), manifest.by_split(Split.VAL2)
    assert len(train2) == 6 and len(val2) == 4
    assert all(e.scan_id.startswith("b_") for e in train2 + val2)
