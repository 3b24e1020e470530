import os

import numpy as np
import pytest

from voxaging.phantom import (
    ScanRecord,
    VolumeFormatError,
    VolumeStore,
    ellipsoid_levels,
    load_manifest,
    load_volume,
    make_dataset,
    render_volume,
    save_volume,
    subject_from_seed,
    write_manifest,
)


def test_subject_from_seed_deterministic():
    a = subject_from_seed(1234)
    b = subject_from_seed(1234)
    assert a == b


def test_subject_from_seed_distinct():
    assert subject_from_seed(1) != subject_from_seed(2)


def test_subject_param_ranges():
    for seed in np.random.default_rng(0).integers(0, 1 << 60, size=1000):
        p = subject_from_seed(int(seed))
        assert all(0.60 <= v <= 0.80 for v in p.outer_radii)
        assert all(0.12 <= v <= 0.22 for v in p.inner_radii)
        assert all(0.0 <= v < 2 * np.pi for v in p.texture_phase)


def test_inner_strictly_inside_outer_at_all_ages():
    for seed in range(200):
        p = subject_from_seed(seed)
        for t in (0.0, 0.5, 1.0):
            a = np.array(p.outer_radii) * (1 - 0.10 * t)
            b = np.array(p.inner_radii) * (1 + 0.80 * t)
            assert np.all(b < a)


def test_render_deterministic_bitwise():
    p = subject_from_seed(7)
    v1 = render_volume(p, 0.3, (16, 16, 16), noise_sigma=0.02)
    v2 = render_volume(p, 0.3, (16, 16, 16), noise_sigma=0.02)
    assert np.array_equal(v1, v2)


def test_render_age_out_of_range():
    p = subject_from_seed(7)
    with pytest.raises(ValueError):
        render_volume(p, 1.5, (8, 8, 8))


def test_render_corner_is_background():
    p = subject_from_seed(11)
    v = render_volume(p, 0.0, (32, 32, 32), noise_sigma=0.0)
    assert v[0, 0, 0] < 1e-3
    assert v[-1, -1, -1] < 1e-3


def test_aging_monotonicity_against_level_set_oracle():
    grid = (32, 32, 32)
    for seed in (3, 17, 99):
        p = subject_from_seed(seed)
        tissue_counts, vent_counts = [], []
        oracle_tissue, oracle_vent = [], []
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            v = render_volume(p, t, grid, noise_sigma=0.0)
            tissue_counts.append(int((v > 0.5).sum()))
            lv_out, lv_in = ellipsoid_levels(p, t, grid)
            inside_out = lv_out < 0
            inside_in = lv_in < 0
            oracle_tissue.append(int((inside_out & ~inside_in).sum()))
            oracle_vent.append(int(inside_in.sum()))
            # rendered ventricle: dark voxels in the well-interior region
            # (the true core sits at lv_out < -0.84, far from the soft rim)
            vent_counts.append(int(((v < 0.5) & (lv_out < -0.2)).sum()))
        # independent level-set oracle: strict atrophy and ventricle growth
        assert oracle_tissue[0] > oracle_tissue[-1]
        assert oracle_vent[0] < oracle_vent[-1]
        assert all(a >= b for a, b in zip(oracle_tissue, oracle_tissue[1:]))
        assert all(a <= b for a, b in zip(oracle_vent, oracle_vent[1:]))
        # rendered segmentation agrees with the oracle's direction
        assert tissue_counts[0] > tissue_counts[-1]
        assert vent_counts[0] < vent_counts[-1]
        assert all(a >= b for a, b in zip(tissue_counts, tissue_counts[1:]))
        assert all(a <= b for a, b in zip(vent_counts, vent_counts[1:]))


# ----------------------------------------------------------------- VOL1 format

def test_volume_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    vol = rng.random((3, 4, 5)).astype(np.float32)
    path = str(tmp_path / "a.vol")
    save_volume(vol, path)
    back = load_volume(path)
    assert np.array_equal(vol, back)


def test_volume_byte_layout(tmp_path):
    # x-fastest raster: value at (x, y, z) lands at offset 16 + 4*(x + H*y + H*W*z)
    h, w, d = 2, 3, 4
    vol = np.zeros((h, w, d), dtype=np.float32)
    vol[1, 2, 3] = 5.0
    path = str(tmp_path / "b.vol")
    save_volume(vol, path)
    blob = open(path, "rb").read()
    assert blob[:4] == b"VOL1"
    assert np.frombuffer(blob, "<u4", count=3, offset=4).tolist() == [h, w, d]
    flat_index = 1 + h * 2 + h * w * 3
    val = np.frombuffer(blob, "<f4", count=1, offset=16 + 4 * flat_index)[0]
    assert val == 5.0


def test_volume_bad_magic(tmp_path):
    path = str(tmp_path / "bad.vol")
    with open(path, "wb") as f:
        f.write(b"XXXX" + b"\x00" * 20)
    with pytest.raises(VolumeFormatError, match="magic"):
        load_volume(path)


def test_volume_truncated_payload(tmp_path):
    import struct
    path = str(tmp_path / "tr.vol")
    with open(path, "wb") as f:
        f.write(b"VOL1" + struct.pack("<III", 2, 2, 2))
        f.write(np.zeros(7, dtype="<f4").tobytes())
    with pytest.raises(VolumeFormatError, match="truncated"):
        load_volume(path)


# ----------------------------------------------------------------- dataset

def test_make_dataset_counts_and_splits(tmp_path):
    man = make_dataset(10, 3, (50.0, 90.0), (8, 8, 8), seed=5, out_dir=str(tmp_path))
    header, records = load_manifest(man)
    assert len(records) == 30
    vol_files = os.listdir(tmp_path / "volumes")
    assert len(vol_files) == 30
    by_split = {}
    for r in records:
        by_split.setdefault(r.subject, set()).add(r.split)
    for subject, splits in by_split.items():
        assert len(splits) == 1
    split_subjects = {"train": set(), "val": set(), "test": set()}
    for r in records:
        split_subjects[r.split].add(r.subject)
    assert all(split_subjects.values())
    assert not (split_subjects["train"] & split_subjects["val"])
    assert not (split_subjects["train"] & split_subjects["test"])
    assert not (split_subjects["val"] & split_subjects["test"])
    assert header["age_min"] == 50.0 and header["age_max"] == 90.0


def test_make_dataset_ages_increasing_and_normalized(tmp_path):
    man = make_dataset(4, 3, (10.0, 20.0), (8, 8, 8), seed=6, out_dir=str(tmp_path))
    _, records = load_manifest(man)
    by_subject = {}
    for r in records:
        by_subject.setdefault(r.subject, []).append(r)
    for recs in by_subject.values():
        ages = [r.age_raw for r in recs]
        assert ages == sorted(ages)
        for r in recs:
            assert np.isclose(r.age_norm, (r.age_raw - 10.0) / 10.0)


def test_make_dataset_regeneration_byte_identical(tmp_path):
    d1, d2 = tmp_path / "one", tmp_path / "two"
    make_dataset(5, 2, (40.0, 80.0), (8, 8, 8), seed=11, out_dir=str(d1))
    make_dataset(5, 2, (40.0, 80.0), (8, 8, 8), seed=11, out_dir=str(d2))
    for name in sorted(os.listdir(d1 / "volumes")):
        b1 = open(d1 / "volumes" / name, "rb").read()
        b2 = open(d2 / "volumes" / name, "rb").read()
        assert b1 == b2
    assert open(d1 / "manifest.jsonl", "rb").read() == open(d2 / "manifest.jsonl", "rb").read()


def test_make_dataset_too_few_subjects(tmp_path):
    with pytest.raises(ValueError):
        make_dataset(2, 2, (0.0, 1.0), (8, 8, 8), seed=0, out_dir=str(tmp_path))


def test_volume_store_access_audit(tmp_path):
    man = make_dataset(6, 2, (0.0, 10.0), (8, 8, 8), seed=3, out_dir=str(tmp_path))
    store = VolumeStore(man)
    for rec in store.split("train"):
        store.load(rec)
    assert store.accessed_splits() == {"train"}
    store.load(store.split("test")[0])
    assert "test" in store.accessed_splits()


def test_manifest_roundtrip(tmp_path):
    header = {"age_min": 0.0, "age_max": 1.0, "grid": [4, 4, 4]}
    recs = [ScanRecord("s0", 0.5, 0.5, "volumes/x.vol", "train")]
    path = str(tmp_path / "m.jsonl")
    write_manifest(path, header, recs)
    h2, r2 = load_manifest(path)
    assert h2 == header and r2 == recs


def test_make_dataset_min_visit_gap(tmp_path):
    man = make_dataset(5, 3, (0.0, 100.0), (8, 8, 8), seed=9, out_dir=str(tmp_path),
                       min_visit_gap=0.25)
    _, records = load_manifest(man)
    by_subject = {}
    for r in records:
        by_subject.setdefault(r.subject, []).append(r.age_norm)
    for ages in by_subject.values():
        ages = sorted(ages)
        assert all(b - a >= 0.25 - 1e-9 for a, b in zip(ages, ages[1:]))
        assert 0.0 <= ages[0] and ages[-1] <= 1.0
    with pytest.raises(ValueError):
        make_dataset(5, 6, (0.0, 1.0), (8, 8, 8), seed=1, out_dir=str(tmp_path / "x"),
                     min_visit_gap=0.25)
