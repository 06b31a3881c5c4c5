import numpy as np
import pytest

from skinpavit.datamodel import (
    MIDLINE_IDS,
    N_POSITIONS,
    AnchorSet,
    Dataset,
    DatasetFormatError,
    FacialImage,
    LandmarkSet,
    Measurement,
    Record,
    SkinPatch,
    SymmetryTable,
    build_symmetry_table,
    center_index,
    load_dataset,
    serialize_dataset,
)


def _image(h=300, w=300, modality="selfie"):
    return FacialImage(np.zeros((h, w, 3), np.uint8), modality, "natural", "front", "p1")


def test_symmetry_table_is_involution_with_single_midline():
    t = build_symmetry_table()
    for d in range(1, N_POSITIONS + 1):
        e = t.partner(d)
        if e is None:
            assert d in t.midline
        else:
            assert t.partner(e) == d and e != d
    assert t.midline == MIDLINE_IDS == frozenset({1})
    assert len(t.unordered_pairs()) == 18


def test_symmetry_pairs_follow_sticker_rows():
    t = build_symmetry_table()
    assert t.partner(2) == 19
    assert t.partner(8) == 26
    assert t.partner(11) == 25
    assert t.partner(36) == 37


def test_symmetry_table_rejects_non_involution():
    with pytest.raises(ValueError):
        SymmetryTable({2: 19, 19: 3})


def test_center_index_rounds_half_up():
    assert center_index(10.5) == 11
    assert center_index(10.49) == 10
    assert center_index(-0.5) == 0


def test_image_validation():
    with pytest.raises(ValueError):
        FacialImage(np.zeros((300, 300), np.uint8), "selfie", "natural", "front", "p")
    with pytest.raises(ValueError):
        FacialImage(np.zeros((300, 300, 3), np.float32), "selfie", "natural", "front", "p")
    with pytest.raises(ValueError):
        _image(100, 100)  # smaller than a 140 px patch
    assert _image().radius == 70
    assert _image(400, 400, "visia").radius == 170


def test_arrays_are_read_only():
    img = _image()
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1


def test_landmarks_shape_and_finiteness():
    with pytest.raises(ValueError):
        LandmarkSet(np.zeros((67, 2)))
    pts = np.zeros((68, 2))
    pts[3, 1] = np.nan
    with pytest.raises(ValueError):
        LandmarkSet(pts)


def test_anchor_ids_range():
    with pytest.raises(ValueError):
        AnchorSet({38: (1, 1)})
    a = AnchorSet({3: (1, 2), 1: (5, 6)})
    assert a.ids == [1, 3]
    np.testing.assert_array_equal(a.to_array(), [[5, 6], [1, 2]])


def test_measurement_nonnegative():
    with pytest.raises(ValueError):
        Measurement("TEWL", -1.0)
    with pytest.raises(ValueError):
        Measurement("SH", float("inf"))


def test_patch_must_be_square():
    with pytest.raises(ValueError):
        SkinPatch(np.zeros((10, 12, 3), np.uint8), 1, Measurement("SH", 1), "p", "natural", "front")


def test_record_requires_croppable_labeled_anchor():
    img = _image()
    Record(img, AnchorSet({2: (150, 150)}), {2: Measurement("TEWL", 3)})
    with pytest.raises(ValueError):
        Record(img, AnchorSet({2: (20, 150)}), {2: Measurement("TEWL", 3)})
    with pytest.raises(ValueError):
        Record(img, AnchorSet({}), {2: Measurement("TEWL", 3)})


def test_roundtrip(tmp_path, small_ds):
    path = tmp_path / "ds.zip"
    serialize_dataset(small_ds, path)
    back = load_dataset(path)
    assert back == small_ds
    # byte-identical when written twice
    path2 = tmp_path / "ds2.zip"
    serialize_dataset(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_garbage(tmp_path):
    p = tmp_path / "bad.zip"
    p.write_bytes(b"not a zip")
    with pytest.raises(DatasetFormatError):
        load_dataset(p)


def test_load_names_broken_record(tmp_path, small_ds):
    import zipfile

    src = tmp_path / "ds.zip"
    serialize_dataset(Dataset(small_ds.records[:3]), src)
    dst = tmp_path / "broken.zip"
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for item in zin.infolist():
            data = zin.read(item.filename)
            if item.filename == "index.jsonl":
                lines = data.decode().splitlines()
                lines[1] = lines[1].replace('"shape": [', '"shape": [1, ')
                data = ("\n".join(lines) + "\n").encode()
            zout.writestr(item, data)
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(dst)
    assert err.value.record == 1
    assert "record 1" in str(err.value)


def test_dataset_views(small_ds):
    assert len(small_ds) == 9
    assert small_ds.n_patches == 9 * 19
    assert small_ds.panelists == ["p000", "p001", "p002"]
    one = small_ds.by_panelist(["p001"])
    assert len(one) == 3
    assert len(small_ds.by_angle(["front"])) == 3
    assert small_ds.labels("TEWL").shape == (9 * 19,)
