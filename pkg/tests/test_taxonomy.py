import numpy as np
import pytest

from mtuda import taxonomy as tx
from mtuda.errors import ValidationError
from mtuda.tensor import IGNORE

# (orig_id, name, used, super_class) rows transcribed by hand from the published label mapping tables
SPOT_ROWS = {
    "cityscapes": [
        (0, "unlabeled", False, "void"),
        (7, "road", True, "flat"),
        (8, "sidewalk", True, "flat"),
        (9, "parking", False, "flat"),
        (11, "building", True, "construction"),
        (16, "tunnel", False, "construction"),
        (17, "pole", True, "object"),
        (22, "terrain", True, "nature"),
        (23, "sky", True, "sky"),
        (25, "rider", True, "human"),
        (29, "caravan", False, "vehicle"),
        (33, "bicycle", True, "vehicle"),
        (-1, "license plate", False, "vehicle"),
    ],
    "gta5": [
        (0, "road", True, "flat"),
        (2, "building", True, "construction"),
        (4, "fence", True, "construction"),
        (5, "pole", True, "object"),
        (7, "traffic sign", True, "object"),
        (9, "terrain", True, "nature"),
        (10, "sky", True, "sky"),
        (12, "rider", True, "human"),
        (13, "car", True, "vehicle"),
        (16, "train", True, "vehicle"),
        (-1, "unlabeled", False, "void"),
    ],
    "mapillary": [
        (0, "bird", False, "other"),
        (1, "ground animal", False, "other"),
        (2, "curb", True, "construction"),
        (13, "road", True, "flat"),
        (25, "mountain", False, "nature"),
        (27, "sky", True, "sky"),
        (29, "terrain", True, "flat"),
        (30, "vegetation", True, "nature"),
        (43, "pothole", True, "object"),
        (51, "trash can", False, "object"),
        (55, "car", True, "vehicle"),
        (21, "motorcyclist", True, "human"),
        (64, "ego vehicle", False, "void"),
    ],
    "idd": [
        (0, "road", True, "flat"),
        (1, "parking", False, "flat"),
        (6, "person", True, "human"),
        (7, "animal", False, "other"),
        (11, "autorickshaw", True, "vehicle"),
        (12, "car", True, "vehicle"),
        (19, "curb", True, "construction"),
        (23, "billboard", True, "object"),
        (29, "building", True, "construction"),
        (32, "vegetation", True, "nature"),
        (33, "sky", True, "sky"),
        (39, "license plate", False, "vehicle"),
    ],
}

SIZES = {"cityscapes": 35, "gta5": 20, "mapillary": 66, "idd": 40}


@pytest.mark.parametrize("name", tx.SHIPPED)
def test_shipped_tables_load_and_match_spot_rows(name):
    m = tx.shipped_mapping(name)
    assert len(m.entries) == SIZES[name]
    assert len(SPOT_ROWS[name]) >= 10
    for oid, nm, used, sup in SPOT_ROWS[name]:
        e = m.entry(oid)
        assert (e.name, e.used, e.super_class) == (nm, used, sup)


@pytest.mark.parametrize("name", tx.SHIPPED)
def test_shipped_round_trip(name):
    m = tx.shipped_mapping(name)
    assert tx.load_mapping(tx.dump_mapping(m), name) == m


def test_remap_examples():
    cs = tx.shipped_mapping("cityscapes")
    assert np.all(tx.remap_labels(cs, np.full((4, 4), 7)) == 0)
    assert tx.remap_labels(cs, np.array([9]))[0] == IGNORE
    assert tx.remap_labels(tx.shipped_mapping("mapillary"), np.array([55]))[0] == 6
    assert tx.remap_labels(tx.shipped_mapping("idd"), np.array([12]))[0] == 6
    assert tx.remap_labels(tx.shipped_mapping("gta5"), np.array([10]))[0] == 4


@pytest.mark.parametrize("name", tx.SHIPPED)
def test_remap_range_and_other_rows(name):
    m = tx.shipped_mapping(name)
    ids = np.array([e.orig_id for e in m.entries])
    out = tx.remap_labels(m, ids)
    assert set(np.unique(out)) <= set(range(7)) | {IGNORE}
    for e, v in zip(m.entries, out):
        if e.super_class in ("void", "other") or not e.used:
            assert v == IGNORE


def test_identity_mapping_is_idempotent():
    text = "\n".join(f"{i}\t{n}\t1\t{n}" for i, n in enumerate(tx.CLASS_NAMES))
    ident = tx.load_mapping(text, "identity")
    lab = np.random.default_rng(0).integers(0, 7, size=(8, 8))
    once = tx.remap_labels(ident, lab)
    np.testing.assert_array_equal(once, lab)
    np.testing.assert_array_equal(tx.remap_labels(ident, once), once)


def test_unknown_id_named():
    with pytest.raises(ValidationError, match="999"):
        tx.remap_labels(tx.shipped_mapping("gta5"), np.array([0, 999]))


@pytest.mark.parametrize(
    "text, line",
    [
        ("0\troad\t1\tflat\n0\tlane\t1\tflat\n", 2),
        ("0\troad\t1\tvoid\n", 1),
        ("# c\n0\troad\t2\tflat\n", 2),
        ("0\troad\t1\n", 1),
        ("x\troad\t1\tflat\n", 1),
        ("0\troad\t1\tstreet\n", 1),
    ],
)
def test_validation_reports_line(text, line):
    with pytest.raises(ValidationError) as exc:
        tx.load_mapping(text)
    assert exc.value.rows[0][0] == line


def test_every_super_class_must_be_hit():
    with pytest.raises(ValidationError, match="vehicle"):
        tx.load_mapping("\n".join(f"{i}\t{n}\t1\t{n}" for i, n in enumerate(tx.CLASS_NAMES[:-1])))
