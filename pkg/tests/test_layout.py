import filecmp

import numpy as np
import pytest

from pimolap.device import DeviceGeometry, PimDevice
from pimolap.fabric import GRANULE_BITS
from pimolap.layout import (
    Attribute, LayoutError, Schema, load, load_relation, place, save_relation,
)


def _schema(widths):
    return Schema(attributes=[
        Attribute(name=f"a{i}", width_bits=w, kind="integer",
                  origin="fact" if i % 2 == 0 else "dim")
        for i, w in enumerate(widths)
    ])


def test_attribute_validation():
    with pytest.raises(LayoutError):
        Attribute("x", 0, "integer", "fact")
    with pytest.raises(LayoutError):
        Attribute("x", 65, "integer", "fact")
    with pytest.raises(LayoutError):
        Attribute("x", 8, "blob", "fact")
    assert Attribute("x", 17, "integer", "fact").granules == 2


def test_schema_duplicate_names():
    with pytest.raises(LayoutError):
        Schema(attributes=[Attribute("x", 8, "integer", "fact")] * 2)


def test_placement_granule_alignment():
    schema = _schema([4, 20, 16, 7])
    placement = place(schema, "one-xb")
    offsets = [placement.attr(f"a{i}").col_start for i in range(4)]
    assert offsets == [0, 16, 48, 64]
    assert all(off % GRANULE_BITS == 0 for off in offsets)
    work = placement.work[0]
    assert work.valid_col % GRANULE_BITS == 0      # flags live in one granule
    assert work.filter_col == work.valid_col + 1
    assert work.count_col_start % GRANULE_BITS == 0


def test_two_xb_splits_by_origin():
    schema = _schema([8, 8, 8, 8])
    placement = place(schema, "two-xb")
    assert placement.attr("a0").partition == 0
    assert placement.attr("a1").partition == 1
    assert placement.partitions == 2
    assert set(placement.work) == {0, 1}
    assert placement.attr_partition_map() == {"a0": 0, "a1": 1, "a2": 0, "a3": 1}


def test_placement_overflow_reports_requirement():
    schema = _schema([64] * 7)                      # 448 data bits + work area
    with pytest.raises(LayoutError, match="two-xb"):
        place(schema, "one-xb")
    place(schema, "two-xb")                         # split fits


def test_unknown_mode_and_attr():
    schema = _schema([8])
    with pytest.raises(LayoutError):
        place(schema, "three-xb")
    placement = place(schema, "one-xb")
    with pytest.raises(LayoutError):
        placement.attr("missing")
    with pytest.raises(LayoutError):
        schema.attr("missing")


@pytest.mark.parametrize("mode", ["one-xb", "two-xb"])
def test_load_readback_round_trip(mode):
    rng = np.random.default_rng(21)
    schema = _schema([4, 20, 16, 7])
    n = 40_000                                       # spans 2 pages with padding
    columns = {a.name: rng.integers(0, 2**a.width_bits, n)
               for a in schema.attributes}
    device = PimDevice()
    rel = load(columns, schema, place(schema, mode, device.geometry), device)
    assert rel.n_pages == 2
    for a in schema.attributes:
        assert (rel.read_attribute(a.name) == columns[a.name].astype(np.uint64)).all()


def test_load_marks_padding_invalid():
    schema = _schema([8])
    device = PimDevice()
    placement = place(schema, "one-xb", device.geometry)
    rel = load({"a0": np.arange(100) % 256}, schema, placement, device)
    valid = rel.pages[0][0].cells[:, :, placement.work[0].valid_col]
    assert valid.reshape(-1)[:100].all()
    assert not valid.reshape(-1)[100:].any()


def test_load_validation():
    schema = _schema([4])
    device = PimDevice()
    placement = place(schema, "one-xb", device.geometry)
    with pytest.raises(LayoutError):
        load({}, schema, placement, device)
    with pytest.raises(LayoutError):
        load({"a0": np.array([16])}, schema, placement, device)   # exceeds 4 bits
    with pytest.raises(LayoutError):
        load({"wrong": np.array([1])}, schema, placement, device)


def test_record_coordinates():
    schema = _schema([8])
    device = PimDevice()
    rel = load({"a0": np.zeros(70_000, dtype=int)}, schema,
               place(schema, "one-xb", device.geometry), device)
    assert rel.coords(0) == (0, 0, 0)
    assert rel.coords(1023) == (0, 0, 1023)
    assert rel.coords(1024) == (0, 1, 0)
    assert rel.coords(32768) == (1, 0, 0)
    assert rel.coords(69999) == (2, 4, 367)


def test_relation_files_round_trip(tmp_path):
    rng = np.random.default_rng(22)
    schema = _schema([4, 20, 16, 7])
    columns = {a.name: rng.integers(0, 2**a.width_bits, 1000)
               for a in schema.attributes}
    save_relation(tmp_path / "rel", schema, columns, extra={"sf": 0.5})
    schema2, columns2, manifest = load_relation(tmp_path / "rel")
    assert manifest["n_records"] == 1000
    assert manifest["sf"] == 0.5
    assert [a.name for a in schema2.attributes] == [a.name for a in schema.attributes]
    for name, col in columns.items():
        assert (columns2[name] == col).all()


def test_relation_files_deterministic(tmp_path):
    rng = np.random.default_rng(23)
    schema = _schema([16])
    columns = {"a0": rng.integers(0, 2**16, 500)}
    save_relation(tmp_path / "one", schema, columns)
    save_relation(tmp_path / "two", schema, columns)
    match, mismatch, errors = filecmp.cmpfiles(
        tmp_path / "one", tmp_path / "two", ["manifest.json", "a0.bin"],
        shallow=False)
    assert mismatch == [] and errors == []
