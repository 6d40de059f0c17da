"""Mapping the pre-joined relation onto pages and crossbar columns.

Attributes are packed in declaration order at granule-aligned offsets so
host reads and the aggregation ALU never straddle a 16-bit granule.  Work
columns (validity, filter result, subgroup scratch, compiler scratch, and
the aggregation destination) follow the data columns on every partition.

Record addressing: record j lives at page ordinal j // records_per_page,
crossbar (j % records_per_page) // rows, row j % rows, identically on all
partitions of a two-xb layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pimolap.device import DeviceGeometry, Page, PimDevice
from pimolap.fabric import GRANULE_BITS, uint_to_bits, bits_to_uint


class LayoutError(ValueError):
    pass


ATTR_KINDS = ("integer", "date", "categorical")
LAYOUT_MODES = ("one-xb", "two-xb")


@dataclass(frozen=True)
class Attribute:
    name: str
    width_bits: int
    kind: str
    origin: str                  # "fact" or a dimension name
    cardinality: int | None = None   # domain size; required for group-by attributes

    def __post_init__(self):
        if self.kind not in ATTR_KINDS:
            raise LayoutError(f"unknown attribute kind {self.kind!r}")
        if self.width_bits <= 0 or self.width_bits > 64:
            raise LayoutError(f"attribute {self.name!r} width out of range")

    @property
    def granules(self) -> int:
        return -(-self.width_bits // GRANULE_BITS)


@dataclass
class Schema:
    attributes: list

    def __post_init__(self):
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise LayoutError("duplicate attribute names")
        self._by_name = {a.name: a for a in self.attributes}

    def attr(self, name: str) -> Attribute:
        try:
            return self._by_name[name]
        except KeyError:
            raise LayoutError(f"unknown attribute {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._by_name


@dataclass(frozen=True)
class AttrPlacement:
    partition: int
    col_start: int
    width_bits: int

    @property
    def granules(self) -> int:
        return -(-self.width_bits // GRANULE_BITS)

    @property
    def granule_indices(self) -> tuple:
        g0 = self.col_start // GRANULE_BITS
        return tuple(range(g0, g0 + self.granules))


@dataclass(frozen=True)
class WorkColumns:
    """Reserved per-partition work area, after the data columns."""
    valid_col: int           # 1 for loaded records
    filter_col: int          # filter result bit
    subgroup_col: int        # per-subgroup select bit
    xfer_col: int            # landing bit for cross-partition transfers
    scratch_start: int       # compiler scratch granule
    scratch_width: int
    dst_col_start: int       # aggregation result partial
    dst_value_bits: int
    count_col_start: int     # selected-row count written next to the partial

    @property
    def filter_granule(self) -> int:
        return self.filter_col // GRANULE_BITS

    def scratch_cols(self) -> tuple:
        return tuple(range(self.scratch_start, self.scratch_start + self.scratch_width))


@dataclass
class Placement:
    mode: str
    attrs: dict                    # name -> AttrPlacement
    work: dict                     # partition -> WorkColumns
    partitions: int

    def attr(self, name: str) -> AttrPlacement:
        try:
            return self.attrs[name]
        except KeyError:
            raise LayoutError(f"attribute {name!r} is not placed") from None

    def attr_cols_for(self, partition: int) -> dict:
        return {n: (p.col_start, p.width_bits)
                for n, p in self.attrs.items() if p.partition == partition}

    def attr_partition_map(self) -> dict:
        return {n: p.partition for n, p in self.attrs.items()}


def place(schema: Schema, mode: str, geometry: DeviceGeometry | None = None) -> Placement:
    """Deterministic granule-aligned placement of a schema.

    one-xb puts everything on partition 0; two-xb splits fact attributes to
    partition 0 and all dimension attributes to partition 1, the worst-case
    vertical partitioning for GROUP-BY identifiers.
    """
    geometry = geometry or DeviceGeometry()
    if mode not in LAYOUT_MODES:
        raise LayoutError(f"unknown layout mode {mode!r}")
    partitions = 1 if mode == "one-xb" else 2
    cursors = [0] * partitions
    attrs: dict[str, AttrPlacement] = {}
    for a in schema.attributes:
        part = 0 if (mode == "one-xb" or a.origin == "fact") else 1
        attrs[a.name] = AttrPlacement(partition=part, col_start=cursors[part],
                                      width_bits=a.width_bits)
        cursors[part] += a.granules * GRANULE_BITS

    # Aggregation partial needs value width + log2(rows) headroom for SUM,
    # rounded up to granules; one extra granule carries the selected count.
    max_gran = max((a.granules for a in schema.attributes), default=1)
    dst_value_bits = (max_gran + 1) * GRANULE_BITS

    work: dict[int, WorkColumns] = {}
    for part in range(partitions):
        c = cursors[part]
        flag_granule = c          # valid/filter/subgroup/xfer share one granule
        scratch_start = c + GRANULE_BITS
        dst_start = scratch_start + GRANULE_BITS
        count_start = dst_start + dst_value_bits
        end = count_start + GRANULE_BITS
        if end > geometry.cols:
            need = end - geometry.cols
            raise LayoutError(
                f"partition {part} needs {end} columns but a crossbar row has "
                f"{geometry.cols}; reduce the schema by {need} bits or use two-xb")
        work[part] = WorkColumns(
            valid_col=flag_granule + 0,
            filter_col=flag_granule + 1,
            subgroup_col=flag_granule + 2,
            xfer_col=flag_granule + 3,
            scratch_start=scratch_start,
            scratch_width=GRANULE_BITS,
            dst_col_start=dst_start,
            dst_value_bits=dst_value_bits,
            count_col_start=count_start,
        )
        cursors[part] = end
    return Placement(mode=mode, attrs=attrs, work=work, partitions=partitions)


@dataclass
class LoadedRelation:
    """A relation resident in PIM pages, one page list per partition."""
    schema: Schema
    placement: Placement
    n_records: int
    pages: dict                    # partition -> list[Page]
    device: PimDevice

    @property
    def n_pages(self) -> int:
        return len(self.pages[0])

    def page_ids(self, partition: int) -> list:
        return [p.page_id for p in self.pages[partition]]

    def coords(self, j: int) -> tuple:
        g = self.device.geometry
        return (j // g.records_per_page,
                (j % g.records_per_page) // g.rows,
                j % g.rows)

    def read_attribute(self, name: str) -> np.ndarray:
        """Host-visible readback of a whole attribute (un-metered)."""
        ap = self.placement.attr(name)
        g = self.device.geometry
        chunks = []
        for page in self.pages[ap.partition]:
            bits = page.cells[:, :, ap.col_start:ap.col_start + ap.width_bits]
            vals = bits_to_uint(bits)                      # (xb, rows)
            chunks.append(vals.reshape(-1))
        return np.concatenate(chunks)[: self.n_records]


def load(columns: dict, schema: Schema, placement: Placement,
         device: PimDevice) -> LoadedRelation:
    """Populate pages with encoded records; allocates ceil(N/records_per_page)
    pages per partition and marks loaded rows valid."""
    if not columns:
        raise LayoutError("no columns to load")
    n = len(next(iter(columns.values())))
    for a in schema.attributes:
        if a.name not in columns:
            raise LayoutError(f"missing column for attribute {a.name!r}")
        col = np.asarray(columns[a.name])
        if len(col) != n:
            raise LayoutError("column length mismatch")
        if col.size and (col.min() < 0 or int(col.max()) >> a.width_bits):
            raise LayoutError(f"values of {a.name!r} exceed {a.width_bits} bits")

    g = device.geometry
    rpp = g.records_per_page
    m = -(-n // rpp) if n else 1
    pages = {part: [device.alloc_page() for _ in range(m)]
             for part in range(placement.partitions)}

    pad = m * rpp - n
    for a in schema.attributes:
        ap = placement.attrs[a.name]
        vals = np.asarray(columns[a.name], dtype=np.uint64)
        if pad:
            vals = np.concatenate([vals, np.zeros(pad, dtype=np.uint64)])
        bits = uint_to_bits(vals, a.width_bits)
        bits = bits.reshape(m, g.crossbars_per_page, g.rows, a.width_bits)
        for ordinal, page in enumerate(pages[ap.partition]):
            page.cells[:, :, ap.col_start:ap.col_start + a.width_bits] = bits[ordinal]

    valid = np.concatenate([np.ones(n, dtype=bool), np.zeros(pad, dtype=bool)])
    valid = valid.reshape(m, g.crossbars_per_page, g.rows)
    for part in range(placement.partitions):
        vcol = placement.work[part].valid_col
        for ordinal, page in enumerate(pages[part]):
            page.cells[:, :, vcol] = valid[ordinal]

    return LoadedRelation(schema=schema, placement=placement, n_records=n,
                          pages=pages, device=device)


# ---------------------------------------------------------------------------
# Relation file format: manifest JSON + one little-endian binary per attribute.

def _dtype_for(width_bits: int) -> str:
    for dt, bits in (("<u1", 8), ("<u2", 16), ("<u4", 32), ("<u8", 64)):
        if width_bits <= bits:
            return dt
    raise LayoutError("attribute wider than 64 bits")


def save_relation(directory, schema: Schema, columns: dict,
                  decode_info: dict | None = None, extra: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(next(iter(columns.values())))
    manifest = {
        "n_records": int(n),
        "attributes": [
            {
                "name": a.name,
                "width_bits": a.width_bits,
                "kind": a.kind,
                "origin": a.origin,
                "cardinality": a.cardinality,
                "dtype": _dtype_for(a.width_bits),
                "decode": (decode_info or {}).get(a.name),
            }
            for a in schema.attributes
        ],
    }
    if extra:
        manifest.update(extra)
    for a in schema.attributes:
        arr = np.asarray(columns[a.name]).astype(_dtype_for(a.width_bits))
        arr.tofile(directory / f"{a.name}.bin")
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_relation(directory):
    """Returns (schema, columns, manifest)."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    attrs = [
        Attribute(name=a["name"], width_bits=a["width_bits"], kind=a["kind"],
                  origin=a["origin"], cardinality=a.get("cardinality"))
        for a in manifest["attributes"]
    ]
    schema = Schema(attributes=attrs)
    n = manifest["n_records"]
    columns = {}
    for a in manifest["attributes"]:
        arr = np.fromfile(directory / f"{a['name']}.bin", dtype=a["dtype"])
        if len(arr) != n:
            raise LayoutError(f"column file for {a['name']} has wrong length")
        columns[a["name"]] = arr.astype(np.int64)
    return schema, columns, manifest
