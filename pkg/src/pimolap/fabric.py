"""Single-crossbar bit fabric: storage, bulk column logic, granule I/O, ALU.

The kernel functions operate on boolean cell arrays of shape
``(..., rows, cols)`` with matching write-count arrays of shape
``(..., rows)`` so that one code path serves both a standalone crossbar and
a page's lockstep stack of crossbars.

Bit order inside a column span is little-endian: the bit at column
``col_start + i`` has weight ``2**i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRANULE_BITS = 16
DEFAULT_ROWS = 1024
DEFAULT_COLS = 512

AGG_OPS = ("SUM", "MIN", "MAX")

# Ops that may write back onto their first input (read-before-write
# accumulate, as used by the in-memory MUX).
INPLACE_SAFE_OPS = ("OR", "AND", "AND_NOT")


class FabricError(ValueError):
    pass


def _nor(ins):
    acc = ins[0].copy()
    for x in ins[1:]:
        acc |= x
    np.logical_not(acc, out=acc)
    return acc


def _or(ins):
    acc = ins[0].copy()
    for x in ins[1:]:
        acc |= x
    return acc


def _and(ins):
    acc = ins[0].copy()
    for x in ins[1:]:
        acc &= x
    return acc


def _xor(ins):
    acc = ins[0].copy()
    for x in ins[1:]:
        acc ^= x
    return acc


def _not(ins):
    if len(ins) != 1:
        raise FabricError("NOT takes exactly one input column")
    return ~ins[0]


def _and_not(ins):
    if len(ins) != 2:
        raise FabricError("AND_NOT takes exactly two input columns")
    return ins[0] & ~ins[1]


LOGIC_OPS = {
    "NOR": _nor,
    "NOT": _not,
    "OR": _or,
    "AND": _and,
    "XOR": _xor,
    "AND_NOT": _and_not,
}


def _check_col(cols: int, idx: int, what: str = "column"):
    if not (0 <= idx < cols):
        raise FabricError(f"{what} index {idx} out of range [0, {cols})")


def apply_logic(cells: np.ndarray, write_counts: np.ndarray, op: str,
                in_cols, out_col: int, *, wear_policy: str = "toggle"):
    """Column-wise bulk logic: out_col <- op(in_cols), every row at once.

    out_col must not alias an input, except the read-before-write
    accumulate forms where out_col equals the first input of an
    INPLACE_SAFE op.
    """
    if op not in LOGIC_OPS:
        raise FabricError(f"unknown logic op {op!r}")
    cols = cells.shape[-1]
    in_cols = tuple(in_cols)
    if not in_cols:
        raise FabricError("at least one input column required")
    for c in in_cols:
        _check_col(cols, c, "input column")
    _check_col(cols, out_col, "output column")
    if out_col in in_cols and not (op in INPLACE_SAFE_OPS and out_col == in_cols[0]):
        raise FabricError(f"output column {out_col} aliases an input")

    ins = [cells[..., c] for c in in_cols]
    result = LOGIC_OPS[op](ins)
    old = cells[..., out_col]
    if wear_policy == "toggle":
        write_counts += (old ^ result)
    else:
        write_counts += 1
    cells[..., out_col] = result


def bits_to_uint(bits: np.ndarray) -> np.ndarray:
    """Little-endian bit slice (..., w) -> uint64, w <= 64."""
    w = bits.shape[-1]
    if w > 64:
        raise FabricError("bit width exceeds 64")
    weights = np.left_shift(np.uint64(1), np.arange(w, dtype=np.uint64))
    return (bits.astype(np.uint64) * weights).sum(axis=-1, dtype=np.uint64)


def uint_to_bits(values: np.ndarray, width: int) -> np.ndarray:
    """uint64 values -> little-endian bit array (..., width).

    Widths above 64 are zero-padded in the high bits.
    """
    values = np.asarray(values, dtype=np.uint64)
    w = min(width, 64)
    shifts = np.arange(w, dtype=np.uint64)
    bits = ((values[..., None] >> shifts) & np.uint64(1)).astype(bool)
    if width > 64:
        pad = np.zeros(values.shape + (width - 64,), dtype=bool)
        bits = np.concatenate([bits, pad], axis=-1)
    return bits


def read_granule_bits(cells: np.ndarray, row: int, col_start: int) -> np.ndarray:
    """The 16-bit granule at (row, col_start) for every leading index."""
    rows, cols = cells.shape[-2], cells.shape[-1]
    if not (0 <= row < rows):
        raise FabricError(f"row {row} out of range [0, {rows})")
    if col_start < 0 or col_start + GRANULE_BITS > cols:
        raise FabricError(f"granule at column {col_start} out of range")
    return bits_to_uint(cells[..., row, col_start:col_start + GRANULE_BITS])


def write_row_bits(cells: np.ndarray, write_counts: np.ndarray, row: int,
                   col_start: int, bits: np.ndarray, *,
                   wear_policy: str = "toggle") -> int:
    """Store `bits` into a row span; returns the number of modified cells."""
    rows, cols = cells.shape[-2], cells.shape[-1]
    bits = np.asarray(bits, dtype=bool)
    if not (0 <= row < rows):
        raise FabricError(f"row {row} out of range [0, {rows})")
    if col_start < 0 or col_start + bits.shape[-1] > cols:
        raise FabricError("row span out of range")
    target = cells[..., row, col_start:col_start + bits.shape[-1]]
    modified = int((target ^ bits).sum())
    if wear_policy == "toggle":
        write_counts[..., row] += (target ^ bits).sum(axis=-1)
    else:
        write_counts[..., row] += bits.shape[-1]
    target[...] = bits
    return modified


@dataclass(frozen=True)
class AggSpec:
    """One aggregation pass of the per-crossbar ALU.

    The ALU scans all rows, reads ``value_width_bits/16`` granules per row,
    and folds rows whose mask bit is set.  The result (plus a selected-row
    count used as the empty/valid indicator) is written into the
    destination span of ``result_row``.
    """

    op: str
    src_col_start: int
    value_width_bits: int
    mask_col: int
    dst_col_start: int
    dst_value_bits: int
    count_col_start: int
    result_row: int = 0

    def validate(self, rows: int, cols: int):
        if self.op not in AGG_OPS:
            raise FabricError(f"unknown aggregation op {self.op!r}")
        if self.value_width_bits <= 0 or self.value_width_bits % GRANULE_BITS != 0:
            raise FabricError("value_width_bits must be a positive multiple of 16")
        if self.value_width_bits > 64:
            raise FabricError("value widths above 64 bits are not supported")
        src = range(self.src_col_start, self.src_col_start + self.value_width_bits)
        dst = range(self.dst_col_start, self.dst_col_start + self.dst_value_bits)
        cnt = range(self.count_col_start, self.count_col_start + GRANULE_BITS)
        for r, what in ((src, "src"), (dst, "dst"), (cnt, "count")):
            if r.start < 0 or r.stop > cols:
                raise FabricError(f"{what} column range out of [0, {cols})")
        if set(src) & (set(dst) | set(cnt)):
            raise FabricError("src and dst column ranges overlap")
        if self.mask_col in src or self.mask_col in dst or self.mask_col in cnt:
            raise FabricError("mask column overlaps a value range")
        _check_col(cols, self.mask_col, "mask column")
        if not (0 <= self.result_row < rows):
            raise FabricError("result row out of range")
        if self.dst_value_bits < self.value_width_bits:
            raise FabricError("dst narrower than the aggregated value")

    @property
    def src_granules(self) -> int:
        return self.value_width_bits // GRANULE_BITS

    @property
    def dst_granules(self) -> int:
        # value partial plus the count granule
        return self.dst_value_bits // GRANULE_BITS + 1


def agg_identity(op: str, width_bits: int) -> int:
    if op == "MIN":
        return (1 << width_bits) - 1
    return 0


def run_aggregate(cells: np.ndarray, write_counts: np.ndarray, spec: AggSpec,
                  *, wear_policy: str = "toggle"):
    """Execute an AggSpec; returns (values, counts) per leading index.

    Empty selections yield the op's identity element and count 0.
    """
    rows, cols = cells.shape[-2], cells.shape[-1]
    spec.validate(rows, cols)
    vals = bits_to_uint(cells[..., :, spec.src_col_start:spec.src_col_start + spec.value_width_bits])
    mask = cells[..., :, spec.mask_col]
    counts = mask.sum(axis=-1)
    if spec.op == "SUM":
        out = np.where(mask, vals, np.uint64(0)).sum(axis=-1, dtype=np.uint64)
    elif spec.op == "MIN":
        ident = np.uint64(agg_identity("MIN", spec.value_width_bits))
        out = np.where(mask, vals, ident).min(axis=-1)
    else:  # MAX
        out = np.where(mask, vals, np.uint64(0)).max(axis=-1)
        out = np.where(counts > 0, out, np.uint64(0))
    if spec.op == "SUM" and np.any(out >> np.uint64(min(spec.dst_value_bits, 63))):
        raise FabricError("aggregation result overflows the destination span")

    value_bits = uint_to_bits(out, spec.dst_value_bits)
    count_bits = uint_to_bits(counts.astype(np.uint64), GRANULE_BITS)
    row_span = cells[..., spec.result_row, :]
    for start, bits in ((spec.dst_col_start, value_bits), (spec.count_col_start, count_bits)):
        target = row_span[..., start:start + bits.shape[-1]]
        if wear_policy == "toggle":
            write_counts[..., spec.result_row] += (target ^ bits).sum(axis=-1)
        else:
            write_counts[..., spec.result_row] += bits.shape[-1]
        target[...] = bits
    return out, counts


@dataclass
class AggResult:
    value: int
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


class Crossbar:
    """A rows x cols bit matrix with write/read tallies and an ALU hook.

    May own its storage or wrap views into a page stack; dimensions are
    fixed after construction.
    """

    def __init__(self, rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS, *,
                 cells: np.ndarray | None = None,
                 write_counts: np.ndarray | None = None,
                 read_counts: np.ndarray | None = None,
                 wear_policy: str = "toggle"):
        if rows <= 0 or cols <= 0:
            raise FabricError("rows and cols must be positive")
        self.rows = rows
        self.cols = cols
        self.cells = cells if cells is not None else np.zeros((rows, cols), dtype=bool)
        self.write_counts = (write_counts if write_counts is not None
                             else np.zeros(rows, dtype=np.int64))
        self._read_counts = (read_counts if read_counts is not None
                             else np.zeros(1, dtype=np.int64))
        self.wear_policy = wear_policy
        if self.cells.shape != (rows, cols):
            raise FabricError("cells shape mismatch")

    @property
    def read_count(self) -> int:
        return int(self._read_counts[0])

    def bulk_logic(self, op: str, in_cols, out_col: int):
        apply_logic(self.cells, self.write_counts, op, in_cols, out_col,
                    wear_policy=self.wear_policy)

    def read_granule(self, row: int, col_start: int) -> int:
        value = int(read_granule_bits(self.cells, row, col_start))
        self._read_counts += 1
        return value

    def write_row_bits(self, row: int, col_start: int, bits) -> int:
        return write_row_bits(self.cells, self.write_counts, row, col_start,
                              np.asarray(bits, dtype=bool),
                              wear_policy=self.wear_policy)

    def aggregate(self, spec: AggSpec) -> AggResult:
        value, count = run_aggregate(self.cells, self.write_counts, spec,
                                     wear_policy=self.wear_policy)
        # row-scan policy: one granule read per occupied value granule per row
        self._read_counts += self.rows * spec.src_granules
        return AggResult(value=int(value), count=int(count))
