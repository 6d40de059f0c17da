"""Chips -> pages -> crossbars hierarchy with per-page controllers.

A page's crossbars execute PIM requests in lockstep; the cell storage of a
page is one stacked boolean array so a broadcast step is a single
vectorized operation.  All host-visible traffic moves in 512-bit lines
covering one granule from each crossbar of the page.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pimolap import fabric
from pimolap.fabric import (
    GRANULE_BITS, AggSpec, Crossbar, FabricError, bits_to_uint,
)
from pimolap.ledger import CostLedger, CostParams
from pimolap.microcode import MicrocodeProgram, MuxSpec, compile_mux


class DeviceError(ValueError):
    pass


class PageBusyError(DeviceError):
    pass


@dataclass(frozen=True)
class DeviceGeometry:
    chips: int = 8
    page_bytes: int = 2 * 1024 * 1024
    rows: int = 1024
    cols: int = 512
    line_bits: int = 512
    total_capacity_bytes: int = 32 * 1024 ** 3

    def __post_init__(self):
        page_bits = self.page_bytes * 8
        if page_bits % (self.rows * self.cols) != 0:
            raise DeviceError("page size must be a whole number of crossbars")
        if self.line_bits != GRANULE_BITS * self.crossbars_per_page:
            raise DeviceError("line width must cover one granule per crossbar")
        if self.crossbars_per_page % self.chips != 0:
            raise DeviceError("crossbars per page must stripe evenly over chips")

    @property
    def crossbars_per_page(self) -> int:
        return (self.page_bytes * 8) // (self.rows * self.cols)

    @property
    def crossbars_per_page_per_chip(self) -> int:
        return self.crossbars_per_page // self.chips

    @property
    def records_per_page(self) -> int:
        return self.rows * self.crossbars_per_page

    @property
    def granules_per_line_per_chip(self) -> int:
        return self.line_bits // GRANULE_BITS // self.chips

    @property
    def capacity_pages(self) -> int:
        return self.total_capacity_bytes // self.page_bytes


@dataclass
class PimController:
    page_id: int
    busy_until: float = 0.0
    issued_ops: int = 0


@dataclass
class PimRequest:
    page_id: int
    kind: str                      # LOGIC_SEQ | AGGREGATE | MUX_UPDATE
    payload: object                # MicrocodeProgram | AggSpec | MuxSpec
    use_alu: bool = True           # AGGREGATE only; False models pure bulk-bitwise aggregation


class Page:
    """One huge page: a lockstep stack of crossbars plus its controller."""

    def __init__(self, page_id: int, geometry: DeviceGeometry, wear_policy: str):
        self.page_id = page_id
        self.geometry = geometry
        n = geometry.crossbars_per_page
        self.cells = np.zeros((n, geometry.rows, geometry.cols), dtype=bool)
        self.write_counts = np.zeros((n, geometry.rows), dtype=np.int64)
        self.read_counts = np.zeros(n, dtype=np.int64)
        self.controller = PimController(page_id)
        self.wear_policy = wear_policy
        self._crossbars: list[Crossbar] | None = None

    @property
    def crossbars(self) -> list[Crossbar]:
        if self._crossbars is None:
            self._crossbars = [
                Crossbar(self.geometry.rows, self.geometry.cols,
                         cells=self.cells[i], write_counts=self.write_counts[i],
                         read_counts=self.read_counts[i:i + 1],
                         wear_policy=self.wear_policy)
                for i in range(self.geometry.crossbars_per_page)
            ]
        return self._crossbars

    # raw stores used only while populating the relation; not metered
    def store_raw_bits(self, xb, row, col_start: int, bits: np.ndarray):
        self.cells[xb, row, col_start:col_start + bits.shape[-1]] = bits

    def reset_stats(self):
        self.write_counts[:] = 0
        self.read_counts[:] = 0
        self.controller.busy_until = 0.0
        self.controller.issued_ops = 0


class PimDevice:
    """A PIM module: page allocation, request dispatch, host line traffic."""

    def __init__(self, geometry: DeviceGeometry | None = None,
                 params: CostParams | None = None,
                 ledger: CostLedger | None = None):
        self.geometry = geometry or DeviceGeometry()
        self.params = params or CostParams()
        self.ledger = ledger or CostLedger(self.params)
        self.pages: dict[int, Page] = {}
        self._next_page_id = 0

    # -- pages ---------------------------------------------------------------

    def alloc_page(self) -> Page:
        if len(self.pages) >= self.geometry.capacity_pages:
            raise DeviceError("module capacity exceeded")
        page = Page(self._next_page_id, self.geometry, self.params.wear_policy)
        self.pages[page.page_id] = page
        self._next_page_id += 1
        return page

    def page(self, page_id: int) -> Page:
        try:
            return self.pages[page_id]
        except KeyError:
            raise DeviceError(f"unknown page {page_id}") from None

    def reset_stats(self):
        self.ledger.clear()
        for page in self.pages.values():
            page.reset_stats()

    def max_row_writes(self) -> int:
        if not self.pages:
            return 0
        return max(int(p.write_counts.max()) for p in self.pages.values())

    # -- PIM requests ----------------------------------------------------------

    def submit(self, req: PimRequest, t_ns: float = 0.0) -> float:
        """Broadcast a request to all crossbars of its page; returns completion."""
        page = self.page(req.page_id)
        ctrl = page.controller
        if t_ns < ctrl.busy_until:
            raise PageBusyError(
                f"page {req.page_id} busy until {ctrl.busy_until} ns (request at {t_ns} ns)")
        p = self.params
        t0 = t_ns + p.t_dispatch_ns
        if req.kind in ("LOGIC_SEQ", "MUX_UPDATE"):
            program = req.payload
            if req.kind == "MUX_UPDATE":
                if not isinstance(program, MuxSpec):
                    raise DeviceError("MUX_UPDATE payload must be a MuxSpec")
                program = compile_mux(program, cols=self.geometry.cols)
            if not isinstance(program, MicrocodeProgram):
                raise DeviceError("LOGIC_SEQ payload must be a MicrocodeProgram")
            done = self._exec_logic(page, program, t0)
        elif req.kind == "AGGREGATE":
            if not isinstance(req.payload, AggSpec):
                raise DeviceError("AGGREGATE payload must be an AggSpec")
            if req.use_alu:
                done = self._exec_aggregate_alu(page, req.payload, t0)
            else:
                done = self._exec_aggregate_logic(page, req.payload, t0)
        else:
            raise DeviceError(f"unknown request kind {req.kind!r}")
        ctrl.busy_until = done
        ctrl.issued_ops += 1
        return done

    def _exec_logic(self, page: Page, program: MicrocodeProgram, t0: float) -> float:
        p = self.params
        for op, in_cols, out_col in program.steps:
            try:
                fabric.apply_logic(page.cells, page.write_counts, op, in_cols,
                                   out_col, wear_policy=page.wear_policy)
            except FabricError as exc:
                raise DeviceError(f"malformed microcode step: {exc}") from exc
        dur = program.cycles * p.t_logic_cycle_ns
        if program.cycles:
            bits = program.cycles * self.geometry.crossbars_per_page * self.geometry.rows
            self.ledger.charge_bits("logic_cycle", t_ns=t0, dur_ns=dur,
                                    bits=bits, energy_per_bit=p.e_logic)
        self.ledger.charge_static("controller_active", t_ns=t0, dur_ns=dur,
                                  power_w=p.p_controller)
        return t0 + dur

    def _exec_aggregate_alu(self, page: Page, spec: AggSpec, t0: float) -> float:
        p = self.params
        fabric.run_aggregate(page.cells, page.write_counts, spec,
                             wear_policy=page.wear_policy)
        n_xb = self.geometry.crossbars_per_page
        rows = self.geometry.rows
        page.read_counts += rows * spec.src_granules
        dur = rows * spec.src_granules * p.t_read_ns + spec.dst_granules * p.t_granule_write_ns
        read_bits = rows * spec.src_granules * GRANULE_BITS * n_xb
        write_bits = spec.dst_granules * GRANULE_BITS * n_xb
        self.ledger.charge_bits("granule_read", t_ns=t0, dur_ns=dur,
                                bits=read_bits, energy_per_bit=p.e_read)
        self.ledger.charge_bits("granule_write", t_ns=t0, dur_ns=dur,
                                bits=write_bits, energy_per_bit=p.e_write)
        self.ledger.charge_static("agg_active", t_ns=t0, dur_ns=dur,
                                  power_w=p.p_agg_circuit, units=n_xb)
        self.ledger.charge_static("controller_active", t_ns=t0, dur_ns=dur,
                                  power_w=p.p_controller)
        return t0 + dur

    def _exec_aggregate_logic(self, page: Page, spec: AggSpec, t0: float) -> float:
        """Pure bulk-bitwise aggregation stand-in: same result, declared
        cost model of c_agg * width * log2(rows) logic cycles, with one
        column write per row per cycle charged to wear."""
        p = self.params
        fabric.run_aggregate(page.cells, page.write_counts, spec,
                             wear_policy=page.wear_policy)
        rows = self.geometry.rows
        n_xb = self.geometry.crossbars_per_page
        cycles = int(p.c_agg_baseline * spec.value_width_bits * np.log2(rows))
        dur = cycles * p.t_logic_cycle_ns
        bits = cycles * rows * n_xb
        self.ledger.charge_bits("logic_cycle", t_ns=t0, dur_ns=dur,
                                bits=bits, energy_per_bit=p.e_logic)
        self.ledger.charge_static("controller_active", t_ns=t0, dur_ns=dur,
                                  power_w=p.p_controller)
        page.write_counts += cycles
        return t0 + dur

    # -- host traffic -----------------------------------------------------------

    def host_read_line(self, page_id: int, row: int, granule_index: int,
                       t_ns: float = 0.0):
        """One 512-bit line: granule `granule_index` of `row` from every
        crossbar, concatenated in crossbar order.  Returns (values, t_done)
        where values is a uint array of one granule per crossbar."""
        values = self._peek_line(page_id, row, granule_index)
        page = self.page(page_id)
        page.read_counts += 1
        p = self.params
        self.ledger.charge_bits("line_read", t_ns=t_ns, dur_ns=p.t_host_read_ns,
                                bits=self.geometry.line_bits, energy_per_bit=p.e_read)
        return values, t_ns + p.t_host_read_ns

    def host_read_lines(self, page_id: int, rows, granule_index: int,
                        t_ns: float = 0.0):
        """Batch of back-to-back line reads of one granule column.

        Returns (values[len(rows), crossbars], t_done); charged as a single
        uniform-power event.
        """
        page = self.page(page_id)
        rows = np.asarray(rows, dtype=np.int64)
        g0 = granule_index * GRANULE_BITS
        self._check_granule(granule_index)
        if rows.size and (rows.min() < 0 or rows.max() >= self.geometry.rows):
            raise DeviceError("row index out of range")
        values = bits_to_uint(page.cells[:, rows, g0:g0 + GRANULE_BITS]).T
        page.read_counts += rows.size
        p = self.params
        dur = rows.size * p.t_host_read_ns
        if rows.size:
            self.ledger.charge_bits("line_read", t_ns=t_ns, dur_ns=dur,
                                    bits=rows.size * self.geometry.line_bits,
                                    energy_per_bit=p.e_read)
        return values, t_ns + dur

    def host_record_work(self, n_records: int, t_ns: float) -> float:
        """Host-side per-record grouping/aggregation time; no PIM energy."""
        return t_ns + n_records * self.params.t_host_record_ns

    def transfer_bitvector(self, src_page_id: int, src_col: int,
                           dst_page_id: int, dst_col: int,
                           t_ns: float = 0.0) -> float:
        """Move one bit column between aligned pages through the host.

        Costs a full column sweep of line reads plus line writes.
        """
        src = self.page(src_page_id)
        dst = self.page(dst_page_id)
        if src.geometry != dst.geometry:
            raise DeviceError("misaligned page geometries")
        cols = self.geometry.cols
        for c in (src_col, dst_col):
            if not (0 <= c < cols):
                raise DeviceError(f"column {c} out of range")
        column = src.cells[:, :, src_col]
        if dst.wear_policy == "toggle":
            dst.write_counts += (dst.cells[:, :, dst_col] ^ column)
        else:
            dst.write_counts += 1
        dst.cells[:, :, dst_col] = column
        rows = self.geometry.rows
        src.read_counts += rows
        p = self.params
        dur = rows * (p.t_host_read_ns + p.t_host_write_ns)
        bits = rows * self.geometry.line_bits
        self.ledger.charge_bits("line_read", t_ns=t_ns, dur_ns=rows * p.t_host_read_ns,
                                bits=bits, energy_per_bit=p.e_read)
        self.ledger.charge_bits("line_write", t_ns=t_ns + rows * p.t_host_read_ns,
                                dur_ns=rows * p.t_host_write_ns,
                                bits=bits, energy_per_bit=p.e_write)
        return t_ns + dur

    # -- helpers -----------------------------------------------------------------

    def _check_granule(self, granule_index: int):
        if not (0 <= granule_index < self.geometry.cols // GRANULE_BITS):
            raise DeviceError(f"granule index {granule_index} out of range")

    def _peek_line(self, page_id: int, row: int, granule_index: int) -> np.ndarray:
        """Un-metered view of a line; also the functional core of host reads."""
        page = self.page(page_id)
        if not (0 <= row < self.geometry.rows):
            raise DeviceError(f"row {row} out of range")
        self._check_granule(granule_index)
        g0 = granule_index * GRANULE_BITS
        return bits_to_uint(page.cells[:, row, g0:g0 + GRANULE_BITS])
