"""Latency / energy / power / endurance accounting for the PIM module.

All times are kept in nanoseconds internally, energies in joules.  Reports
convert to seconds.  Parameter defaults follow the memristive module
configuration used throughout the simulator.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, asdict, replace

TEN_YEARS_S = 3.1536e8  # 10 * 365 * 24 * 3600

DEFAULT_LOGIC_CYCLE_COSTS = {
    # NOR/NOT are the native stateful-logic primitives; the rest are
    # composed microcode with declared cycle counts.
    "NOR": 1,
    "NOT": 1,
    "AND": 3,
    "OR": 2,
    "XOR": 5,
    "AND_NOT": 2,
}


class LedgerError(ValueError):
    pass


@dataclass
class CostParams:
    """Timing/energy parameters of the PIM module.

    Energy fields are joules per bit, power fields watts, time fields
    nanoseconds.
    """

    t_logic_cycle_ns: float = 30.0
    e_logic: float = 81.6e-15        # J/bit per logic cycle
    e_read: float = 0.84e-12         # J/bit, crossbar read
    e_write: float = 6.9e-12         # J/bit, crossbar write
    p_agg_circuit: float = 25.4e-6   # W, one aggregation ALU while active
    p_controller: float = 126e-6     # W, one page controller while active
    t_read_ns: float = 30.0          # one 16-bit granule read inside a crossbar
    t_granule_write_ns: float = 30.0
    t_dispatch_ns: float = 10.0      # serialized PIM-request dispatch
    t_host_read_ns: float = 60.0     # one 512-bit line read by the host
    t_host_write_ns: float = 60.0
    t_host_record_ns: float = 30.0   # host-side per-record grouping work
    cells_per_row: int = 512
    wear_policy: str = "toggle"      # "toggle" counts modified bits, "addressed" counts written bits
    logic_cycle_costs: dict = field(default_factory=lambda: dict(DEFAULT_LOGIC_CYCLE_COSTS))
    c_agg_baseline: int = 12         # pure bulk-bitwise aggregation: c * width * log2(rows) cycles

    def __post_init__(self):
        for name in (
            "t_logic_cycle_ns", "e_logic", "e_read", "e_write",
            "p_agg_circuit", "p_controller", "t_read_ns", "t_granule_write_ns",
            "t_dispatch_ns", "t_host_read_ns", "t_host_write_ns",
            "t_host_record_ns",
        ):
            if getattr(self, name) <= 0:
                raise LedgerError(f"parameter {name} must be strictly positive")
        if self.cells_per_row <= 0 or self.c_agg_baseline <= 0:
            raise LedgerError("cells_per_row and c_agg_baseline must be positive")
        if self.wear_policy not in ("toggle", "addressed"):
            raise LedgerError(f"unknown wear policy {self.wear_policy!r}")

    def with_overrides(self, overrides: dict) -> "CostParams":
        unknown = set(overrides) - set(asdict(self))
        if unknown:
            raise LedgerError(f"unknown cost parameters: {sorted(unknown)}")
        return replace(self, **overrides)


@dataclass
class CostReport:
    """Folded per-run accounting, one flat record."""

    total_latency: float            # seconds
    pim_energy: float               # joules
    peak_power: float               # watts, per chip
    max_row_writes: int             # worst-case writes experienced by one crossbar row
    required_endurance_10y: int     # writes/cell for 10 years of back-to-back runs

    FIELD_UNITS = {
        "total_latency": "s",
        "pim_energy": "J",
        "peak_power": "W/chip",
        "max_row_writes": "writes",
        "required_endurance_10y": "writes/cell",
    }

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        names = list(self.FIELD_UNITS)
        w.writerow(f"{n} [{self.FIELD_UNITS[n]}]" for n in names)
        w.writerow(getattr(self, n) for n in names)
        return buf.getvalue()


def endurance_10y(max_row_writes: int, query_latency_s: float, cells_per_row: int = 512) -> int:
    """Writes/cell needed to run the query back-to-back for ten years.

    Assumes wear leveling spreads a row's writes uniformly over its cells.
    """
    if query_latency_s <= 0:
        raise LedgerError("query latency must be strictly positive")
    if max_row_writes < 0:
        raise LedgerError("max_row_writes must be non-negative")
    if max_row_writes == 0:
        return 0
    return math.ceil((TEN_YEARS_S / query_latency_s) * max_row_writes / cells_per_row)


class CostLedger:
    """Append-only event log folded into a CostReport after simulation.

    An event is (t_start_ns, duration_ns, energy_J, kind); power within an
    event is uniform (energy/duration).  Peak power is the maximum of the
    summed instantaneous power over all event overlaps.
    """

    def __init__(self, params: CostParams | None = None):
        self.params = params or CostParams()
        self.events: list[tuple[float, float, float, str]] = []

    def clear(self):
        self.events.clear()

    def charge(self, kind: str, *, t_ns: float, dur_ns: float, energy_j: float = 0.0):
        if dur_ns < 0 or energy_j < 0:
            raise LedgerError("negative event scope")
        self.events.append((t_ns, dur_ns, energy_j, kind))

    def charge_bits(self, kind: str, *, t_ns: float, dur_ns: float, bits: int, energy_per_bit: float):
        if bits < 0:
            raise LedgerError("negative event scope")
        self.charge(kind, t_ns=t_ns, dur_ns=dur_ns, energy_j=bits * energy_per_bit)

    def charge_static(self, kind: str, *, t_ns: float, dur_ns: float, power_w: float, units: int = 1):
        self.charge(kind, t_ns=t_ns, dur_ns=dur_ns, energy_j=power_w * units * dur_ns * 1e-9)

    def total_energy(self) -> float:
        return sum(e for _, _, e, _ in self.events)

    def energy_by_kind(self) -> dict:
        out: dict[str, float] = {}
        for _, _, e, kind in self.events:
            out[kind] = out.get(kind, 0.0) + e
        return out

    def count_by_kind(self) -> dict:
        out: dict[str, int] = {}
        for *_, kind in self.events:
            out[kind] = out.get(kind, 0) + 1
        return out

    def peak_power_w(self) -> float:
        """Max instantaneous module power via a boundary sweep."""
        deltas: list[tuple[float, float]] = []
        for t, dur, energy, _ in self.events:
            if dur <= 0 or energy <= 0:
                continue
            p = energy / (dur * 1e-9)
            deltas.append((t, p))
            deltas.append((t + dur, -p))
        if not deltas:
            return 0.0
        deltas.sort()
        peak = 0.0
        cur = 0.0
        i = 0
        n = len(deltas)
        while i < n:
            t = deltas[i][0]
            while i < n and deltas[i][0] == t:
                cur += deltas[i][1]
                i += 1
            peak = max(peak, cur)
        return peak

    def fold(self, total_latency_ns: float, max_row_writes: int, *, chips: int = 8) -> CostReport:
        """Summarize into a CostReport.

        Peak power is attributed per chip: pages stripe their crossbars
        evenly over the module's chips, so module power divides by `chips`.
        """
        latency_s = total_latency_ns * 1e-9
        return CostReport(
            total_latency=latency_s,
            pim_energy=self.total_energy(),
            peak_power=self.peak_power_w() / chips,
            max_row_writes=int(max_row_writes),
            required_endurance_10y=endurance_10y(
                int(max_row_writes), latency_s, self.params.cells_per_row
            ),
        )
