"""Select-from-where-group-by execution over a loaded relation.

Supports four execution modes: a hybrid planner that splits subgroups
between in-memory aggregation (pim-gb) and host-side aggregation (host-gb)
using fitted latency models, plus forced pim-only, host-only, and a
pure-bulk-bitwise aggregation baseline.

Latency bookkeeping: each query run divides the relation pages into four
contiguous groups simulated as independent host threads; thread latencies
combine as the maximum, energies as the sum.  Subgroup sampling and
estimation run once and are shared by all threads.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from pimolap.device import PimRequest
from pimolap.fabric import GRANULE_BITS, AggSpec, bits_to_uint
from pimolap.layout import LoadedRelation
from pimolap.microcode import (
    And, Cmp, ColumnBit, MicrocodeCosts, MicrocodeProgram, MuxSpec, TRUE,
    compile_filter, split_conjunction_by_partition,
)

EXECUTION_MODES = ("hybrid", "pim-only", "host-only", "logic-agg-baseline")


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class Query:
    where: object
    agg_op: str
    agg_attr: str
    group_by: tuple = ()
    name: str = ""


def k_max_of(query: Query, schema) -> int:
    k = 1
    for name in query.group_by:
        attr = schema.attr(name)
        if attr.cardinality is None:
            raise EngineError(f"group-by attribute {name!r} has no declared cardinality")
        k *= attr.cardinality
    return k


# ---------------------------------------------------------------------------
# Empirical latency models

@dataclass
class ModelTables:
    """Lookup-table latency models.

    host-gb: T(M, s, r) = M * (a(s) * sqrt(r) + b(s)), keyed by reads per
    record s.  pim-gb (one subgroup): T(M, n) = M * slope(n) + intercept(n),
    keyed by aggregated-attribute granule count n.  Latencies in ns.
    """

    a: dict = field(default_factory=dict)
    b: dict = field(default_factory=dict)
    pim_slope: dict = field(default_factory=dict)
    pim_intercept: dict = field(default_factory=dict)
    r2_host: dict = field(default_factory=dict)
    r2_pim: dict = field(default_factory=dict)

    def t_host_gb(self, m: int, s: int, r: float) -> float:
        if s not in self.a:
            raise EngineError(f"no host-gb model entry for s={s}")
        return m * (self.a[s] * math.sqrt(r) + self.b[s])

    def t_pim_gb(self, m: int, n: int) -> float:
        if n not in self.pim_slope:
            raise EngineError(f"no pim-gb model entry for n={n}")
        return m * self.pim_slope[n] + self.pim_intercept[n]

    def to_json(self) -> str:
        return json.dumps({k: {str(i): v for i, v in d.items()}
                           for k, d in (("a", self.a), ("b", self.b),
                                        ("pim_slope", self.pim_slope),
                                        ("pim_intercept", self.pim_intercept),
                                        ("r2_host", self.r2_host),
                                        ("r2_pim", self.r2_pim))},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelTables":
        raw = json.loads(text)
        return cls(**{name: {int(k): v for k, v in raw.get(name, {}).items()}
                      for name in ("a", "b", "pim_slope", "pim_intercept",
                                   "r2_host", "r2_pim")})


def _lsq_r2(x: np.ndarray, y: np.ndarray):
    design = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 and ss_res < 1e-12 else 1.0 - ss_res / ss_tot
    return float(coef[0]), float(coef[1]), r2


def fit_models(host_measurements, pim_measurements) -> ModelTables:
    """Least-squares fits of the two latency models.

    host_measurements: iterable of (M, s, r, latency_ns); for each s, T/M is
    fitted against sqrt(r).  pim_measurements: iterable of (M, n,
    latency_ns); for each n, T is fitted linearly against M.
    """
    tables = ModelTables()
    by_s: dict[int, list] = {}
    for m, s, r, t in host_measurements:
        by_s.setdefault(int(s), []).append((m, r, t))
    for s, rows in sorted(by_s.items()):
        ms = {m for m, _, _ in rows}
        rs = {r for _, r, _ in rows}
        if len(ms) < 3 or len(rs) < 5:
            raise EngineError(
                f"host-gb grid for s={s} needs >=3 page counts and >=5 ratios")
        x = np.sqrt([r for _, r, _ in rows])
        y = np.array([t / m for m, _, t in rows], dtype=float)
        a, b, r2 = _lsq_r2(x, y)
        tables.a[s], tables.b[s], tables.r2_host[s] = a, b, r2

    by_n: dict[int, list] = {}
    for m, n, t in pim_measurements:
        by_n.setdefault(int(n), []).append((m, t))
    for n, rows in sorted(by_n.items()):
        if len({m for m, _ in rows}) < 3:
            raise EngineError(f"pim-gb grid for n={n} needs >=3 page counts")
        x = np.array([m for m, _ in rows], dtype=float)
        y = np.array([t for _, t in rows], dtype=float)
        slope, intercept, r2 = _lsq_r2(x, y)
        tables.pim_slope[n], tables.pim_intercept[n], tables.r2_pim[n] = slope, intercept, r2
    return tables


# ---------------------------------------------------------------------------
# Plans and estimates

@dataclass
class SubgroupEstimates:
    keys: list                   # all potential subgroup keys, largest estimate first
    sizes: np.ndarray            # estimated record counts, same order
    r_schedule: np.ndarray       # r(k) for k = 0..k_max
    estimated_selected: float


@dataclass
class GroupByPlan:
    chosen_k: int
    k_max: int
    predicted: np.ndarray        # predicted T_gb(k) for k = 0..k_max, ns
    pim_keys: list               # the chosen_k largest estimated subgroups


def plan_total_latency(tables: ModelTables, m: int, n: int, s: int,
                       k_max: int, r_schedule) -> np.ndarray:
    """Predicted GROUP-BY latency for every candidate split k.

    When all subgroups go to PIM (k == k_max) the host pass is skipped
    entirely.
    """
    t_pim = tables.t_pim_gb(m, n)
    ks = np.arange(k_max + 1)
    host = np.array([tables.t_host_gb(m, s, float(r_schedule[k]))
                     for k in ks])
    host[k_max] = 0.0
    return ks * t_pim + host


# ---------------------------------------------------------------------------
# The engine

@dataclass
class QueryRun:
    results: dict                # subgroup key tuple -> aggregate value
    report: object               # CostReport
    meta: dict


class QueryEngine:
    def __init__(self, relation: LoadedRelation, costs: MicrocodeCosts | None = None):
        self.rel = relation
        self.device = relation.device
        self.placement = relation.placement
        self.schema = relation.schema
        self.costs = costs or MicrocodeCosts()

    # -- shared helpers ------------------------------------------------------

    def _pages(self, partition: int, ordinals) -> list:
        return [self.rel.pages[partition][i] for i in ordinals]

    def _submit_serial(self, requests, t_ns: float) -> float:
        """Serialized dispatch, concurrent page execution."""
        td = self.device.params.t_dispatch_ns
        done = t_ns
        for i, req in enumerate(requests):
            done = max(done, self.device.submit(req, t_ns + i * td))
        return done

    def _flag_bit(self, values: np.ndarray, col: int) -> np.ndarray:
        return (values >> np.uint64(col % GRANULE_BITS)) & np.uint64(1) != 0

    def _read_filter_bits(self, page, t_ns: float):
        """Full column sweep of the flag granule; returns (bits[rows, xb], t)."""
        work = self.placement.work[0]
        rows = np.arange(self.device.geometry.rows)
        values, t_ns = self.device.host_read_lines(
            page.page_id, rows, work.filter_granule, t_ns)
        return self._flag_bit(values, work.filter_col), t_ns

    def _agg_spec(self, query: Query) -> AggSpec:
        ap = self.placement.attr(query.agg_attr)
        work = self.placement.work[ap.partition]
        return AggSpec(op=query.agg_op,
                       src_col_start=ap.col_start,
                       value_width_bits=ap.granules * GRANULE_BITS,
                       mask_col=work.subgroup_col,
                       dst_col_start=work.dst_col_start,
                       dst_value_bits=work.dst_value_bits,
                       count_col_start=work.count_col_start,
                       result_row=0)

    def reads_per_record(self, query: Query) -> int:
        """s: distinct granules fetched per record by host-gb."""
        granules = set()
        for name in tuple(query.group_by) + (query.agg_attr,):
            ap = self.placement.attr(name)
            granules.update((ap.partition, g) for g in ap.granule_indices)
        return len(granules)

    def agg_granules(self, query: Query) -> int:
        """n: granule reads to retrieve one aggregated value."""
        return self.placement.attr(query.agg_attr).granules

    def _key_strides(self, query: Query):
        cards = [self.schema.attr(a).cardinality for a in query.group_by]
        strides = []
        acc = 1
        for c in reversed(cards):
            strides.append(acc)
            acc *= c
        strides.reverse()
        return cards, strides

    def _all_keys(self, query: Query) -> list:
        cards, _ = self._key_strides(query)
        return [tuple(k) for k in itertools.product(*(range(c) for c in cards))]

    # -- filtering -------------------------------------------------------------

    def run_filter(self, query: Query, page_ordinals, t_ns: float) -> float:
        """Materialize the filter bit for every record of the given pages."""
        pred = query.where if query.where is not None else TRUE
        requests = []
        transfers = []   # (src_page, dst_page, dst_col)
        combine_requests = []
        if self.placement.partitions == 1:
            work = self.placement.work[0]
            program = compile_filter(
                And(items=(pred, ColumnBit(work.valid_col))),
                self.placement.attr_cols_for(0), work.scratch_cols(),
                work.filter_col, self.costs)
            requests = [PimRequest(p.page_id, "LOGIC_SEQ", program)
                        for p in self._pages(0, page_ordinals)]
        else:
            by_part = split_conjunction_by_partition(
                pred, self.placement.attr_partition_map())
            w0, w1 = self.placement.work[0], self.placement.work[1]
            p0 = self._pages(0, page_ordinals)
            p1 = self._pages(1, page_ordinals)
            if 1 in by_part:
                prog1 = compile_filter(
                    And(items=(by_part[1], ColumnBit(w1.valid_col))),
                    self.placement.attr_cols_for(1), w1.scratch_cols(),
                    w1.filter_col, self.costs)
                requests += [PimRequest(p.page_id, "LOGIC_SEQ", prog1) for p in p1]
            if 0 in by_part or 1 not in by_part:
                pred0 = by_part.get(0, TRUE)
                prog0 = compile_filter(
                    And(items=(pred0, ColumnBit(w0.valid_col))),
                    self.placement.attr_cols_for(0), w0.scratch_cols(),
                    w0.filter_col, self.costs)
                requests += [PimRequest(p.page_id, "LOGIC_SEQ", prog0) for p in p0]
                if 1 in by_part:
                    transfers = [(b.page_id, a.page_id, w0.xfer_col)
                                 for a, b in zip(p0, p1)]
                    and_prog = compile_filter(
                        And(items=(ColumnBit(w0.filter_col), ColumnBit(w0.xfer_col))),
                        {}, w0.scratch_cols(), w0.filter_col, self.costs)
                    combine_requests = [PimRequest(p.page_id, "LOGIC_SEQ", and_prog)
                                        for p in p0]
            else:
                # dimension-only predicate: land the transferred bits directly
                transfers = [(b.page_id, a.page_id, w0.filter_col)
                             for a, b in zip(p0, p1)]
        w1src = self.placement.work[1].filter_col if self.placement.partitions == 2 else None
        t_ns = self._submit_serial(requests, t_ns)
        for src_id, dst_id, dst_col in transfers:
            t_ns = self.device.transfer_bitvector(src_id, w1src, dst_id, dst_col, t_ns)
        if combine_requests:
            t_ns = self._submit_serial(combine_requests, t_ns)
        return t_ns

    def selected_count(self, page_ordinals=None) -> int:
        """Un-metered count of set filter bits (diagnostics only)."""
        work = self.placement.work[0]
        ordinals = range(self.rel.n_pages) if page_ordinals is None else page_ordinals
        return int(sum(int(p.cells[:, :, work.filter_col].sum())
                       for p in self._pages(0, ordinals)))

    # -- pim-gb -----------------------------------------------------------------

    def pim_gb(self, query: Query, keys, page_ordinals, t_ns: float,
               use_alu: bool = True):
        """Aggregate each subgroup with in-memory operations.

        Per subgroup: equality-filter the subgroup identifiers AND the query
        filter into the select column, run one AGGREGATE per page, retire the
        subgroup's records from the filter column, then read back the
        per-crossbar partials and combine them host-side.
        """
        spec = self._agg_spec(query)
        ap_agg = self.placement.attr(query.agg_attr)
        gb_parts = {self.placement.attr(a).partition for a in query.group_by}
        if len(gb_parts) > 1:
            raise EngineError("group-by attributes span multiple partitions")
        gb_part = gb_parts.pop() if gb_parts else ap_agg.partition
        agg_part = ap_agg.partition
        w_agg = self.placement.work[agg_part]
        pages_agg = self._pages(agg_part, page_ordinals)

        clear_prog = MicrocodeProgram(
            steps=[("AND_NOT", (w_agg.filter_col, w_agg.subgroup_col), w_agg.filter_col)],
            cycles=self.costs.op_cost("AND_NOT"), out_col=w_agg.filter_col)

        results: dict[tuple, dict] = {}
        for key in keys:
            self._validate_key(query, key)
            eqs = tuple(Cmp(attr=a, op="EQ", value=int(v))
                        for a, v in zip(query.group_by, key))
            if gb_part == agg_part:
                prog = compile_filter(
                    And(items=eqs + (ColumnBit(w_agg.filter_col),)),
                    self.placement.attr_cols_for(agg_part), w_agg.scratch_cols(),
                    w_agg.subgroup_col, self.costs)
                t_ns = self._submit_serial(
                    [PimRequest(p.page_id, "LOGIC_SEQ", prog) for p in pages_agg], t_ns)
            else:
                w_gb = self.placement.work[gb_part]
                prog1 = compile_filter(
                    And(items=eqs), self.placement.attr_cols_for(gb_part),
                    w_gb.scratch_cols(), w_gb.subgroup_col, self.costs)
                pages_gb = self._pages(gb_part, page_ordinals)
                t_ns = self._submit_serial(
                    [PimRequest(p.page_id, "LOGIC_SEQ", prog1) for p in pages_gb], t_ns)
                for pg, pa in zip(pages_gb, pages_agg):
                    t_ns = self.device.transfer_bitvector(
                        pg.page_id, w_gb.subgroup_col, pa.page_id, w_agg.xfer_col, t_ns)
                and_prog = compile_filter(
                    And(items=(ColumnBit(w_agg.xfer_col), ColumnBit(w_agg.filter_col))),
                    {}, w_agg.scratch_cols(), w_agg.subgroup_col, self.costs)
                t_ns = self._submit_serial(
                    [PimRequest(p.page_id, "LOGIC_SEQ", and_prog) for p in pages_agg], t_ns)

            t_ns = self._submit_serial(
                [PimRequest(p.page_id, "AGGREGATE", spec, use_alu=use_alu)
                 for p in pages_agg], t_ns)
            t_ns = self._submit_serial(
                [PimRequest(p.page_id, "LOGIC_SEQ", clear_prog) for p in pages_agg], t_ns)

            total = None
            count = 0
            value_granules = w_agg.dst_value_bits // GRANULE_BITS
            g0 = w_agg.dst_col_start // GRANULE_BITS
            gcount = w_agg.count_col_start // GRANULE_BITS
            for p in pages_agg:
                partial_granules = []
                for g in range(value_granules):
                    vals, t_ns = self.device.host_read_line(p.page_id, spec.result_row,
                                                            g0 + g, t_ns)
                    partial_granules.append(vals)
                counts, t_ns = self.device.host_read_line(p.page_id, spec.result_row,
                                                          gcount, t_ns)
                for xb in range(self.device.geometry.crossbars_per_page):
                    c = int(counts[xb])
                    if c == 0:
                        continue
                    v = sum(int(partial_granules[g][xb]) << (GRANULE_BITS * g)
                            for g in range(value_granules))
                    count += c
                    if total is None:
                        total = v
                    elif query.agg_op == "SUM":
                        total += v
                    elif query.agg_op == "MIN":
                        total = min(total, v)
                    else:
                        total = max(total, v)
            if count > 0:
                results[tuple(key)] = {"value": total, "count": count}
        return results, t_ns

    def _validate_key(self, query: Query, key):
        if len(key) != len(query.group_by):
            raise EngineError("subgroup key arity mismatch")
        for a, v in zip(query.group_by, key):
            card = self.schema.attr(a).cardinality
            if not (0 <= int(v) < card):
                raise EngineError(
                    f"subgroup value {v} outside domain of {a!r} (cardinality {card})")

    # -- host-gb ----------------------------------------------------------------

    def _record_granules(self, query: Query, with_agg: bool = True):
        names = tuple(query.group_by) + ((query.agg_attr,) if with_agg else ())
        granules = []
        seen = set()
        for name in names:
            ap = self.placement.attr(name)
            for g in ap.granule_indices:
                if (ap.partition, g) not in seen:
                    seen.add((ap.partition, g))
                    granules.append((ap.partition, g))
        return granules

    def _gather_attr(self, query_attr: str, granule_values: dict,
                     sel_rows: np.ndarray, sel_xb: np.ndarray) -> np.ndarray:
        ap = self.placement.attr(query_attr)
        out = np.zeros(len(sel_rows), dtype=np.int64)
        for i, g in enumerate(ap.granule_indices):
            vals = granule_values[(ap.partition, g)]       # (touched, xb)
            out += vals[sel_rows, sel_xb].astype(np.int64) << (GRANULE_BITS * i)
        return out

    def _scan_page(self, query: Query, ordinal: int, t_ns: float,
                   granules, read_agg: bool):
        """Read filter bits and the needed granules of one page set.

        Returns (key codes, agg values or None, t) for the selected records.
        """
        p0 = self.rel.pages[0][ordinal]
        fbits, t_ns = self._read_filter_bits(p0, t_ns)      # (rows, xb)
        touched = np.flatnonzero(fbits.any(axis=1))
        granule_values = {}
        for part, g in granules:
            page = self.rel.pages[part][ordinal]
            vals, t_ns = self.device.host_read_lines(page.page_id, touched, g, t_ns)
            granule_values[(part, g)] = vals
        sel_rows_t, sel_xb = np.nonzero(fbits[touched])
        t_ns = self.device.host_record_work(len(sel_rows_t), t_ns)
        if len(query.group_by):
            cards, strides = self._key_strides(query)
            key_codes = np.zeros(len(sel_rows_t), dtype=np.int64)
            for a, stride in zip(query.group_by, strides):
                key_codes += self._gather_attr(a, granule_values, sel_rows_t, sel_xb) * stride
        else:
            key_codes = np.zeros(len(sel_rows_t), dtype=np.int64)
        agg_vals = (self._gather_attr(query.agg_attr, granule_values, sel_rows_t, sel_xb)
                    if read_agg else None)
        return key_codes, agg_vals, t_ns

    def host_gb(self, query: Query, page_ordinals, t_ns: float):
        """Read the filter column and the surviving records; aggregate on
        the host.  Records of subgroups already retired by pim-gb have their
        filter bits cleared and are skipped for free."""
        k_universe = k_max_of(query, self.schema) if query.group_by else 1
        sums = np.zeros(k_universe, dtype=np.int64)
        mins = np.full(k_universe, np.iinfo(np.int64).max, dtype=np.int64)
        maxs = np.full(k_universe, np.iinfo(np.int64).min, dtype=np.int64)
        counts = np.zeros(k_universe, dtype=np.int64)
        granules = self._record_granules(query, with_agg=True)
        for ordinal in page_ordinals:
            key_codes, agg_vals, t_ns = self._scan_page(query, ordinal, t_ns,
                                                        granules, read_agg=True)
            if len(key_codes):
                np.add.at(sums, key_codes, agg_vals)
                np.minimum.at(mins, key_codes, agg_vals)
                np.maximum.at(maxs, key_codes, agg_vals)
                np.add.at(counts, key_codes, 1)
        results = {}
        cards, strides = self._key_strides(query)
        for code in np.flatnonzero(counts) if query.group_by else ([0] if counts[0] else []):
            key = self._decode_key(int(code), cards, strides)
            value = {"SUM": sums, "MIN": mins, "MAX": maxs}[query.agg_op][code]
            results[key] = {"value": int(value), "count": int(counts[code])}
        return results, t_ns

    @staticmethod
    def _decode_key(code: int, cards, strides) -> tuple:
        key = []
        for stride in strides:
            key.append(code // stride)
            code %= stride
        return tuple(key)

    # -- sampling and planning -----------------------------------------------------

    def estimate_subgroups(self, query: Query, t_ns: float):
        """Sample one page's filter bits and identifier granules, scale the
        per-subgroup counts by the page count, and derive r(k)."""
        k_universe = k_max_of(query, self.schema)
        granules = self._record_granules(query, with_agg=False)
        key_codes, _, t_ns = self._scan_page(query, 0, t_ns, granules, read_agg=False)
        counts = np.bincount(key_codes, minlength=k_universe).astype(float)
        est = counts * self.rel.n_pages
        order = np.argsort(-est, kind="stable")
        sizes = est[order]
        cards, strides = self._key_strides(query)
        keys = [self._decode_key(int(c), cards, strides) for c in order]
        total = float(sizes.sum())
        remaining = total - np.concatenate([[0.0], np.cumsum(sizes)])
        r_schedule = np.maximum(remaining, 0.0) / max(self.rel.n_records, 1)
        estimates = SubgroupEstimates(keys=keys, sizes=sizes,
                                      r_schedule=r_schedule,
                                      estimated_selected=total)
        return estimates, t_ns

    def plan_groupby(self, query: Query, tables: ModelTables,
                     estimates: SubgroupEstimates) -> GroupByPlan:
        k_max = k_max_of(query, self.schema)
        predicted = plan_total_latency(
            tables, self.rel.n_pages, self.agg_granules(query),
            self.reads_per_record(query), k_max, estimates.r_schedule)
        chosen = int(np.argmin(predicted))   # ties break toward the smallest k
        return GroupByPlan(chosen_k=chosen, k_max=k_max, predicted=predicted,
                           pim_keys=estimates.keys[:chosen])

    # -- UPDATE ---------------------------------------------------------------------

    def update_where(self, pred, attr: str, value: int, t_ns: float = 0.0) -> float:
        """Overwrite `attr` with `value` for every record matching `pred`,
        entirely with in-memory operations (no record reads)."""
        ap = self.placement.attr(attr)
        if value < 0 or value >> ap.width_bits:
            raise EngineError(f"value {value} does not fit attribute {attr!r}")
        ordinals = range(self.rel.n_pages)
        self.device.reset_stats()
        query = Query(where=pred, agg_op="SUM", agg_attr=attr)
        t_ns = self.run_filter(query, ordinals, t_ns)
        work = self.placement.work[ap.partition]
        if ap.partition != 0:
            w0 = self.placement.work[0]
            for a, b in zip(self.rel.pages[0], self.rel.pages[ap.partition]):
                t_ns = self.device.transfer_bitvector(
                    a.page_id, w0.filter_col, b.page_id, work.filter_col, t_ns)
        spec = MuxSpec(value_col_start=ap.col_start, width_bits=ap.width_bits,
                       immediate=int(value), select_col=work.filter_col,
                       scratch_col=work.scratch_start)
        t_ns = self._submit_serial(
            [PimRequest(p.page_id, "MUX_UPDATE", spec)
             for p in self.rel.pages[ap.partition]], t_ns)
        return t_ns

    # -- full query runs ----------------------------------------------------------------

    def _thread_groups(self, n_threads: int = 4):
        groups = np.array_split(np.arange(self.rel.n_pages), n_threads)
        return [g for g in groups if len(g)]

    def run_query(self, query: Query, mode: str,
                  tables: ModelTables | None = None,
                  force_k: int | None = None) -> QueryRun:
        if mode not in EXECUTION_MODES:
            raise EngineError(f"unknown execution mode {mode!r}")
        needs_plan = mode in ("hybrid", "logic-agg-baseline")
        if needs_plan and tables is None:
            raise EngineError(f"mode {mode!r} requires fitted model tables")
        if query.agg_attr not in self.placement.attrs:
            raise EngineError(f"aggregate attribute {query.agg_attr!r} is not placed")

        self.device.reset_stats()
        k_max = k_max_of(query, self.schema)
        groups = self._thread_groups()
        t_filter = [self.run_filter(query, g, 0.0) for g in groups]
        selected = self.selected_count()

        estimates = None
        plan = None
        if needs_plan:
            estimates, t_sample = self.estimate_subgroups(query, t_filter[0])
            t_base = [max(tf, t_sample) for tf in t_filter]
            plan = self.plan_groupby(query, tables, estimates)
            k = plan.chosen_k if force_k is None else force_k
            if not (0 <= k <= k_max):
                raise EngineError(f"forced k={k} outside [0, {k_max}]")
            pim_keys = estimates.keys[:k]
        else:
            t_base = t_filter
            if mode == "pim-only":
                k = k_max
                pim_keys = self._all_keys(query)
            else:
                k = 0
                pim_keys = []

        use_alu = mode != "logic-agg-baseline"
        merged: dict[tuple, dict] = {}
        t_done = []
        for grp, t0 in zip(groups, t_base):
            t = t0
            if k > 0:
                part, t = self.pim_gb(query, pim_keys, grp, t, use_alu=use_alu)
                self._merge(merged, part, query.agg_op)
            if k < k_max:
                part, t = self.host_gb(query, grp, t)
                self._merge(merged, part, query.agg_op)
            t_done.append(t)

        latency_ns = max(t_done)
        report = self.device.ledger.fold(latency_ns, self.device.max_row_writes(),
                                         chips=self.device.geometry.chips)
        meta = {
            "query": query.name,
            "mode": mode,
            "layout": self.placement.mode,
            "k": k,
            "k_max": k_max,
            "selected_records": selected,
            "selectivity": selected / max(self.rel.n_records, 1),
            "pages": self.rel.n_pages,
        }
        if plan is not None:
            meta["predicted_t_gb_ns"] = float(plan.predicted[k])
        results = {key: v["value"] for key, v in sorted(merged.items())}
        return QueryRun(results=results, report=report, meta=meta)

    @staticmethod
    def _merge(into: dict, part: dict, op: str):
        for key, v in part.items():
            if key not in into:
                into[key] = dict(v)
            else:
                cur = into[key]
                cur["count"] += v["count"]
                if op == "SUM":
                    cur["value"] += v["value"]
                elif op == "MIN":
                    cur["value"] = min(cur["value"], v["value"])
                else:
                    cur["value"] = max(cur["value"], v["value"])

    # -- exhaustive split exploration -----------------------------------------------------

    def latency_curve(self, query: Query, tables: ModelTables | None = None) -> np.ndarray:
        """Exact simulated total latency for every split k = 0..k_max.

        Exploits the data-independence of per-subgroup pim-gb latency (one
        subgroup is timed per thread against a state snapshot) and computes
        each k's host pass from the per-record subgroup ranks; spot-equal to
        full runs of run_query at the same k.
        """
        self.device.reset_stats()
        k_max = k_max_of(query, self.schema)
        groups = self._thread_groups()
        t_filter = [self.run_filter(query, g, 0.0) for g in groups]
        estimates, t_sample = self.estimate_subgroups(query, t_filter[0])
        t_base = np.array([max(tf, t_sample) for tf in t_filter])

        # rank of each subgroup in the estimated (executed) retirement order
        cards, strides = self._key_strides(query)
        rank_of = np.empty(k_max, dtype=np.int64)
        for rank, key in enumerate(estimates.keys):
            rank_of[sum(int(v) * st for v, st in zip(key, strides))] = rank

        # per-subgroup pim time, measured once per thread on a snapshot
        probe_key = estimates.keys[0]
        snapshots = {}
        for part, pages in self.rel.pages.items():
            snapshots[part] = [p.cells.copy() for p in pages]
        t_pim_key = []
        for grp, t0 in zip(groups, t_base):
            _, t1 = self.pim_gb(query, [probe_key], grp, t0)
            t_pim_key.append(t1 - t0)
        for part, pages in self.rel.pages.items():
            for p, snap in zip(pages, snapshots[part]):
                p.cells[:] = snap

        p = self.device.params
        work0 = self.placement.work[0]
        s = self.reads_per_record(query)
        rows = self.device.geometry.rows
        curve = np.zeros(k_max + 1)
        per_thread = np.zeros((len(groups), k_max + 1))
        for gi, (grp, t0) in enumerate(zip(groups, t_base)):
            touched_hist = np.zeros(k_max + 1)
            sel_hist = np.zeros(k_max + 1)
            filter_read = 0.0
            for ordinal in grp:
                page = self.rel.pages[0][ordinal]
                fbits = page.cells[:, :, work0.filter_col]      # (xb, rows)
                filter_read += rows * p.t_host_read_ns
                if not fbits.any():
                    continue
                xb_idx, row_idx = np.nonzero(fbits)
                codes = np.zeros(len(xb_idx), dtype=np.int64)
                for a, st in zip(query.group_by, strides):
                    ap = self.placement.attr(a)
                    pg = self.rel.pages[ap.partition][ordinal]
                    bits = pg.cells[xb_idx, row_idx, ap.col_start:ap.col_start + ap.width_bits]
                    codes += bits_to_uint(bits).astype(np.int64) * st
                ranks = rank_of[codes] if query.group_by else np.zeros(len(codes), np.int64)
                np.add.at(sel_hist, np.minimum(ranks, k_max), 1)
                # a row stays touched until its highest-ranked record retires
                row_max = np.full(rows, -1, dtype=np.int64)
                np.maximum.at(row_max, row_idx, ranks)
                live = row_max[row_max >= 0]
                np.add.at(touched_hist, np.minimum(live, k_max), 1)
            touched_k = np.cumsum(touched_hist[::-1])[::-1]     # rows live at split k
            sel_k = np.cumsum(sel_hist[::-1])[::-1]
            host_k = (filter_read + touched_k * s * p.t_host_read_ns
                      + sel_k * p.t_host_record_ns)
            ks = np.arange(k_max + 1)
            total = t0 + ks * t_pim_key[gi] + host_k
            total[k_max] = t0 + k_max * t_pim_key[gi]           # host pass skipped
            per_thread[gi] = total
        curve = per_thread.max(axis=0)
        return curve
