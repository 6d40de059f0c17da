"""Fitting the planner's latency models from simulated measurement runs.

A synthetic relation with controllable identifier counts and value widths
is loaded, the filter column is preset to exact selected fractions, and the
two GROUP-BY strategies are timed directly:

* host-gb over M pages at reads-per-record s and selected fraction r,
  fitted as T/M against sqrt(r) per s;
* pim-gb for a single subgroup at value granule count n, fitted linearly
  against M per n.

Both the ALU aggregation path and the pure bulk-bitwise aggregation
baseline get their own pim-gb table; the host-gb table is shared.
"""

from __future__ import annotations

import numpy as np

from pimolap.device import PimDevice
from pimolap.engine import ModelTables, Query, QueryEngine, fit_models
from pimolap.layout import Attribute, Schema, load, place

DEFAULT_M_VALUES = (1, 2, 4, 8, 16)
DEFAULT_R_VALUES = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 0.5)
DEFAULT_S_VALUES = (1, 2, 3, 4, 5, 6)
DEFAULT_N_VALUES = (1, 2, 3, 4)

_GROUP_ATTRS = ("cal_g1", "cal_g2", "cal_g3", "cal_g4", "cal_g5")
_VALUE_ATTRS = {1: "cal_val16", 2: "cal_val32", 3: "cal_val48", 4: "cal_val64"}


def calibration_schema() -> Schema:
    """Synthetic schema: five one-granule identifiers (placed as dimension
    attributes so two-xb exercises the cross-partition path) and one value
    attribute per granule width."""
    attrs = [Attribute(name=g, width_bits=4, kind="categorical",
                       origin="cal_dim", cardinality=16)
             for g in _GROUP_ATTRS]
    attrs += [Attribute(name=name, width_bits=16 * n, kind="integer", origin="fact")
              for n, name in sorted(_VALUE_ATTRS.items())]
    return Schema(attributes=attrs)


def build_calibration_relation(m_pages: int, layout_mode: str,
                               params=None) -> QueryEngine:
    """An m_pages relation of all-zero records (timings are data-independent)."""
    schema = calibration_schema()
    device = PimDevice(params=params)
    placement = place(schema, layout_mode, device.geometry)
    n = m_pages * device.geometry.records_per_page
    columns = {a.name: np.zeros(n, dtype=np.uint64) for a in schema.attributes}
    rel = load(columns, schema, placement, device)
    return QueryEngine(rel)


def preset_filter(engine: QueryEngine, n_selected: int, rng: np.random.Generator):
    """Directly set the filter bit of n_selected uniformly random records."""
    rel = engine.rel
    g = rel.device.geometry
    sel = np.zeros(rel.n_records, dtype=bool)
    if n_selected:
        sel[rng.choice(rel.n_records, size=n_selected, replace=False)] = True
    bits = sel.reshape(rel.n_pages, g.crossbars_per_page, g.rows)
    fcol = rel.placement.work[0].filter_col
    for ordinal, page in enumerate(rel.pages[0]):
        page.cells[:, :, fcol] = bits[ordinal]


def _host_query(s: int) -> Query:
    # reads per record = (s - 1) identifier granules + 1 value granule
    return Query(where=None, agg_op="SUM", agg_attr=_VALUE_ATTRS[1],
                 group_by=_GROUP_ATTRS[: s - 1])


def _pim_query(n: int) -> Query:
    return Query(where=None, agg_op="SUM", agg_attr=_VALUE_ATTRS[n],
                 group_by=_GROUP_ATTRS[:1])


def calibrate(layout_mode: str,
              m_values=DEFAULT_M_VALUES,
              r_values=DEFAULT_R_VALUES,
              s_values=DEFAULT_S_VALUES,
              n_values=DEFAULT_N_VALUES,
              params=None,
              seed: int = 0) -> dict:
    """Returns {"alu": ModelTables, "baseline": ModelTables}."""
    rng = np.random.default_rng(seed)
    host_meas = []
    pim_meas_alu = []
    pim_meas_base = []
    for m in m_values:
        engine = build_calibration_relation(m, layout_mode, params=params)
        ordinals = range(engine.rel.n_pages)
        for r in r_values:
            n_selected = max(1, round(r * engine.rel.n_records))
            preset_filter(engine, n_selected, rng)
            for s in s_values:
                query = _host_query(s)
                assert engine.reads_per_record(query) == s
                _, t = engine.host_gb(query, ordinals, 0.0)
                host_meas.append((m, s, n_selected / engine.rel.n_records, t))
        preset_filter(engine, engine.rel.n_records // 2, rng)
        for n in n_values:
            query = _pim_query(n)
            for use_alu, sink in ((True, pim_meas_alu), (False, pim_meas_base)):
                engine.device.reset_stats()
                _, t = engine.pim_gb(query, [(0,)], ordinals, 0.0, use_alu=use_alu)
                sink.append((m, n, t))
        del engine
    return {
        "alu": fit_models(host_meas, pim_meas_alu),
        "baseline": fit_models(host_meas, pim_meas_base),
    }
