"""End-to-end acceptance gate.

Each test prints one PASS/FAIL line (visible with `pytest -s` or on failure)
and then asserts, so the whole gate doubles as a human-readable checklist.
"""
import json

import numpy as np
import pytest

from conftest import groupby_oracle, make_engine
from pimolap.calibrate import calibrate
from pimolap.cli import main
from pimolap.device import DeviceGeometry, PimDevice, PimRequest
from pimolap.engine import Query, plan_total_latency
from pimolap.layout import Attribute, Schema
from pimolap.ledger import endurance_10y
from pimolap.microcode import Cmp, MicrocodeProgram
from pimolap.workload import WorkloadSpec, generate_to_dir


def _verdict(number: int, label: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail and not ok else ""
    print(f"ACCEPTANCE {number} [{label}]: {status}{suffix}")
    assert ok, f"acceptance criterion {number} ({label}) failed{suffix}"


def test_acceptance_1_geometry():
    g = DeviceGeometry()
    ok = (g.crossbars_per_page == 32
          and g.records_per_page == 32768
          and g.rows == 1024 and g.cols == 512
          and g.line_bits == 512 and g.chips == 8
          and g.page_bytes == 2 * 1024 * 1024
          and g.total_capacity_bytes == 32 * 1024 ** 3)
    _verdict(1, "geometry reproduction", ok)


def test_acceptance_2_oracle_equivalence(sf001_queries, sf001_df,
                                         engine_one, engine_two,
                                         tables_one, tables_two):
    failures = []
    for engine, tables in ((engine_one, tables_one), (engine_two, tables_two)):
        layout = engine.placement.mode
        for inst in sf001_queries:
            expected = groupby_oracle(inst.query, sf001_df)
            for mode in ("host-only", "pim-only", "hybrid", "logic-agg-baseline"):
                t = (tables["baseline"] if mode == "logic-agg-baseline"
                     else tables["alu"] if mode == "hybrid" else None)
                run = engine.run_query(inst.query, mode, t)
                if run.results != expected:
                    failures.append(f"{inst.query.name}/{mode}/{layout}")
    _verdict(2, "oracle equivalence, 13 queries x 4 modes x 2 layouts",
             not failures, ", ".join(failures[:5]))


def test_acceptance_3_selective_update_semantics():
    schema = Schema(attributes=[
        Attribute("x", 4, "integer", "fact"),
        Attribute("sel", 1, "integer", "fact"),
        Attribute("y", 8, "integer", "fact"),
    ])
    n = 64
    x0 = np.arange(n) % 16                      # every 4-bit value, both halves
    sel = (np.arange(n) // 16) % 2
    y0 = (np.arange(n) * 37) % 256
    ok = True
    detail = ""
    for immediate in range(16):
        engine = make_engine({"x": x0, "sel": sel, "y": y0}, schema, "one-xb")
        engine.update_where(Cmp("sel", "EQ", 1), "x", immediate)
        x1 = engine.rel.read_attribute("x")
        y1 = engine.rel.read_attribute("y")
        s1 = engine.rel.read_attribute("sel")
        good = ((x1[sel == 1] == immediate).all()
                and (x1[sel == 0] == x0[sel == 0]).all()
                and (y1 == y0).all() and (s1 == sel).all())
        if not good:
            ok, detail = False, f"immediate={immediate}"
            break
    _verdict(3, "selective update, 16 values x 16 immediates x 2 select bits",
             ok, detail)


def test_acceptance_4_planner_optimality(sf001_queries, engine_one, tables_one):
    tables = tables_one["alu"]
    rng = np.random.default_rng(404)
    m = engine_one.rel.n_pages
    mismatches = []
    schedules = 0
    from pimolap.engine import k_max_of
    for inst in sf001_queries:                  # exact argmin, synthetic r(k)
        query = inst.query
        k_max = k_max_of(query, engine_one.schema)
        s = engine_one.reads_per_record(query)
        n = engine_one.agg_granules(query)
        for _ in range(10):
            sizes = np.sort(rng.random(k_max))[::-1]
            rem = sizes.sum() - np.concatenate([[0.0], np.cumsum(sizes)])
            r = np.maximum(rem, 0.0) / sizes.sum()
            predicted = plan_total_latency(tables, m, n, s, k_max, r)
            brute = np.array([k * tables.t_pim_gb(m, n)
                              + (tables.t_host_gb(m, s, r[k]) if k < k_max else 0.0)
                              for k in range(k_max + 1)])
            schedules += 1
            if int(np.argmin(predicted)) != int(np.argmin(brute)) \
                    or not np.allclose(predicted, brute):
                mismatches.append(query.name)
    exact_ok = not mismatches and schedules >= 100

    within = []                                 # sampled plan vs exhaustive best
    for inst in sf001_queries:
        run = engine_one.run_query(inst.query, "hybrid", tables)
        curve = engine_one.latency_curve(inst.query)
        within.append(curve[run.meta["k"]] <= 1.25 * curve.min() + 1e-9)
    _verdict(4, "planner argmin exact and sampled plan within 25% of best",
             exact_ok and all(within),
             f"exact={exact_ok} schedules={schedules} within={within}")


def test_acceptance_5_pim_gb_latency_invariance():
    schema = Schema(attributes=[
        Attribute("g", 3, "categorical", "dim", cardinality=8),
        Attribute("v", 16, "integer", "fact"),
    ])
    n = 65_536                                  # fixed M = 2 pages
    durations = set()
    query = Query(where=None, agg_op="SUM", agg_attr="v", group_by=("g",))
    for seed in range(10):
        rng = np.random.default_rng(seed)
        skew = rng.random(8)
        g = rng.choice(8, size=n, p=skew / skew.sum())
        engine = make_engine({"g": g, "v": rng.integers(0, 2**16, n)},
                             schema, "one-xb")
        pages = range(engine.rel.n_pages)
        t0 = engine.run_filter(query, pages, 0.0)
        for key in ((0,), (7,)):
            _, t1 = engine.pim_gb(query, [key], pages, t0)
            durations.add(t1 - t0)
            t0 = t1
    _verdict(5, "per-subgroup pim-gb latency invariant across 10 datasets",
             len(durations) == 1, f"distinct durations: {sorted(durations)}")


def test_acceptance_6_model_fit_quality():
    tables = calibrate("one-xb",
                       m_values=(1, 2, 4, 8, 16),
                       r_values=(1e-4, 1e-3, 1e-2, 0.1, 0.5),
                       s_values=(1, 2, 3, 4),
                       n_values=(1, 2, 3, 4))["alu"]
    host_ok = all(tables.r2_host[s] >= 0.95 for s in (1, 2, 3, 4))
    pim_ok = all(tables.r2_pim[n] >= 0.999 for n in (1, 2, 3, 4))
    detail = (f"host R2 {dict(sorted(tables.r2_host.items()))}, "
              f"pim R2 {dict(sorted(tables.r2_pim.items()))}")
    _verdict(6, "host-gb sqrt-r fit R2>=0.95, pim-gb linear fit R2>=0.999",
             host_ok and pim_ok, detail)


def test_acceptance_7_alu_vs_logic_aggregation_direction(sf001_queries,
                                                         engine_one, tables_one):
    from pimolap.engine import k_max_of
    ok = True
    detail = ""
    for name in ("q2.3", "q3.3"):               # plans with real PIM aggregation
        inst = next(i for i in sf001_queries if i.query.name == name)
        k = k_max_of(inst.query, engine_one.schema)
        alu = engine_one.run_query(inst.query, "hybrid",
                                   tables_one["alu"], force_k=k)
        base = engine_one.run_query(inst.query, "logic-agg-baseline",
                                    tables_one["baseline"], force_k=k)
        good = (alu.report.total_latency < base.report.total_latency
                and alu.report.pim_energy < base.report.pim_energy
                and base.report.required_endurance_10y
                > alu.report.required_endurance_10y)
        if not good:
            ok = False
            detail = (f"{name}: alu=({alu.report.total_latency:.3e}s, "
                      f"{alu.report.pim_energy:.3e}J, "
                      f"{alu.report.required_endurance_10y}) vs baseline="
                      f"({base.report.total_latency:.3e}s, "
                      f"{base.report.pim_energy:.3e}J, "
                      f"{base.report.required_endurance_10y})")
    _verdict(7, "ALU beats logic-aggregation on latency/energy; baseline wears more",
             ok, detail)


def test_acceptance_8_energy_and_endurance_bookkeeping():
    device = PimDevice()
    page = device.alloc_page()
    program = MicrocodeProgram(steps=[("NOT", (0,), 1)] * 5, cycles=5, out_col=1)
    device.submit(PimRequest(page.page_id, "LOGIC_SEQ", program), 0.0)
    expected = 5 * 32768 * 81.6e-15 + 126e-6 * (5 * 30e-9)
    energy_ok = abs(device.ledger.total_energy() - expected) <= 1e-9 * expected
    endurance_ok = endurance_10y(512, 1.0, 512) == 315_360_000
    _verdict(8, "closed-form filter energy and endurance hand example",
             energy_ok and endurance_ok,
             f"energy={device.ledger.total_energy():.12e} vs {expected:.12e}")


def test_acceptance_9_determinism(tmp_path):
    spec = WorkloadSpec(sf=0.002)
    generate_to_dir(spec, tmp_path / "d1")
    generate_to_dir(spec, tmp_path / "d2")
    files_ok = all(
        (tmp_path / "d1" / p.name).read_bytes() == p.read_bytes()
        for p in sorted((tmp_path / "d2").iterdir()) if p.is_file())

    assert main(["generate", "--out", str(tmp_path / "ds"), "--sf", "0.002"]) == 0
    reports = []
    for name in ("r1", "r2"):
        assert main(["run", "--dataset", str(tmp_path / "ds"),
                     "--modes", "host-only", "--queries", "q1.1,q2.3",
                     "--out", str(tmp_path / name)]) == 0
        body = json.loads((tmp_path / f"{name}.json").read_text())
        body["config"]["dataset"] = "<dataset>"   # only the path differs
        reports.append((json.dumps(body, sort_keys=True),
                        (tmp_path / f"{name}.csv").read_bytes()))
    reports_ok = reports[0] == reports[1]
    _verdict(9, "byte-identical dataset and report files across reruns",
             files_ok and reports_ok, f"files={files_ok} reports={reports_ok}")
