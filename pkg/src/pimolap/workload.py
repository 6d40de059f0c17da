"""Star-schema OLAP workload: data generator and query templates.

The relation is a pre-joined (denormalized) sales fact table: every record
carries its fact measures plus the dictionary-encoded attributes of its
date, customer, supplier, and part rows.  Dimension keys in the fact table
follow a Zipf distribution so attribute-value frequencies are skewed.

Thirteen query templates cover the classic star-schema benchmark shapes
(three flight groups plus a profit group).  Each template carries a target
selectivity; `instantiate_query` tunes its free predicate knobs against the
generated data to approach the target within a factor of two, flagging the
instance as degenerate when the dataset is too small to get that close.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from pimolap.engine import Query
from pimolap.layout import Attribute, Schema, save_relation
from pimolap.microcode import And, Between, Cmp, InList, evaluate
from pimolap.qparse import format_query

DAYS_PER_YEAR = 365
N_YEARS = 7
FIRST_YEAR = 1992


def ssb_schema() -> Schema:
    return Schema(attributes=[
        # fact measures
        Attribute("lo_quantity", 6, "integer", "fact"),
        Attribute("lo_discount", 4, "integer", "fact"),
        Attribute("lo_revenue", 32, "integer", "fact"),
        Attribute("lo_profit", 32, "integer", "fact"),
        Attribute("lo_orderdate", 12, "date", "fact",
                  cardinality=N_YEARS * DAYS_PER_YEAR),
        # date dimension
        Attribute("d_year", 3, "categorical", "date", cardinality=7),
        Attribute("d_trendyear", 3, "categorical", "date", cardinality=6),
        Attribute("d_yearparity", 1, "categorical", "date", cardinality=2),
        Attribute("d_yearmonthnum", 7, "categorical", "date", cardinality=84),
        Attribute("d_weeknuminyear", 6, "categorical", "date", cardinality=53),
        # customer dimension
        Attribute("c_region", 3, "categorical", "customer", cardinality=5),
        Attribute("c_nation_in_region", 3, "categorical", "customer", cardinality=5),
        Attribute("c_city_in_nation", 4, "categorical", "customer", cardinality=10),
        Attribute("c_citybit", 1, "categorical", "customer", cardinality=2),
        # supplier dimension
        Attribute("s_region", 3, "categorical", "supplier", cardinality=5),
        Attribute("s_nation_in_region", 3, "categorical", "supplier", cardinality=5),
        Attribute("s_city_in_nation", 4, "categorical", "supplier", cardinality=10),
        Attribute("s_citybit", 1, "categorical", "supplier", cardinality=2),
        # part dimension
        Attribute("p_mfgr", 3, "categorical", "part", cardinality=5),
        Attribute("p_category_in_mfgr", 3, "categorical", "part", cardinality=5),
        Attribute("p_brand_in_category", 6, "categorical", "part", cardinality=40),
        Attribute("p_brandmod8", 3, "categorical", "part", cardinality=8),
    ])


@dataclass(frozen=True)
class WorkloadSpec:
    sf: float = 0.01              # scale factor; 1.0 = 6,000,000 fact records
    seed: int = 7
    theta: float = 1.0            # Zipf exponent for fact -> dimension keys
    base_rows: int = 6_000_000

    @property
    def n_records(self) -> int:
        return max(1, round(self.sf * self.base_rows))


def _zipf_keys(rng: np.random.Generator, size: int, n: int, theta: float) -> np.ndarray:
    p = 1.0 / np.power(np.arange(1, size + 1, dtype=float), theta)
    p /= p.sum()
    return rng.choice(size, size=n, p=p)


def _date_dimension() -> dict:
    day = np.arange(N_YEARS * DAYS_PER_YEAR)
    year_idx = day // DAYS_PER_YEAR
    month = np.minimum((day % DAYS_PER_YEAR) // 31, 11)
    return {
        "d_year": year_idx,
        "d_trendyear": np.minimum(year_idx, 5),
        "d_yearparity": year_idx % 2,
        "d_yearmonthnum": year_idx * 12 + month,
        "d_weeknuminyear": (day % DAYS_PER_YEAR) // 7,
    }


def _geo_dimension(rng: np.random.Generator, size: int, prefix: str) -> dict:
    city = rng.integers(0, 10, size)
    return {
        f"{prefix}_region": rng.integers(0, 5, size),
        f"{prefix}_nation_in_region": rng.integers(0, 5, size),
        f"{prefix}_city_in_nation": city,
        f"{prefix}_citybit": city % 2,
    }


def _part_dimension(rng: np.random.Generator, size: int) -> dict:
    brand = rng.integers(0, 40, size)
    return {
        "p_mfgr": rng.integers(0, 5, size),
        "p_category_in_mfgr": rng.integers(0, 5, size),
        "p_brand_in_category": brand,
        "p_brandmod8": brand % 8,
    }


def generate(spec: WorkloadSpec) -> dict:
    """Deterministic pre-joined fact table as {attribute: int64 array}."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_records
    n_customer = max(30, round(30_000 * spec.sf))
    n_supplier = max(10, round(2_000 * spec.sf))
    n_part = max(100, round(20_000 * spec.sf))

    dims = {
        "date": _date_dimension(),
        "customer": _geo_dimension(rng, n_customer, "c"),
        "supplier": _geo_dimension(rng, n_supplier, "s"),
        "part": _part_dimension(rng, n_part),
    }
    keys = {
        "date": rng.integers(0, N_YEARS * DAYS_PER_YEAR, n),
        "customer": _zipf_keys(rng, n_customer, n, spec.theta),
        "supplier": _zipf_keys(rng, n_supplier, n, spec.theta),
        "part": _zipf_keys(rng, n_part, n, spec.theta),
    }

    revenue = rng.integers(10_000, 1_000_000, n)
    supplycost = (revenue * rng.uniform(0.4, 0.6, n)).astype(np.int64)
    columns = {
        "lo_quantity": rng.integers(1, 51, n),
        "lo_discount": rng.integers(0, 11, n),
        "lo_revenue": revenue,
        "lo_profit": revenue - supplycost,
        "lo_orderdate": keys["date"],
    }
    for dim, table in dims.items():
        for name, vals in table.items():
            columns[name] = np.asarray(vals)[keys[dim]]
    return {k: np.asarray(v, dtype=np.int64) for k, v in columns.items()}


def generate_to_dir(spec: WorkloadSpec, directory):
    columns = generate(spec)
    save_relation(directory, ssb_schema(), columns,
                  decode_info={"d_year": {"base": FIRST_YEAR}},
                  extra={"sf": spec.sf, "seed": spec.seed, "theta": spec.theta})
    return columns


# ---------------------------------------------------------------------------
# Query templates

@dataclass(frozen=True)
class QueryTemplate:
    name: str
    target_selectivity: float
    agg_op: str
    agg_attr: str
    group_by: tuple
    knobs: dict                    # knob name -> list of candidate values
    build: object                  # callable: {knob: value} -> predicate


@dataclass
class InstantiatedQuery:
    template: QueryTemplate
    query: Query
    achieved_selectivity: float
    degenerate: bool               # achieved not within a factor of 2 of target

    @property
    def text(self) -> str:
        return format_query(self.query.where, self.query.agg_op,
                            self.query.agg_attr, self.query.group_by)


def _geo_eq(prefix, region, nation=None, cities=None):
    items = [Cmp(f"{prefix}_region", "EQ", int(region))]
    if nation is not None:
        items.append(Cmp(f"{prefix}_nation_in_region", "EQ", int(nation)))
    if cities is not None:
        items.append(InList(f"{prefix}_city_in_nation",
                            tuple(int(c) for c in cities)))
    return items


_MFGR_PAIRS = [(i, j) for i in range(5) for j in range(i + 1, 5)]


def _combo_knob(*attr_names, limit=60):
    """Data-driven knob: candidate value tuples for a group of attributes,
    most frequent combination first, so conjunctive filters start from a
    non-empty selection."""
    def candidates(columns):
        stacked = np.stack([np.asarray(columns[a]) for a in attr_names], axis=1)
        combos, counts = np.unique(stacked, axis=0, return_counts=True)
        order = np.argsort(-counts, kind="stable")
        return [tuple(int(v) for v in combos[i]) for i in order[:limit]]
    return candidates


def _templates() -> list:
    t = []
    t.append(QueryTemplate(
        "q1.1", 2.3e-2, "SUM", "lo_revenue", (),
        knobs={"year": list(range(7)), "dlo": list(range(9)),
               "qhi": list(range(2, 51))},
        build=lambda k: And((
            Cmp("d_year", "EQ", k["year"]),
            Between("lo_discount", k["dlo"], k["dlo"] + 2),
            Cmp("lo_quantity", "LT", k["qhi"]),
        ))))
    t.append(QueryTemplate(
        "q1.2", 6.6e-4, "SUM", "lo_revenue", (),
        knobs={"ym": list(range(84)), "dlo": list(range(9)),
               "qlo": list(range(1, 42))},
        build=lambda k: And((
            Cmp("d_yearmonthnum", "EQ", k["ym"]),
            Between("lo_discount", k["dlo"], k["dlo"] + 2),
            Between("lo_quantity", k["qlo"], k["qlo"] + 9),
        ))))
    t.append(QueryTemplate(
        "q1.3", 8.4e-5, "SUM", "lo_revenue", (),
        knobs={"week": list(range(52)), "year": list(range(7)),
               "dlo": list(range(9)), "qlo": list(range(1, 47))},
        build=lambda k: And((
            Cmp("d_weeknuminyear", "EQ", k["week"]),
            Cmp("d_year", "EQ", k["year"]),
            Between("lo_discount", k["dlo"], k["dlo"] + 2),
            Between("lo_quantity", k["qlo"], k["qlo"] + 4),
        ))))
    t.append(QueryTemplate(
        "q2.1", 1.2e-2, "SUM", "lo_revenue", ("d_year", "p_brand_in_category"),
        knobs={"mfgr": list(range(5)), "cat": list(range(5)),
               "sregion": list(range(5))},
        build=lambda k: And((
            Cmp("p_mfgr", "EQ", k["mfgr"]),
            Cmp("p_category_in_mfgr", "EQ", k["cat"]),
            Cmp("s_region", "EQ", k["sregion"]),
        ))))
    t.append(QueryTemplate(
        "q2.2", 1.6e-3, "SUM", "lo_revenue", ("d_year", "p_brandmod8"),
        knobs={"mfgr": list(range(5)), "blo": list(range(0, 33, 8)),
               "sregion": list(range(5))},
        build=lambda k: And((
            Cmp("p_mfgr", "EQ", k["mfgr"]),
            Between("p_brand_in_category", k["blo"], k["blo"] + 7),
            Cmp("s_region", "EQ", k["sregion"]),
        ))))
    t.append(QueryTemplate(
        "q2.3", 2e-4, "SUM", "lo_revenue", ("d_year",),
        knobs={"mfgr": list(range(5)), "brand": list(range(40)),
               "sregion": list(range(5))},
        build=lambda k: And((
            Cmp("p_mfgr", "EQ", k["mfgr"]),
            Cmp("p_brand_in_category", "EQ", k["brand"]),
            Cmp("s_region", "EQ", k["sregion"]),
        ))))
    t.append(QueryTemplate(
        "q3.1", 3.4e-2, "SUM", "lo_revenue",
        ("c_nation_in_region", "s_nation_in_region", "d_trendyear"),
        knobs={"cregion": list(range(5)), "sregion": list(range(5))},
        build=lambda k: And(tuple(
            _geo_eq("c", k["cregion"]) + _geo_eq("s", k["sregion"])
            + [Cmp("d_year", "LE", 5)]))))
    t.append(QueryTemplate(
        "q3.2", 1.3e-3, "SUM", "lo_revenue",
        ("c_city_in_nation", "s_city_in_nation", "d_trendyear"),
        knobs={"cgeo": _combo_knob("c_region", "c_nation_in_region"),
               "sgeo": _combo_knob("s_region", "s_nation_in_region")},
        build=lambda k: And(tuple(
            _geo_eq("c", *k["cgeo"]) + _geo_eq("s", *k["sgeo"])
            + [Cmp("d_year", "LE", 5)]))))

    def _city_pair(city):
        return (city, (city + 5) % 10)   # the two cities differ in parity

    t.append(QueryTemplate(
        "q3.3", 4.7e-5, "SUM", "lo_revenue",
        ("c_citybit", "s_citybit", "d_trendyear"),
        knobs={"cgeo": _combo_knob("c_region", "c_nation_in_region",
                                   "c_city_in_nation"),
               "sgeo": _combo_knob("s_region", "s_nation_in_region",
                                   "s_city_in_nation")},
        build=lambda k: And(tuple(
            _geo_eq("c", k["cgeo"][0], k["cgeo"][1], _city_pair(k["cgeo"][2]))
            + _geo_eq("s", k["sgeo"][0], k["sgeo"][1], _city_pair(k["sgeo"][2]))
            + [Cmp("d_year", "LE", 5)]))))
    t.append(QueryTemplate(
        "q3.4", 6.6e-7, "SUM", "lo_revenue", ("c_citybit", "s_citybit"),
        knobs={"cgeo": _combo_knob("c_region", "c_nation_in_region",
                                   "c_city_in_nation"),
               "sgeo": _combo_knob("s_region", "s_nation_in_region",
                                   "s_city_in_nation"),
               "ym": list(range(84))},
        build=lambda k: And(tuple(
            _geo_eq("c", k["cgeo"][0], k["cgeo"][1], _city_pair(k["cgeo"][2]))
            + _geo_eq("s", k["sgeo"][0], k["sgeo"][1], _city_pair(k["sgeo"][2]))
            + [Cmp("d_yearmonthnum", "EQ", k["ym"])]))))
    t.append(QueryTemplate(
        "q4.1", 2e-2, "SUM", "lo_profit", ("d_year", "c_nation_in_region"),
        knobs={"cregion": list(range(5)), "sregion": list(range(5)),
               "mfgrs": _MFGR_PAIRS},
        build=lambda k: And(tuple(
            _geo_eq("c", k["cregion"]) + _geo_eq("s", k["sregion"])
            + [InList("p_mfgr", tuple(int(m) for m in k["mfgrs"]))]))))
    t.append(QueryTemplate(
        "q4.2", 2.3e-3, "SUM", "lo_profit",
        ("d_yearparity", "s_nation_in_region", "p_category_in_mfgr"),
        knobs={"cregion": list(range(5)), "sregion": list(range(5)),
               "mfgrs": _MFGR_PAIRS},
        build=lambda k: And(tuple(
            _geo_eq("c", k["cregion"]) + _geo_eq("s", k["sregion"])
            + [InList("p_mfgr", tuple(int(m) for m in k["mfgrs"])),
               InList("d_year", (5, 6))]))))
    t.append(QueryTemplate(
        "q4.3", 9.1e-5, "SUM", "lo_profit",
        ("d_yearparity", "s_city_in_nation", "p_brand_in_category"),
        knobs={"sgeo": _combo_knob("s_region", "s_nation_in_region"),
               "pcat": _combo_knob("p_mfgr", "p_category_in_mfgr")},
        build=lambda k: And(tuple(
            _geo_eq("s", *k["sgeo"])
            + [InList("d_year", (5, 6)),
               Cmp("p_mfgr", "EQ", k["pcat"][0]),
               Cmp("p_category_in_mfgr", "EQ", k["pcat"][1])]))))
    return t


TEMPLATES = _templates()
TEMPLATES_BY_NAME = {t.name: t for t in TEMPLATES}


def _selectivity(pred, columns: dict) -> float:
    return float(evaluate(pred, columns).mean())


def instantiate_query(template: QueryTemplate, columns: dict,
                      max_passes: int = 4) -> InstantiatedQuery:
    """Coordinate-descent knob tuning toward the target selectivity.

    Each pass sweeps every knob over its candidates, keeping the value that
    minimizes |log(achieved / target)|; zero-selectivity candidates score as
    half a record.  Stops early once within a factor of two.
    """
    n = len(next(iter(columns.values())))
    floor = 0.5 / n
    target = template.target_selectivity

    def score(sel: float) -> float:
        return abs(math.log(max(sel, floor) / target))

    knobs = {name: (cands(columns) if callable(cands) else cands)
             for name, cands in template.knobs.items()}
    values = {name: cands[0] for name, cands in knobs.items()}
    best = score(_selectivity(template.build(values), columns))
    for _ in range(max_passes):
        improved = False
        for name, cands in knobs.items():
            for cand in cands:
                trial = dict(values, **{name: cand})
                s = score(_selectivity(template.build(trial), columns))
                if s < best - 1e-12:
                    best, values, improved = s, trial, True
        if not improved or best <= math.log(2):
            break

    pred = template.build(values)
    achieved = _selectivity(pred, columns)
    degenerate = achieved <= 0.0 or not (target / 2 <= achieved <= target * 2)
    query = Query(where=pred, agg_op=template.agg_op, agg_attr=template.agg_attr,
                  group_by=template.group_by, name=template.name)
    return InstantiatedQuery(template=template, query=query,
                             achieved_selectivity=achieved, degenerate=degenerate)


def instantiate_all(columns: dict, max_passes: int = 4) -> list:
    return [instantiate_query(t, columns, max_passes) for t in TEMPLATES]
