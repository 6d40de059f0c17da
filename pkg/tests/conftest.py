"""Shared fixtures and independent oracles for the test suite.

The group-by oracle is pandas-based and the predicate oracle is a direct
recursive evaluator over host arrays, so neither shares code with the
engine's execution paths.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from pimolap.calibrate import calibrate
from pimolap.device import PimDevice
from pimolap.engine import QueryEngine
from pimolap.layout import load, place
from pimolap.microcode import And, Between, Cmp, InList, Not, Or, ColumnBit
from pimolap.workload import WorkloadSpec, generate, instantiate_all, ssb_schema


def predicate_mask(pred, df: pd.DataFrame) -> pd.Series:
    """Independent recursive predicate evaluation over a DataFrame."""
    if isinstance(pred, Cmp):
        col = df[pred.attr]
        return {
            "EQ": col == pred.value,
            "NEQ": col != pred.value,
            "LT": col < pred.value,
            "LE": col <= pred.value,
            "GT": col > pred.value,
            "GE": col >= pred.value,
        }[pred.op]
    if isinstance(pred, Between):
        return df[pred.attr].between(pred.lo, pred.hi)
    if isinstance(pred, InList):
        return df[pred.attr].isin(pred.values)
    if isinstance(pred, And):
        acc = pd.Series(True, index=df.index)
        for item in pred.items:
            acc &= predicate_mask(item, df)
        return acc
    if isinstance(pred, Or):
        acc = pd.Series(False, index=df.index)
        for item in pred.items:
            acc |= predicate_mask(item, df)
        return acc
    if isinstance(pred, Not):
        return ~predicate_mask(pred.item, df)
    raise TypeError(f"oracle cannot evaluate {pred!r}")


def groupby_oracle(query, df: pd.DataFrame) -> dict:
    """Brute-force filter + group-by aggregation via pandas."""
    sel = df[predicate_mask(query.where, df)]
    if sel.empty:
        return {}
    op = {"SUM": "sum", "MIN": "min", "MAX": "max"}[query.agg_op]
    if query.group_by:
        grouped = sel.groupby(list(query.group_by))[query.agg_attr].agg(op)
        return {k if isinstance(k, tuple) else (k,): int(v)
                for k, v in grouped.items()}
    return {(): int(sel[query.agg_attr].agg(op))}


def make_engine(columns, schema, layout):
    device = PimDevice()
    placement = place(schema, layout, device.geometry)
    rel = load(columns, schema, placement, device)
    return QueryEngine(rel)


@pytest.fixture(scope="session")
def sf001_columns():
    return generate(WorkloadSpec(sf=0.01))


@pytest.fixture(scope="session")
def sf001_df(sf001_columns):
    return pd.DataFrame(sf001_columns)


@pytest.fixture(scope="session")
def sf001_queries(sf001_columns):
    return instantiate_all(sf001_columns)


@pytest.fixture(scope="session")
def schema():
    return ssb_schema()


@pytest.fixture(scope="session")
def engine_one(sf001_columns, schema):
    return make_engine(sf001_columns, schema, "one-xb")


@pytest.fixture(scope="session")
def engine_two(sf001_columns, schema):
    return make_engine(sf001_columns, schema, "two-xb")


QUICK_M = (1, 2, 4)
QUICK_R = (1e-3, 1e-2, 0.05, 0.1, 0.5)


@pytest.fixture(scope="session")
def tables_one():
    return calibrate("one-xb", m_values=QUICK_M, r_values=QUICK_R)


@pytest.fixture(scope="session")
def tables_two():
    return calibrate("two-xb", m_values=QUICK_M, r_values=QUICK_R)
