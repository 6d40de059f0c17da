"""Benchmark driver: generate data, calibrate models, run suites, report.

Subcommands: generate, calibrate, run, report.  Options may come from an
INI config file (section name = subcommand, ``key = value``); command-line
flags override the file.  The PIMOLAP_OUT environment variable sets the
default output directory.  Exit codes: 0 ok, 1 user error, 2 internal
error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

from pimolap.calibrate import (
    DEFAULT_M_VALUES, DEFAULT_N_VALUES, DEFAULT_R_VALUES, DEFAULT_S_VALUES,
    calibrate,
)
from pimolap.device import PimDevice
from pimolap.engine import EXECUTION_MODES, ModelTables, Query, QueryEngine
from pimolap.layout import LAYOUT_MODES, load, load_relation, place
from pimolap.ledger import CostParams
from pimolap.qparse import parse_query
from pimolap.workload import WorkloadSpec, generate_to_dir, instantiate_all

OUT_ENV_VAR = "PIMOLAP_OUT"

REPORT_COLUMNS = (
    ("query", None),
    ("mode", None),
    ("layout", None),
    ("k", None),
    ("k_max", None),
    ("selectivity", None),
    ("total_latency", "s"),
    ("pim_energy", "J"),
    ("peak_power", "W/chip"),
    ("max_row_writes", "writes"),
    ("required_endurance_10y", "writes/cell"),
)
GEOMEAN_METRICS = ("total_latency", "pim_energy", "peak_power",
                   "required_endurance_10y")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):        # user error -> exit code 1, not 2
        raise CliError(message)


def _default_out() -> str:
    return os.environ.get(OUT_ENV_VAR, "pimolap-out")


def _int_list(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _float_list(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _str_list(text: str) -> tuple:
    return tuple(x for x in text.replace(",", " ").split())


def _parse_params(pairs) -> dict:
    overrides = {}
    for pair in pairs or ():
        name, sep, value = pair.partition("=")
        if not sep:
            raise CliError(f"--param expects name=value, got {pair!r}")
        try:
            overrides[name] = float(value)
        except ValueError:
            raise CliError(f"--param {name}: {value!r} is not a number") from None
    return overrides


# ---------------------------------------------------------------------------
# Parser construction

def build_parser():
    parser = _Parser(prog="pimolap",
                     description="Desk-scale bulk-bitwise PIM OLAP simulator")
    parser.add_argument("--config", help="INI config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subparsers = {}

    p = sub.add_parser("generate",
                       help="generate a dataset and its query files")
    p.add_argument("--out", default=None,
                   help=f"dataset directory (default <{OUT_ENV_VAR}>/dataset)")
    p.add_argument("--sf", type=float, default=0.01,
                   help="scale factor; 1.0 = 6,000,000 records (default 0.01)")
    p.add_argument("--seed", type=int, default=7, help="RNG seed (default 7)")
    p.add_argument("--theta", type=float, default=1.0,
                   help="Zipf exponent for dimension-key skew (default 1.0)")
    p.add_argument("--base-rows", type=int, default=6_000_000,
                   help="fact records at scale factor 1 (default 6000000)")
    p.set_defaults(func=cmd_generate)
    subparsers["generate"] = p

    p = sub.add_parser("calibrate",
                       help="fit the planner's latency models for one layout")
    p.add_argument("--layout", choices=LAYOUT_MODES, default="one-xb")
    p.add_argument("--out", default=None,
                   help=f"output directory (default <{OUT_ENV_VAR}>)")
    p.add_argument("--m-values", type=_int_list, default=DEFAULT_M_VALUES,
                   help="page counts to measure (default 1,2,4,8,16)")
    p.add_argument("--r-values", type=_float_list, default=DEFAULT_R_VALUES,
                   help="selected fractions to measure")
    p.add_argument("--s-values", type=_int_list, default=DEFAULT_S_VALUES,
                   help="reads-per-record values to measure (default 1,2,3,4)")
    p.add_argument("--n-values", type=_int_list, default=DEFAULT_N_VALUES,
                   help="value granule counts to measure (default 1,2,3,4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--param", action="append", metavar="NAME=VALUE",
                   help="cost parameter override, repeatable")
    p.set_defaults(func=cmd_calibrate)
    subparsers["calibrate"] = p

    p = sub.add_parser("run",
                       help="run the query suite and write a report")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--layout", choices=LAYOUT_MODES, default="one-xb")
    p.add_argument("--modes", type=_str_list, default=("hybrid",),
                   help=f"comma list from {', '.join(EXECUTION_MODES)}")
    p.add_argument("--queries", type=_str_list, default=None,
                   help="comma list of query names (default: all)")
    p.add_argument("--models-dir", default=None,
                   help=f"directory with model JSON files (default <{OUT_ENV_VAR}>)")
    p.add_argument("--models", default=None,
                   help="explicit model table file for hybrid mode")
    p.add_argument("--models-baseline", default=None,
                   help="explicit model table file for logic-agg-baseline mode")
    p.add_argument("--out", default=None,
                   help="report path prefix (default <models-dir>/report)")
    p.add_argument("--param", action="append", metavar="NAME=VALUE",
                   help="cost parameter override, repeatable")
    p.set_defaults(func=cmd_run)
    subparsers["run"] = p

    p = sub.add_parser("report",
                       help="re-emit a run report as CSV or JSON")
    p.add_argument("--report", required=True, help="report JSON file from run")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None, help="output file (default stdout)")
    p.set_defaults(func=cmd_report)
    subparsers["report"] = p

    return parser, subparsers


def _apply_config(parser_and_subs, config_path: str, argv):
    """INI values become defaults of the selected subcommand's parser."""
    parser, subparsers = parser_and_subs
    cfg = configparser.ConfigParser()
    if not cfg.read(config_path):
        raise CliError(f"cannot read config file {config_path!r}")
    command = next((a for a in argv if a in subparsers), None)
    if command is None or not cfg.has_section(command):
        return
    sub = subparsers[command]
    actions = {a.dest: a for a in sub._actions}
    for key, raw in cfg.items(command):
        dest = key.replace("-", "_")
        if dest not in actions:
            raise CliError(f"config [{command}] has unknown option {key!r}")
        action = actions[dest]
        if isinstance(action, argparse._AppendAction):
            value = [v for v in raw.splitlines() if v.strip()]
        elif action.type is not None:
            value = action.type(raw)
        elif isinstance(action.default, bool):
            value = cfg.getboolean(command, key)
        else:
            value = raw
        if action.choices and value not in action.choices:
            raise CliError(f"config [{command}] {key} = {raw!r} is not one of "
                           f"{sorted(action.choices)}")
        sub.set_defaults(**{dest: value})


# ---------------------------------------------------------------------------
# Subcommands

def cmd_generate(args) -> int:
    out = Path(args.out or Path(_default_out()) / "dataset")
    spec = WorkloadSpec(sf=args.sf, seed=args.seed, theta=args.theta,
                        base_rows=args.base_rows)
    columns = generate_to_dir(spec, out)
    instances = instantiate_all(columns)
    qdir = out / "queries"
    qdir.mkdir(parents=True, exist_ok=True)
    index = []
    for inst in instances:
        (qdir / f"{inst.template.name}.query").write_text(inst.text)
        index.append({
            "name": inst.template.name,
            "target_selectivity": inst.template.target_selectivity,
            "achieved_selectivity": inst.achieved_selectivity,
            "degenerate": inst.degenerate,
            "group_by": list(inst.template.group_by),
        })
    (qdir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    print(f"generated {spec.n_records} records into {out}")
    for row in index:
        tag = " (degenerate)" if row["degenerate"] else ""
        print(f"  {row['name']}: selectivity {row['achieved_selectivity']:.3g} "
              f"(target {row['target_selectivity']:.3g}){tag}")
    return 0


def cmd_calibrate(args) -> int:
    out = Path(args.out or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    params = CostParams().with_overrides(_parse_params(args.param))
    tables = calibrate(args.layout, m_values=args.m_values, r_values=args.r_values,
                       s_values=args.s_values, n_values=args.n_values,
                       params=params, seed=args.seed)
    for flavor, t in tables.items():
        path = out / f"models-{args.layout}-{flavor}.json"
        path.write_text(t.to_json())
        print(f"wrote {path}")
        for s in sorted(t.a):
            print(f"  host-gb s={s}: R^2 = {t.r2_host[s]:.4f}")
        for n in sorted(t.pim_slope):
            print(f"  pim-gb  n={n}: R^2 = {t.r2_pim[n]:.6f}")
    return 0


def _load_tables(path: Path) -> ModelTables:
    if not path.exists():
        raise CliError(f"model table file {path} not found; run `pimolap calibrate`")
    return ModelTables.from_json(path.read_text())


def _load_queries(dataset: Path, names) -> list:
    qdir = dataset / "queries"
    files = sorted(qdir.glob("*.query"))
    if not files:
        raise CliError(f"no query files under {qdir}")
    queries = []
    for f in files:
        parsed = parse_query(f.read_text())
        queries.append(Query(where=parsed.where, agg_op=parsed.agg_op,
                             agg_attr=parsed.agg_attr, group_by=parsed.group_by,
                             name=f.stem))
    if names:
        by_name = {q.name: q for q in queries}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise CliError(f"unknown queries: {', '.join(missing)}")
        queries = [by_name[n] for n in names]
    return queries


def _geomean(values) -> float:
    positive = [v for v in values if v > 0]
    if not positive:
        return 0.0
    return math.exp(sum(math.log(v) for v in positive) / len(positive))


def _rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(name if unit is None else f"{name} [{unit}]"
               for name, unit in REPORT_COLUMNS)
    for row in rows:
        w.writerow(row.get(name, "") for name, _ in REPORT_COLUMNS)
    return buf.getvalue()


def cmd_run(args) -> int:
    dataset = Path(args.dataset)
    models_dir = Path(args.models_dir or _default_out())
    for mode in args.modes:
        if mode not in EXECUTION_MODES:
            raise CliError(f"unknown mode {mode!r}; choose from "
                           f"{', '.join(EXECUTION_MODES)}")
    params = CostParams().with_overrides(_parse_params(args.param))
    schema, columns, manifest = load_relation(dataset)
    device = PimDevice(params=params)
    placement = place(schema, args.layout, device.geometry)
    rel = load(columns, schema, placement, device)
    engine = QueryEngine(rel)
    queries = _load_queries(dataset, args.queries)

    tables_by_mode = {}
    if "hybrid" in args.modes:
        path = Path(args.models or models_dir / f"models-{args.layout}-alu.json")
        tables_by_mode["hybrid"] = _load_tables(path)
    if "logic-agg-baseline" in args.modes:
        path = Path(args.models_baseline
                    or models_dir / f"models-{args.layout}-baseline.json")
        tables_by_mode["logic-agg-baseline"] = _load_tables(path)

    rows = []
    for mode in args.modes:
        mode_rows = []
        for query in queries:
            run = engine.run_query(query, mode, tables_by_mode.get(mode))
            row = {
                "query": query.name,
                "mode": mode,
                "layout": args.layout,
                "k": run.meta["k"],
                "k_max": run.meta["k_max"],
                "selectivity": run.meta["selectivity"],
            }
            row.update(run.report.to_dict())
            mode_rows.append(row)
            print(f"{query.name} [{mode}] k={row['k']}/{row['k_max']} "
                  f"latency={row['total_latency']:.3e} s "
                  f"energy={row['pim_energy']:.3e} J")
        geo = {"query": "geomean", "mode": mode, "layout": args.layout}
        for metric in GEOMEAN_METRICS:
            geo[metric] = _geomean(r[metric] for r in mode_rows)
        rows.extend(mode_rows)
        rows.append(geo)

    config = {
        "dataset": str(dataset),
        "layout": args.layout,
        "modes": list(args.modes),
        "queries": [q.name for q in queries],
        "cost_params": {k: v for k, v in asdict(params).items()
                        if k != "logic_cycle_costs"},
        "logic_cycle_costs": params.logic_cycle_costs,
        "dataset_manifest": {k: manifest.get(k) for k in ("sf", "seed", "theta",
                                                          "n_records")},
        "geomean": "exp(mean(log(x))) over strictly positive entries",
    }
    out = Path(args.out or models_dir / "report")
    out.parent.mkdir(parents=True, exist_ok=True)
    report_json = out.with_suffix(".json")
    report_csv = out.with_suffix(".csv")
    report_json.write_text(json.dumps({"config": config, "rows": rows},
                                      indent=2, sort_keys=True))
    report_csv.write_text(_rows_to_csv(rows))
    print(f"wrote {report_json}")
    print(f"wrote {report_csv}")
    return 0


def cmd_report(args) -> int:
    data = json.loads(Path(args.report).read_text())
    if args.format == "csv":
        text = _rows_to_csv(data["rows"])
    else:
        text = json.dumps(data["rows"], indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subparsers = build_parser()
    try:
        pre = _Parser(add_help=False)
        pre.add_argument("--config")
        pre_args, _ = pre.parse_known_args(argv)
        if pre_args.config:
            _apply_config((parser, subparsers), pre_args.config, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (CliError, ValueError, OSError, configparser.Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit:
        raise
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
