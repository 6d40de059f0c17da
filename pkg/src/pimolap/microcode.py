"""Compiling predicates and updates into bulk-bitwise operation sequences.

A compiled program is a list of column-logic steps plus a declared cycle
count taken from the configurable cost table.  The steps define the
semantics; the declared count defines latency and logic energy, so cycle
counts are data-independent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pimolap.ledger import DEFAULT_LOGIC_CYCLE_COSTS


class CompileError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Predicate AST

CMP_OPS = ("EQ", "NEQ", "LT", "LE", "GT", "GE")


@dataclass(frozen=True)
class Cmp:
    attr: str
    op: str
    value: int


@dataclass(frozen=True)
class Between:
    attr: str
    lo: int
    hi: int


@dataclass(frozen=True)
class InList:
    attr: str
    values: tuple


@dataclass(frozen=True)
class And:
    items: tuple


@dataclass(frozen=True)
class Or:
    items: tuple


@dataclass(frozen=True)
class Not:
    item: object


@dataclass(frozen=True)
class ColumnBit:
    """A leaf referencing an already-materialized work-column bit."""
    col: int


TRUE = And(items=())


def attrs_of(pred) -> set:
    if isinstance(pred, (Cmp, Between, InList)):
        return {pred.attr}
    if isinstance(pred, (And, Or)):
        out = set()
        for it in pred.items:
            out |= attrs_of(it)
        return out
    if isinstance(pred, Not):
        return attrs_of(pred.item)
    if isinstance(pred, ColumnBit):
        return set()
    raise CompileError(f"unknown predicate node {pred!r}")


def evaluate(pred, columns: dict) -> np.ndarray:
    """Reference row-wise evaluation over host-side column arrays."""
    if isinstance(pred, Cmp):
        col = columns[pred.attr]
        v = pred.value
        if pred.op == "EQ":
            return col == v
        if pred.op == "NEQ":
            return col != v
        if pred.op == "LT":
            return col < v
        if pred.op == "LE":
            return col <= v
        if pred.op == "GT":
            return col > v
        if pred.op == "GE":
            return col >= v
        raise CompileError(f"unknown comparison {pred.op!r}")
    if isinstance(pred, Between):
        col = columns[pred.attr]
        return (col >= pred.lo) & (col <= pred.hi)
    if isinstance(pred, InList):
        col = columns[pred.attr]
        return np.isin(col, list(pred.values))
    if isinstance(pred, And):
        n = len(next(iter(columns.values()))) if columns else 0
        acc = np.ones(n, dtype=bool)
        for it in pred.items:
            acc &= evaluate(it, columns)
        return acc
    if isinstance(pred, Or):
        n = len(next(iter(columns.values()))) if columns else 0
        acc = np.zeros(n, dtype=bool)
        for it in pred.items:
            acc |= evaluate(it, columns)
        return acc
    if isinstance(pred, Not):
        return ~evaluate(pred.item, columns)
    raise CompileError(f"cannot evaluate predicate node {pred!r}")


# ---------------------------------------------------------------------------
# Cost table

@dataclass(frozen=True)
class MicrocodeCosts:
    """Declared cycle counts for compiled predicate shapes."""

    logic_cycle_costs: dict = field(default_factory=lambda: dict(DEFAULT_LOGIC_CYCLE_COSTS))

    def eq(self, width: int) -> int:
        return 2 * width + 1

    def cmp(self, width: int) -> int:
        # LT/LE/GT/GE share the three-ops-per-bit comparator shape
        return 3 * width + 2

    def neq(self, width: int) -> int:
        return self.eq(width) + self.op_cost("NOT")

    def between(self, width: int) -> int:
        return 2 * self.cmp(width) + self.op_cost("AND")

    def in_list(self, width: int, m: int) -> int:
        return m * self.eq(width) + (m - 1) * self.op_cost("OR")

    def op_cost(self, op: str) -> int:
        return self.logic_cycle_costs[op]


# ---------------------------------------------------------------------------
# Programs

Step = tuple  # (op, in_cols tuple, out_col)


@dataclass
class MicrocodeProgram:
    steps: list
    cycles: int
    out_col: int


@dataclass(frozen=True)
class MuxSpec:
    """MUX between in-memory value bits and an immediate, per-row select."""

    value_col_start: int
    width_bits: int
    immediate: int
    select_col: int
    scratch_col: int

    def validate(self, cols: int):
        if self.width_bits <= 0:
            raise CompileError("MUX width must be positive")
        if self.immediate < 0 or self.immediate >> self.width_bits:
            raise CompileError("immediate does not fit the value width")
        span = range(self.value_col_start, self.value_col_start + self.width_bits)
        if span.start < 0 or span.stop > cols:
            raise CompileError("value columns out of range")
        for c in (self.select_col, self.scratch_col):
            if not (0 <= c < cols):
                raise CompileError("select/scratch column out of range")
        if self.select_col in span or self.scratch_col in span or self.select_col == self.scratch_col:
            raise CompileError("select/scratch columns overlap the value span")


def compile_mux(spec: MuxSpec, costs: MicrocodeCosts | None = None,
                cols: int = 512) -> MicrocodeProgram:
    """Per-bit select between stored bits and an immediate.

    For each bit i: set bits of the immediate OR the select into the value
    bit; clear bits AND the negated select into it.  NOT(select) is
    materialized once; total bulk ops = width + 1.
    """
    costs = costs or MicrocodeCosts()
    spec.validate(cols)
    steps: list[Step] = [("NOT", (spec.select_col,), spec.scratch_col)]
    cycles = costs.op_cost("NOT")
    for i in range(spec.width_bits):
        v = spec.value_col_start + i
        if (spec.immediate >> i) & 1:
            steps.append(("OR", (v, spec.select_col), v))
            cycles += costs.op_cost("OR")
        else:
            steps.append(("AND", (v, spec.scratch_col), v))
            cycles += costs.op_cost("AND")
    return MicrocodeProgram(steps=steps, cycles=cycles, out_col=spec.value_col_start)


# ---------------------------------------------------------------------------
# Filter compiler

class _Regs:
    def __init__(self, cols):
        self.free = list(cols)
        if not self.free:
            raise CompileError("no scratch columns available")

    def alloc(self) -> int:
        if not self.free:
            raise CompileError("out of scratch columns for filter compilation")
        return self.free.pop()

    def release(self, col: int):
        self.free.append(col)


class FilterCompiler:
    """Compiles one predicate tree into a column-logic program.

    `attr_cols` maps attribute name -> (col_start, width_bits) for the
    partition being compiled.  The declared cycle count follows the cost
    table; the emitted step list realizes the same semantics with ping-pong
    scratch registers and may differ in raw step count.
    """

    def __init__(self, attr_cols: dict, scratch_cols, out_col: int,
                 costs: MicrocodeCosts | None = None):
        self.attr_cols = attr_cols
        self.out_col = out_col
        self.costs = costs or MicrocodeCosts()
        self.steps: list[Step] = []
        self.cycles = 0
        self.regs = _Regs([c for c in scratch_cols if c != out_col])

    # -- emission helpers ---------------------------------------------------

    def _emit(self, op, in_cols, out_col):
        self.steps.append((op, tuple(in_cols), out_col))

    def _attr(self, name: str):
        try:
            return self.attr_cols[name]
        except KeyError:
            raise CompileError(f"attribute {name!r} is not placed on this partition") from None

    def _check_imm(self, value: int, width: int, attr: str):
        if value < 0 or value >> width:
            raise CompileError(f"immediate {value} does not fit {width}-bit attribute {attr!r}")

    # -- leaf comparators ---------------------------------------------------

    def _eq(self, start: int, width: int, value: int) -> int:
        """acc = AND over bits of (value_i ? a_i : NOT a_i)."""
        acc = self.regs.alloc()
        bit0 = (value >> 0) & 1
        if bit0:
            self._emit("OR", (start, start), acc)       # copy
        else:
            self._emit("NOT", (start,), acc)
        for i in range(1, width):
            a = start + i
            if (value >> i) & 1:
                self._emit("AND", (acc, a), acc)
            else:
                self._emit("AND_NOT", (acc, a), acc)
        return acc

    def _lt_eq_pair(self, start: int, width: int, value: int):
        """MSB-to-LSB comparator; returns (lt_reg, eq_reg) for attr vs imm."""
        lt = self.regs.alloc()
        eq = self.regs.alloc()
        msb = start + width - 1
        if (value >> (width - 1)) & 1:
            self._emit("NOT", (msb,), lt)               # a_msb=0 -> a < c
            self._emit("OR", (msb, msb), eq)            # copy
        else:
            self._emit("AND_NOT", (msb, msb), lt)       # constant 0
            self._emit("NOT", (msb,), eq)
        tmp = self.regs.alloc()
        for i in range(width - 2, -1, -1):
            a = start + i
            if (value >> i) & 1:
                self._emit("AND_NOT", (eq, a), tmp)     # still-equal prefix and a_i=0
                self._emit("OR", (lt, tmp), lt)
                self._emit("AND", (eq, a), eq)
            else:
                self._emit("AND_NOT", (eq, a), eq)
        self.regs.release(tmp)
        return lt, eq

    def _cmp_leaf(self, pred: Cmp) -> int:
        start, width = self._attr(pred.attr)
        self._check_imm(pred.value, width, pred.attr)
        if pred.op == "EQ":
            self.cycles += self.costs.eq(width)
            return self._eq(start, width, pred.value)
        if pred.op == "NEQ":
            self.cycles += self.costs.neq(width)
            acc = self._eq(start, width, pred.value)
            out = self.regs.alloc()
            self._emit("NOT", (acc,), out)
            self.regs.release(acc)
            return out
        self.cycles += self.costs.cmp(width)
        lt, eq = self._lt_eq_pair(start, width, pred.value)
        if pred.op == "LT":
            self.regs.release(eq)
            return lt
        if pred.op == "GE":
            out = self.regs.alloc()
            self._emit("NOT", (lt,), out)
            self.regs.release(lt)
            self.regs.release(eq)
            return out
        if pred.op == "LE":
            self._emit("OR", (lt, eq), lt)
            self.regs.release(eq)
            return lt
        if pred.op == "GT":
            self._emit("OR", (lt, eq), lt)
            out = self.regs.alloc()
            self._emit("NOT", (lt,), out)
            self.regs.release(lt)
            self.regs.release(eq)
            return out
        raise CompileError(f"unknown comparison {pred.op!r}")

    def _between_leaf(self, pred: Between) -> int:
        start, width = self._attr(pred.attr)
        self._check_imm(pred.lo, width, pred.attr)
        self._check_imm(pred.hi, width, pred.attr)
        self.cycles += self.costs.between(width)
        lt_lo, eq_lo = self._lt_eq_pair(start, width, pred.lo)   # a >= lo == NOT lt_lo
        ge = self.regs.alloc()
        self._emit("NOT", (lt_lo,), ge)
        self.regs.release(lt_lo)
        self.regs.release(eq_lo)
        lt_hi, eq_hi = self._lt_eq_pair(start, width, pred.hi)   # a <= hi == lt_hi OR eq_hi
        self._emit("OR", (lt_hi, eq_hi), lt_hi)
        self.regs.release(eq_hi)
        self._emit("AND", (ge, lt_hi), ge)
        self.regs.release(lt_hi)
        return ge

    def _in_leaf(self, pred: InList) -> int:
        if not pred.values:
            raise CompileError("empty IN-list")
        start, width = self._attr(pred.attr)
        for v in pred.values:
            self._check_imm(v, width, pred.attr)
        self.cycles += self.costs.in_list(width, len(pred.values))
        acc = self._eq(start, width, pred.values[0])
        for v in pred.values[1:]:
            nxt = self._eq(start, width, v)
            self._emit("OR", (acc, nxt), acc)
            self.regs.release(nxt)
        return acc

    # -- tree walk ------------------------------------------------------------

    def _compile_node(self, pred) -> int:
        if isinstance(pred, Cmp):
            return self._cmp_leaf(pred)
        if isinstance(pred, Between):
            return self._between_leaf(pred)
        if isinstance(pred, InList):
            return self._in_leaf(pred)
        if isinstance(pred, ColumnBit):
            out = self.regs.alloc()
            self._emit("OR", (pred.col, pred.col), out)  # copy, zero declared cost
            return out
        if isinstance(pred, (And, Or)):
            op = "AND" if isinstance(pred, And) else "OR"
            if not pred.items:
                # constant: TRUE for AND, FALSE for OR
                out = self.regs.alloc()
                any_col = self.out_col
                if isinstance(pred, And):
                    # TRUE = NOT(x) OR x
                    self._emit("NOT", (any_col,), out)
                    self._emit("OR", (out, any_col), out)
                    self.cycles += self.costs.op_cost("NOT") + self.costs.op_cost("OR")
                else:
                    self._emit("AND_NOT", (any_col, any_col), out)
                    self.cycles += self.costs.op_cost("AND_NOT")
                return out
            acc = self._compile_node(pred.items[0])
            for it in pred.items[1:]:
                nxt = self._compile_node(it)
                self._emit(op, (acc, nxt), acc)
                self.cycles += self.costs.op_cost(op)
                self.regs.release(nxt)
            return acc
        if isinstance(pred, Not):
            inner = self._compile_node(pred.item)
            out = self.regs.alloc()
            self._emit("NOT", (inner,), out)
            self.cycles += self.costs.op_cost("NOT")
            self.regs.release(inner)
            return out
        raise CompileError(f"cannot compile predicate node {pred!r}")

    def compile(self, pred) -> MicrocodeProgram:
        res = self._compile_node(pred)
        self._emit("OR", (res, res), self.out_col)  # move into the result column
        self.regs.release(res)
        return MicrocodeProgram(steps=self.steps, cycles=self.cycles, out_col=self.out_col)


def compile_filter(pred, attr_cols: dict, scratch_cols, out_col: int,
                   costs: MicrocodeCosts | None = None) -> MicrocodeProgram:
    """Compile `pred` so the result column holds 1 exactly for passing rows."""
    return FilterCompiler(attr_cols, scratch_cols, out_col, costs).compile(pred)


def split_conjunction_by_partition(pred, attr_partition: dict) -> dict:
    """Split a top-level conjunction into per-partition subtrees.

    Every non-AND subtree must reference attributes of a single partition;
    arbitrary cross-partition boolean structure is rejected.
    """
    terms: list = []

    def flatten(node):
        if isinstance(node, And):
            for it in node.items:
                flatten(it)
        else:
            terms.append(node)

    flatten(pred)
    by_part: dict[int, list] = {}
    for term in terms:
        parts = {attr_partition[a] for a in attrs_of(term)}
        if len(parts) > 1:
            raise CompileError(
                "predicate term spans multiple partitions; only per-partition "
                "conjunctions are supported in two-xb layout"
            )
        part = parts.pop() if parts else 0
        by_part.setdefault(part, []).append(term)
    return {p: (ts[0] if len(ts) == 1 else And(items=tuple(ts)))
            for p, ts in by_part.items()}
