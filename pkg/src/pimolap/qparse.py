"""Line-oriented query description format.

    WHERE <predicate expression>
    AGG <SUM|MIN|MAX> <attribute>
    GROUPBY <attribute> [<attribute> ...]      (optional)

Predicate grammar (immediates are integer dictionary codes):

    expr    := orexpr
    orexpr  := andexpr { OR andexpr }
    andexpr := unary { AND unary }
    unary   := NOT unary | '(' expr ')' | leaf
    leaf    := ident (== | != | < | <= | > | >=) int
             | ident BETWEEN int AND int
             | ident IN '(' int {',' int} ')'
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from pimolap.microcode import And, Between, Cmp, InList, Not, Or, TRUE

AGG_OPS = ("SUM", "MIN", "MAX")


class ParseError(ValueError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"line {line}, column {col}: {msg}")
        self.line = line
        self.col = col


@dataclass
class ParsedQuery:
    where: object
    agg_op: str
    agg_attr: str
    group_by: tuple


_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+)|(?P<ident>[A-Za-z_][A-Za-z0-9_.]*)"
    r"|(?P<op>==|!=|<=|>=|<|>|\(|\)|,))"
)

_KEYWORDS = {"AND", "OR", "NOT", "BETWEEN", "IN"}


class _Tokens:
    def __init__(self, text: str, line: int):
        self.line = line
        self.toks: list[tuple[str, str, int]] = []  # (kind, value, col)
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if not m or m.end() == pos:
                stripped = text[pos:].lstrip()
                if not stripped:
                    break
                col = pos + (len(text[pos:]) - len(stripped)) + 1
                raise ParseError(f"unexpected character {stripped[0]!r}", line, col)
            col = m.start(m.lastgroup) + 1
            kind = m.lastgroup
            value = m.group(kind)
            if kind == "ident" and value.upper() in _KEYWORDS:
                kind, value = "kw", value.upper()
            self.toks.append((kind, value, col))
            pos = m.end()
        self.i = 0

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None, len(self.toks) + 1)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, kind, value=None):
        k, v, col = self.next()
        if k != kind or (value is not None and v != value):
            want = value or kind
            raise ParseError(f"expected {want}, found {v!r}", self.line, col)
        return v, col

    def at_end(self):
        return self.i >= len(self.toks)


def _parse_int(toks: _Tokens) -> int:
    k, v, col = toks.next()
    if k != "num":
        raise ParseError(f"expected integer, found {v!r}", toks.line, col)
    return int(v)


def _parse_leaf(toks: _Tokens):
    k, v, col = toks.next()
    if k == "op" and v == "(":
        inner = _parse_or(toks)
        toks.expect("op", ")")
        return inner
    if k == "kw" and v == "NOT":
        toks.i -= 1
        return _parse_unary(toks)
    if k != "ident":
        raise ParseError(f"expected attribute name, found {v!r}", toks.line, col)
    attr = v
    k2, v2, col2 = toks.next()
    if k2 == "op" and v2 in ("==", "!=", "<", "<=", ">", ">="):
        value = _parse_int(toks)
        op = {"==": "EQ", "!=": "NEQ", "<": "LT", "<=": "LE", ">": "GT", ">=": "GE"}[v2]
        return Cmp(attr=attr, op=op, value=value)
    if k2 == "kw" and v2 == "BETWEEN":
        lo = _parse_int(toks)
        toks.expect("kw", "AND")
        hi = _parse_int(toks)
        return Between(attr=attr, lo=lo, hi=hi)
    if k2 == "kw" and v2 == "IN":
        toks.expect("op", "(")
        values = [_parse_int(toks)]
        while toks.peek()[:2] == ("op", ","):
            toks.next()
            values.append(_parse_int(toks))
        toks.expect("op", ")")
        return InList(attr=attr, values=tuple(values))
    raise ParseError(f"expected comparison after {attr!r}, found {v2!r}", toks.line, col2)


def _parse_unary(toks: _Tokens):
    if toks.peek()[:2] == ("kw", "NOT"):
        toks.next()
        return Not(item=_parse_unary(toks))
    return _parse_leaf(toks)


def _parse_and(toks: _Tokens):
    items = [_parse_unary(toks)]
    while toks.peek()[:2] == ("kw", "AND"):
        toks.next()
        items.append(_parse_unary(toks))
    return items[0] if len(items) == 1 else And(items=tuple(items))


def _parse_or(toks: _Tokens):
    items = [_parse_and(toks)]
    while toks.peek()[:2] == ("kw", "OR"):
        toks.next()
        items.append(_parse_and(toks))
    return items[0] if len(items) == 1 else Or(items=tuple(items))


def parse_query(text: str) -> ParsedQuery:
    where = None
    agg_op = None
    agg_attr = None
    group_by: tuple = ()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        head = head.upper()
        if head in seen:
            raise ParseError(f"duplicate {head} line", lineno, 1)
        seen.add(head)
        if head == "WHERE":
            toks = _Tokens(rest, lineno)
            where = _parse_or(toks)
            if not toks.at_end():
                _, v, col = toks.peek()
                raise ParseError(f"trailing input {v!r}", lineno, col)
        elif head == "AGG":
            parts = rest.split()
            if len(parts) != 2 or parts[0].upper() not in AGG_OPS:
                raise ParseError("AGG line must be 'AGG <SUM|MIN|MAX> <attribute>'", lineno, 1)
            agg_op, agg_attr = parts[0].upper(), parts[1]
        elif head == "GROUPBY":
            group_by = tuple(rest.split())
            if not group_by:
                raise ParseError("GROUPBY line names no attributes", lineno, 1)
        else:
            raise ParseError(f"unknown directive {head!r}", lineno, 1)
    if agg_op is None:
        raise ParseError("missing AGG line", 1, 1)
    if where is None:
        where = TRUE
    return ParsedQuery(where=where, agg_op=agg_op, agg_attr=agg_attr, group_by=group_by)


def _format_pred(pred, parent=None) -> str:
    if isinstance(pred, Cmp):
        sym = {"EQ": "==", "NEQ": "!=", "LT": "<", "LE": "<=", "GT": ">", "GE": ">="}[pred.op]
        return f"{pred.attr} {sym} {pred.value}"
    if isinstance(pred, Between):
        return f"{pred.attr} BETWEEN {pred.lo} AND {pred.hi}"
    if isinstance(pred, InList):
        return f"{pred.attr} IN ({', '.join(str(v) for v in pred.values)})"
    if isinstance(pred, Not):
        return f"NOT {_format_pred(pred.item, 'NOT')}"
    if isinstance(pred, (And, Or)):
        joiner = " AND " if isinstance(pred, And) else " OR "
        body = joiner.join(_format_pred(it, type(pred).__name__) for it in pred.items)
        if parent is not None and pred.items:
            return f"({body})"
        return body
    raise ValueError(f"cannot format predicate {pred!r}")


def format_query(where, agg_op: str, agg_attr: str, group_by=()) -> str:
    lines = []
    if where is not None and where != TRUE:
        lines.append(f"WHERE {_format_pred(where)}")
    lines.append(f"AGG {agg_op} {agg_attr}")
    if group_by:
        lines.append("GROUPBY " + " ".join(group_by))
    return "\n".join(lines) + "\n"
