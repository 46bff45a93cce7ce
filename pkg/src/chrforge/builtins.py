"""Builtin guard/body predicates: registry, modes, and evaluation.

Builtins run over ground runtime values (see terms.py).  Each entry
declares which argument positions may bind a fresh variable; every other
position is an input.  ``=`` binds its left side when that side is an
otherwise-unbound variable and tests equality otherwise.

Geometry predicates support the diagram-parsing programs: points are
``pt(x,y)`` compounds, i.e. runtime tuples ``('pt', x, y)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .terms import Value


class EvalError(Exception):
    """Internal evaluation fault (type error, unbound input)."""


class ArithFailure(Exception):
    """Arithmetic fault that fails the derivation (division by zero)."""


@dataclass(frozen=True)
class BuiltinSpec:
    name: str
    arity: int
    out_positions: frozenset  # 1-based positions that may bind
    # test(args) -> bool for pure tests; compute(args) -> value for the
    # single out position of a functional builtin.
    test: Optional[Callable] = None
    compute: Optional[Callable] = None


def _pt(v: Value, who: str):
    if not (isinstance(v, tuple) and len(v) == 3 and v[0] == "pt"):
        raise EvalError(f"{who}: expected a pt(x,y) point, got {v!r}")
    if not (isinstance(v[1], int) and isinstance(v[2], int)):
        raise EvalError(f"{who}: point coordinates must be integers")
    return v[1], v[2]


def _sqdist(p: Value, q: Value, who: str) -> int:
    px, py = _pt(p, who)
    qx, qy = _pt(q, who)
    return (px - qx) ** 2 + (py - qy) ** 2


def _int(v: Value, who: str) -> int:
    if not isinstance(v, int):
        raise EvalError(f"{who}: expected an integer, got {v!r}")
    return v


def point_on_circle(p: Value, c: Value, r: Value) -> bool:
    return _sqdist(p, c, "point_on_circle") == _int(r, "point_on_circle") ** 2


def midpoint_value(p: Value, q: Value) -> Value:
    px, py = _pt(p, "midpoint")
    qx, qy = _pt(q, "midpoint")
    return ("pt", (px + qx) // 2, (py + qy) // 2)


class BuiltinRegistry:
    def __init__(self):
        self._specs: dict = {}
        self.near_tolerance = 25  # squared-distance bound for near/2

    def add(self, spec: BuiltinSpec):
        self._specs[(spec.name, spec.arity)] = spec

    def update(self, extra: dict):
        for spec in extra.values() if isinstance(extra, dict) else extra:
            self.add(spec)

    def get(self, name: str, arity: int) -> Optional[BuiltinSpec]:
        return self._specs.get((name, arity))

    def __contains__(self, key) -> bool:
        return key in self._specs


def _cmp_spec(name: str, fn: Callable) -> BuiltinSpec:
    def test(args):
        a, b = args
        if isinstance(a, int) and isinstance(b, int):
            return fn(a, b)
        raise EvalError(f"{name}: integer comparison on {a!r}, {b!r}")

    return BuiltinSpec(name, 2, frozenset(), test=test)


def default_registry() -> BuiltinRegistry:
    reg = BuiltinRegistry()
    reg.add(BuiltinSpec("true", 0, frozenset(), test=lambda args: True))
    reg.add(BuiltinSpec("fail", 0, frozenset(), test=lambda args: False))
    # '=' : out position 1 (assignment form V = Expr), equality test otherwise
    reg.add(
        BuiltinSpec(
            "=",
            2,
            frozenset([1]),
            test=lambda args: args[0] == args[1],
            compute=lambda args: args[1],
        )
    )
    reg.add(_cmp_spec("!=", lambda a, b: a != b))
    reg.add(_cmp_spec(">=", lambda a, b: a >= b))
    reg.add(_cmp_spec("<=", lambda a, b: a <= b))
    reg.add(_cmp_spec(">", lambda a, b: a > b))
    reg.add(_cmp_spec("<", lambda a, b: a < b))
    reg.add(
        BuiltinSpec(
            "point_on_circle",
            3,
            frozenset(),
            test=lambda args: point_on_circle(args[0], args[1], args[2]),
        )
    )
    reg.add(
        BuiltinSpec(
            "midpoint",
            3,
            frozenset([3]),
            test=lambda args: args[2] == midpoint_value(args[0], args[1]),
            compute=lambda args: midpoint_value(args[0], args[1]),
        )
    )

    def near_test(args, reg=reg):
        return _sqdist(args[0], args[1], "near") <= reg.near_tolerance

    reg.add(BuiltinSpec("near", 2, frozenset(), test=near_test))
    return reg


def arith_eval(op: str, args: list) -> int:
    for a in args:
        if not isinstance(a, int):
            raise EvalError(f"arithmetic on non-integer {a!r}")
    if op == "+":
        return args[0] + args[1]
    if op == "-":
        return args[0] - args[1] if len(args) == 2 else -args[0]
    if op == "*":
        return args[0] * args[1]
    if op == "//":
        if args[1] == 0:
            raise ArithFailure("division by zero")
        return args[0] // args[1]
    if op == "mod":
        if args[1] == 0:
            raise ArithFailure("division by zero")
        return args[0] % args[1]
    if op == "min":
        return min(args)
    if op == "max":
        return max(args)
    raise EvalError(f"unknown arithmetic operator {op}")
