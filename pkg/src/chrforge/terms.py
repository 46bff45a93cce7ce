"""Term representation for the ground CHR dialect.

Two layers live here:

* the syntactic layer (`Var`, `Int`, `Atom`, `Struct`) produced by the
  parser and manipulated by every compiler pass, and
* the runtime value layer, where ground terms are plain Python data:
  ``int`` for integers, ``str`` for atoms, and ``(name, v1, ..., vn)``
  tuples for compound terms.  Plain values keep store lookups and guard
  evaluation on native comparisons.

A total order on ground values (`ground_key`) backs the tree indexes:
integers sort before atoms, atoms before compounds; compounds order by
name, then arity, then arguments left to right.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Tuple, Union

ARITH_OPS = {"+", "-", "*", "//", "mod", "min", "max"}


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Int:
    value: int

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Atom:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Struct:
    """Compound term; arithmetic operators are Structs with names in ARITH_OPS."""

    name: str
    args: Tuple["Term", ...]

    def __str__(self) -> str:
        if self.name in ("+", "-", "*", "//", "mod") and len(self.args) == 2:
            return f"{render_operand(self.args[0])} {self.name} {render_operand(self.args[1])}"
        if self.name == "-" and len(self.args) == 1:
            return f"-{render_operand(self.args[0])}"
        inner = ",".join(str(a) for a in self.args)
        return f"{self.name}({inner})"


Term = Union[Var, Int, Atom, Struct]

# Runtime ground values: int | str | tuple.
Value = Union[int, str, tuple]


def render_operand(t: Term) -> str:
    # Parenthesize nested binary arithmetic so rendering round-trips.
    if isinstance(t, Struct) and t.name in ("+", "-", "*", "//", "mod") and len(t.args) == 2:
        return f"({t})"
    return str(t)


def term_vars(t: Term) -> Iterator[Var]:
    if isinstance(t, Var):
        yield t
    elif isinstance(t, Struct):
        for a in t.args:
            yield from term_vars(a)


def is_ground(t: Term) -> bool:
    return not any(True for _ in term_vars(t))


def is_arith(t: Term) -> bool:
    return isinstance(t, Struct) and t.name in ARITH_OPS


def to_value(t: Term) -> Value:
    """Lower a ground, arithmetic-free term to its runtime value."""
    if isinstance(t, Int):
        return t.value
    if isinstance(t, Atom):
        return t.name
    if isinstance(t, Struct):
        if t.name in ARITH_OPS:
            raise ValueError(f"arithmetic term {t} has no direct value form")
        return (t.name,) + tuple(to_value(a) for a in t.args)
    raise ValueError(f"non-ground term {t} has no value form")


def value_to_term(v: Value) -> Term:
    if isinstance(v, bool):  # guard against accidental bools
        raise ValueError("boolean is not a store value")
    if isinstance(v, int):
        return Int(v)
    if isinstance(v, str):
        return Atom(v)
    return Struct(v[0], tuple(value_to_term(a) for a in v[1:]))


def render_value(v: Value) -> str:
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return v
    if len(v) == 1:
        return v[0]
    return f"{v[0]}({','.join(render_value(a) for a in v[1:])})"


def ground_key(v: Value):
    """Total-order sort key: integers < atoms < compounds."""
    if isinstance(v, int):
        return (0, v)
    if isinstance(v, str):
        return (1, v)
    return (2, v[0], len(v) - 1, tuple(ground_key(a) for a in v[1:]))
