"""Surface syntax for the ground CHR dialect.

Grammar (EBNF, `%` comments run to end of line)::

    program    ::= (decl | rule)*
    decl       ::= ":-" "chr_constraint" cspec ("," cspec)* "."
    cspec      ::= (IDENT | "(" "!=" ")" | "!=") "/" INT
    rule       ::= [IDENT "@"] heads ["\\" heads] ("<=>" | "==>")
                   [guard "|"] body "."
    heads      ::= head ("," head)*
    head       ::= IDENT ["(" term ("," term)* ")"] | term "!=" term
    guard      ::= call ("," call)*
    body       ::= ("true" | "fail" | call) ("," ("true"|"fail"|call))*
    call       ::= IDENT ["(" expr ("," expr)* ")"] | expr CMP expr
    CMP        ::= "=" | "!=" | ">=" | "<=" | ">" | "<"
    expr       ::= mul (("+"|"-") mul)* ; mul ::= unary (("*"|"//"|"mod") unary)*
    unary      ::= "-" unary | INT | VAR | IDENT ["(" expr ("," expr)* ")"]
                 | "(" expr ")"

Variables start with an uppercase letter or ``_``; atoms and constraint
names start lowercase.  Simpagation heads split at ``\\`` into kept
(before) and removed (after).  A rule with ``<=>`` and no ``\\`` removes
every head; ``==>`` keeps every head.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from .builtins import BuiltinRegistry, default_registry
from .terms import ARITH_OPS, Atom, Int, Struct, Term, Var, is_arith, is_ground, term_vars


class ChrError(Exception):
    pass


class ChrSyntaxError(ChrError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {msg}")
        self.line, self.col = line, col


class ChrProgramError(ChrError):
    """Raised by parse_program when validation fails."""

    def __init__(self, errors: Sequence[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


# ---------------------------------------------------------------------------
# program representation


@dataclass(frozen=True)
class HeadAtom:
    symbol: str
    arity: int
    args: tuple[Term, ...]
    occurrence_id: int  # dense per symbol, textual, 1-based

    def render(self) -> str:
        return render_atom(self.symbol, self.args)

    @property
    def key(self) -> tuple[str, int]:
        return (self.symbol, self.arity)


@dataclass(frozen=True)
class GuardCall:
    builtin: str
    args: tuple[Term, ...]
    # Rule-level mode: computed against the full head variable set; the
    # occurrence compiler re-derives modes against what is actually fixed
    # at scheduling time (see out_candidates).
    invars: frozenset = frozenset()
    outvars: frozenset = frozenset()
    all_vars: frozenset = frozenset()
    # Variables sitting alone at an out-capable argument position; the
    # guard binds whichever of these are still unfixed when it runs.
    out_candidates: frozenset = frozenset()

    def render(self) -> str:
        return render_call(self.builtin, self.args)


@dataclass(frozen=True)
class ChrCall:
    symbol: str
    arity: int
    args: tuple[Term, ...]

    def render(self) -> str:
        return render_atom(self.symbol, self.args)


@dataclass(frozen=True)
class TrueItem:
    def render(self) -> str:
        return "true"


@dataclass(frozen=True)
class FailItem:
    def render(self) -> str:
        return "fail"


BodyItem = Union[ChrCall, GuardCall, TrueItem, FailItem]


@dataclass
class Rule:
    name: Optional[str]
    kind: str  # simplification | propagation | simpagation
    kept: tuple[HeadAtom, ...]
    removed: tuple[HeadAtom, ...]
    guard: tuple[GuardCall, ...]
    body: tuple[BodyItem, ...]
    source_index: int

    @property
    def heads(self) -> tuple[HeadAtom, ...]:
        """Heads in textual order (kept side precedes the ``\\``)."""
        return self.kept + self.removed

    def is_removed(self, head: HeadAtom) -> bool:
        return any(h is head for h in self.removed)

    def head_vars(self) -> set:
        out = set()
        for h in self.heads:
            for a in h.args:
                out.update(v.name for v in term_vars(a))
        return out

    def render(self) -> str:
        parts = []
        if self.name:
            parts.append(f"{self.name} @ ")
        if self.kind == "propagation":
            parts.append(", ".join(h.render() for h in self.kept))
            parts.append(" ==> ")
        elif self.kind == "simplification":
            parts.append(", ".join(h.render() for h in self.removed))
            parts.append(" <=> ")
        else:
            parts.append(", ".join(h.render() for h in self.kept))
            parts.append(" \\ ")
            parts.append(", ".join(h.render() for h in self.removed))
            parts.append(" <=> ")
        if self.guard:
            parts.append(", ".join(g.render() for g in self.guard))
            parts.append(" | ")
        parts.append(", ".join(b.render() for b in self.body))
        parts.append(".")
        return "".join(parts)


@dataclass
class Program:
    decls: dict  # (symbol, arity) -> declaration order index
    rules: tuple[Rule, ...]
    builtins: BuiltinRegistry
    warnings: list = field(default_factory=list)

    def occurrences(self, symbol: str, arity: int):
        """All head occurrences of symbol/arity in textual order.

        Yields (rule, head, removed_flag).
        """
        for r in self.rules:
            for h in r.heads:
                if h.symbol == symbol and h.arity == arity:
                    yield r, h, r.is_removed(h)

    def constraint_keys(self):
        return sorted(self.decls.keys())

    def render(self) -> str:
        lines = []
        for sym, ar in self.decls:
            name = f"({sym})" if not _IDENT_RE.fullmatch(sym) else sym
            lines.append(f":- chr_constraint {name}/{ar}.")
        if self.rules:
            lines.append("")
        for r in self.rules:
            lines.append(r.render())
        return "\n".join(lines) + "\n"


def render_atom(symbol: str, args: Sequence[Term]) -> str:
    if symbol == "!=" and len(args) == 2:
        return f"{args[0]} != {args[1]}"
    if not args:
        return symbol
    return f"{symbol}({','.join(str(a) for a in args)})"


def render_call(builtin: str, args: Sequence[Term]) -> str:
    if builtin in ("=", "!=", ">=", "<=", ">", "<") and len(args) == 2:
        return f"{args[0]} {builtin} {args[1]}"
    if builtin == "true":
        return "true"
    if not args:
        return builtin
    return f"{builtin}({','.join(str(a) for a in args)})"


# ---------------------------------------------------------------------------
# tokenizer

_IDENT_RE = re.compile(r"[a-z][A-Za-z0-9_]*")

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>%[^\n]*)
  | (?P<int>\d+)
  | (?P<var>[A-Z_][A-Za-z0-9_]*)
  | (?P<ident>[a-z][A-Za-z0-9_]*)
  | (?P<sym><=>|==>|:-|//|!=|>=|<=|@|\\|\||,|\.|\(|\)|/|\+|-|\*|<|>|=)
    """,
    re.VERBOSE,
)

COMPARISONS = ("=", "!=", ">=", "<=", ">", "<")


@dataclass
class Token:
    kind: str  # int | var | ident | sym | eof
    text: str
    line: int
    col: int


def tokenize(src: str) -> list[Token]:
    toks = []
    line, col, pos = 1, 1, 0
    while pos < len(src):
        m = _TOKEN_RE.match(src, pos)
        if not m:
            raise ChrSyntaxError(f"unexpected character {src[pos]!r}", line, col)
        text = m.group(0)
        kind = m.lastgroup
        if kind not in ("ws", "comment"):
            toks.append(Token(kind, text, line, col))
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    toks.append(Token("eof", "", line, col))
    return toks


# ---------------------------------------------------------------------------
# parser


class _Parser:
    def __init__(self, src: str):
        self.toks = tokenize(src)
        self.i = 0

    def peek(self, offset: int = 0) -> Token:
        return self.toks[min(self.i + offset, len(self.toks) - 1)]

    def next(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def expect(self, text: str) -> Token:
        t = self.next()
        if t.text != text:
            raise ChrSyntaxError(f"expected {text!r}, found {t.text!r}", t.line, t.col)
        return t

    def at(self, text: str) -> bool:
        return self.peek().text == text

    def error(self, msg: str):
        t = self.peek()
        raise ChrSyntaxError(msg, t.line, t.col)

    # -- declarations ------------------------------------------------------

    def parse_decl(self, decls: dict):
        self.expect(":-")
        kw = self.next()
        if kw.text != "chr_constraint":
            raise ChrSyntaxError(
                f"unknown directive {kw.text!r} (only chr_constraint is supported)",
                kw.line,
                kw.col,
            )
        while True:
            sym = self._constraint_name()
            self.expect("/")
            ar = self.next()
            if ar.kind != "int":
                raise ChrSyntaxError("arity must be an integer", ar.line, ar.col)
            decls[(sym, int(ar.text))] = len(decls)
            if self.at(","):
                self.next()
                continue
            break
        self.expect(".")

    def _constraint_name(self) -> str:
        t = self.peek()
        if t.kind == "ident":
            self.next()
            return t.text
        if t.text == "(":
            self.next()
            op = self.next()
            if op.text != "!=":
                raise ChrSyntaxError("only (!=) is a valid operator constraint name", op.line, op.col)
            self.expect(")")
            return "!="
        if t.text == "!=":
            self.next()
            return "!="
        raise ChrSyntaxError(f"expected a constraint name, found {t.text!r}", t.line, t.col)

    # -- terms and expressions ---------------------------------------------

    def parse_expr(self) -> Term:
        t = self.parse_mul()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            rhs = self.parse_mul()
            t = Struct(op, (t, rhs))
        return t

    def parse_mul(self) -> Term:
        t = self.parse_unary()
        while self.peek().text == "*" or self.peek().text == "//" or (
            self.peek().kind == "ident" and self.peek().text == "mod"
        ):
            op = self.next().text
            rhs = self.parse_unary()
            t = Struct(op, (t, rhs))
        return t

    def parse_unary(self) -> Term:
        t = self.peek()
        if t.text == "-":
            self.next()
            inner = self.parse_unary()
            if isinstance(inner, Int):
                return Int(-inner.value)
            return Struct("-", (inner,))
        if t.kind == "int":
            self.next()
            return Int(int(t.text))
        if t.kind == "var":
            self.next()
            return Var(t.text)
        if t.kind == "ident":
            self.next()
            if self.at("("):
                self.next()
                args = [self.parse_expr()]
                while self.at(","):
                    self.next()
                    args.append(self.parse_expr())
                self.expect(")")
                return Struct(t.text, tuple(args))
            return Atom(t.text)
        if t.text == "(":
            self.next()
            inner = self.parse_expr()
            self.expect(")")
            return inner
        self.error(f"expected a term, found {t.text!r}")

    # -- heads, calls, rules -------------------------------------------------

    def parse_head(self, occ_counter: dict) -> HeadAtom:
        # allow infix:  term != term
        t = self.peek()
        if t.kind == "ident" and self.peek(1).text not in ("!=",) and True:
            pass
        lhs = self.parse_expr()
        if self.at("!="):
            self.next()
            rhs = self.parse_expr()
            return self._make_head("!=", (lhs, rhs), occ_counter)
        if isinstance(lhs, Atom):
            return self._make_head(lhs.name, (), occ_counter)
        if isinstance(lhs, Struct) and lhs.name not in ARITH_OPS:
            return self._make_head(lhs.name, lhs.args, occ_counter)
        self.error("rule head must be a constraint atom")

    def _make_head(self, symbol: str, args: tuple, occ_counter: dict) -> HeadAtom:
        n = occ_counter.get(symbol, 0) + 1
        occ_counter[symbol] = n
        return HeadAtom(symbol, len(args), tuple(args), n)

    def parse_call(self):
        """A guard or body call: returns ('cmp'|'call', name, args)."""
        t = self.peek()
        if t.kind == "ident" and t.text in ("true", "fail") and self.peek(1).text in (",", ".", "|"):
            self.next()
            return ("lit", t.text, ())
        lhs = self.parse_expr()
        nxt = self.peek().text
        if nxt in COMPARISONS:
            self.next()
            rhs = self.parse_expr()
            return ("cmp", nxt, (lhs, rhs))
        if isinstance(lhs, Atom):
            return ("call", lhs.name, ())
        if isinstance(lhs, Struct) and lhs.name not in ARITH_OPS:
            return ("call", lhs.name, lhs.args)
        self.error("expected a constraint or builtin call")

    def parse_rule(self, occ_counters: dict, index: int) -> Rule:
        name = None
        if self.peek().kind == "ident" and self.peek(1).text == "@":
            name = self.next().text
            self.next()

        def heads_list():
            counters = occ_counters
            hs = [self.parse_head(counters)]
            while self.at(","):
                self.next()
                hs.append(self.parse_head(counters))
            return hs

        first = heads_list()
        kept: list[HeadAtom] = []
        removed: list[HeadAtom] = []
        if self.at("\\"):
            self.next()
            second = heads_list()
            arrow = self.next()
            if arrow.text != "<=>":
                raise ChrSyntaxError("simpagation rules use <=>", arrow.line, arrow.col)
            kind = "simpagation"
            kept, removed = first, second
        else:
            arrow = self.next()
            if arrow.text == "<=>":
                kind = "simplification"
                removed = first
            elif arrow.text == "==>":
                kind = "propagation"
                kept = first
            else:
                raise ChrSyntaxError(
                    f"expected <=> or ==>, found {arrow.text!r}", arrow.line, arrow.col
                )

        # guard/body: parse items up to '.', guard present iff a '|' occurs
        items = [self.parse_call()]
        seps = []
        while self.peek().text in (",", "|"):
            seps.append(self.next().text)
            items.append(self.parse_call())
        self.expect(".")
        if "|" in seps:
            if seps.count("|") > 1:
                self.error("more than one guard separator")
            cut = seps.index("|") + 1
            guard_items, body_items = items[:cut], items[cut:]
        else:
            guard_items, body_items = [], items

        guard = tuple(self._to_guard(it) for it in guard_items)
        body = tuple(self._to_body(it) for it in body_items)
        return Rule(name, kind, tuple(kept), tuple(removed), guard, body, index)

    def _to_guard(self, item) -> GuardCall:
        tag, name, args = item
        if tag == "lit":
            if name == "fail":
                # a guard of 'fail' would make the rule dead; keep it a builtin
                return GuardCall("fail", ())
            return GuardCall("true", ())
        return GuardCall(name, tuple(args))

    def _to_body(self, item):
        tag, name, args = item
        if tag == "lit":
            return TrueItem() if name == "true" else FailItem()
        # resolution against declarations happens during validation
        return ("unresolved", name, tuple(args))


# ---------------------------------------------------------------------------
# parse + validate


def parse_program(
    source: str,
    extra_builtins: Optional[dict] = None,
    validate: bool = True,
) -> Program:
    """Parse CHR source text into a validated Program.

    Raises ChrSyntaxError on malformed input and ChrProgramError when
    validation finds declaration, groundness, or guard-scheduling faults.
    """
    registry = default_registry()
    if extra_builtins:
        registry.update(extra_builtins)
    p = _Parser(source)
    decls: dict = {}
    rules: list[Rule] = []
    occ_counters: dict = {}
    while p.peek().kind != "eof":
        if p.at(":-"):
            p.parse_decl(decls)
        else:
            rules.append(p.parse_rule(occ_counters, len(rules)))
    prog = Program(decls, tuple(rules), registry)
    _resolve_bodies(prog)
    result = validate_program(prog)
    prog.warnings = result.warnings
    if validate and not result.ok:
        raise ChrProgramError(result.errors)
    return prog


def _resolve_bodies(prog: Program):
    """Resolve body calls to CHR constraints (declared) or builtins."""
    for r in prog.rules:
        resolved = []
        for item in r.body:
            if isinstance(item, tuple) and item[0] == "unresolved":
                _, name, args = item
                if (name, len(args)) in prog.decls:
                    resolved.append(ChrCall(name, len(args), args))
                else:
                    resolved.append(GuardCall(name, args))
            else:
                resolved.append(item)
        r.body = tuple(resolved)


@dataclass
class ValidationResult:
    ok: bool
    errors: list
    warnings: list


def validate_program(prog: Program) -> ValidationResult:
    errors: list[str] = []
    warnings: list[str] = []
    seen_names: set = set()
    for r in prog.rules:
        label = r.name or f"rule {r.source_index + 1}"
        if r.name:
            if r.name in seen_names:
                warnings.append(f"duplicate rule name {r.name!r}")
            seen_names.add(r.name)
        _validate_rule(prog, r, label, errors)
    return ValidationResult(not errors, errors, warnings)


def _validate_rule(prog: Program, r: Rule, label: str, errors: list):
    headvars: set = set()
    for h in r.heads:
        if (h.symbol, h.arity) not in prog.decls:
            errors.append(f"{label}: head constraint {h.symbol}/{h.arity} is not declared")
        for a in h.args:
            if isinstance(a, Struct):
                if is_arith(a):
                    errors.append(f"{label}: arithmetic in head argument {a}")
                elif not is_ground(a):
                    errors.append(f"{label}: non-ground compound head argument {a}")
            headvars.update(v.name for v in term_vars(a))

    # mode inference over guards in source order
    bound = set(headvars)
    new_guard = []
    for g in r.guard:
        spec = prog.builtins.get(g.builtin, len(g.args))
        if spec is None:
            errors.append(f"{label}: unknown guard builtin {g.builtin}/{len(g.args)}")
            new_guard.append(g)
            continue
        all_vars: set = set()
        candidates: set = set()
        for pos, a in enumerate(g.args, start=1):
            vs = {v.name for v in term_vars(a)}
            all_vars.update(vs)
            if pos in spec.out_positions and isinstance(a, Var):
                elsewhere = any(
                    a.name in {v.name for v in term_vars(b)}
                    for q, b in enumerate(g.args, start=1)
                    if q != pos
                )
                if not elsewhere:
                    candidates.add(a.name)
        outvars = frozenset(candidates - bound)
        invars = frozenset(all_vars - outvars)
        unb = invars - bound
        if unb:
            errors.append(
                f"{label}: unschedulable guard {g.render()} (unbound {', '.join(sorted(unb))})"
            )
        bound |= outvars
        new_guard.append(
            GuardCall(
                g.builtin, g.args, invars, outvars, frozenset(all_vars), frozenset(candidates)
            )
        )
    r.guard = tuple(new_guard)

    for item in r.body:
        if isinstance(item, ChrCall):
            vs = {v.name for v in term_vars(Struct("b", item.args))}
            unb = vs - bound
            if unb:
                errors.append(f"{label}: unbound body variable {', '.join(sorted(unb))}")
        elif isinstance(item, GuardCall):
            spec = prog.builtins.get(item.builtin, len(item.args))
            if spec is None:
                errors.append(
                    f"{label}: body call {item.builtin}/{len(item.args)} is neither a "
                    f"declared constraint nor a builtin"
                )
                continue
            vs = {v.name for v in term_vars(Struct("b", item.args))}
            unb = vs - bound
            if unb:
                errors.append(f"{label}: unbound body variable {', '.join(sorted(unb))}")

    if r.kind == "simplification" and not r.removed:
        errors.append(f"{label}: simplification rule with no heads")
    if r.kind == "propagation" and not r.kept:
        errors.append(f"{label}: propagation rule with no heads")
    if r.kind == "simpagation" and (not r.kept or not r.removed):
        errors.append(f"{label}: simpagation rule needs heads on both sides of \\")


# ---------------------------------------------------------------------------
# goals


def parse_goal(source: str, prog: Program) -> list[ChrCall]:
    """Parse a goal: a comma-separated conjunction of ground constraint calls."""
    p = _Parser(source)
    calls: list[ChrCall] = []
    if p.peek().kind == "eof":
        return calls
    while True:
        tag, name, args = p.parse_call()
        if tag == "lit":
            raise ChrProgramError([f"goal item {name} is not a constraint call"])
        if (name, len(args)) not in prog.decls:
            raise ChrProgramError([f"goal constraint {name}/{len(args)} is not declared"])
        for a in args:
            if not is_ground(a):
                raise ChrProgramError([f"non-ground goal argument {a}"])
        calls.append(ChrCall(name, len(args), tuple(args)))
        if p.at(","):
            p.next()
            continue
        break
    if p.peek().kind != "eof" and not p.at("."):
        p.error("trailing input after goal")
    return calls
