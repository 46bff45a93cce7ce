"""Static analysis of CHR programs.

Everything here is driven by *when a constraint first has to be stored*:
an active constraint only needs to enter the store just before a body that
keeps it alive can observe the store (i.e. calls CHR constraints).  The
remaining analyses (never-stored detection, functional dependencies, set
semantics, symmetries) are sound exactly because their witnessing rules
run before that storage point, so the property can never be violated by a
stored constraint.

Functional dependencies are written ``p/k :: S ~> j``: fixing the argument
positions in S determines position j among stored p constraints.  A
``target`` of None is the whole-tuple dependency contributed by rules that
delete duplicate copies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .surface import ChrCall, GuardCall, HeadAtom, Program, Rule
from .terms import Atom, Int, Struct, Term, Var

STORAGE_END = "end"
STORAGE_NEVER = "never"


@dataclass(frozen=True)
class FunctionalDependency:
    symbol: str
    arity: int
    source: frozenset
    target: Optional[int]  # None: whole tuple, duplicates collapse

    def render(self) -> str:
        src = ",".join(str(i) for i in sorted(self.source))
        tgt = "()" if self.target is None else str(self.target)
        return f"fd {{{src}}}->{tgt}"


@dataclass(frozen=True)
class SymmetryFact:
    symbol: str
    arity: int
    positions: frozenset  # pair {i, j}

    def render(self) -> str:
        i, j = sorted(self.positions)
        return f"sym {{{i},{j}}}"


@dataclass
class ConstraintInfo:
    symbol: str
    arity: int
    fds: tuple = ()
    set_form: str = "none"  # explicit | behavioral | none
    symmetries: tuple = ()
    never_stored: bool = False
    storage_occ = STORAGE_END  # occurrence id | "end" | "never"

    @property
    def has_set_semantics(self) -> bool:
        return self.set_form != "none"

    def positional_fds(self):
        return [fd for fd in self.fds if fd.target is not None]


@dataclass
class AnalysisReport:
    constraints: dict  # (symbol, arity) -> ConstraintInfo
    rule_rhs_affects_store: dict  # rule source_index -> bool
    exec_order: dict  # (symbol, arity) -> list of occurrence ids
    dropped_occurrences: frozenset  # (symbol, arity, occ_id)

    def info(self, symbol: str, arity: int) -> ConstraintInfo:
        return self.constraints[(symbol, arity)]

    def exec_position(self, symbol: str, arity: int, occ_id: int) -> int:
        return self.exec_order[(symbol, arity)].index(occ_id)


# ---------------------------------------------------------------------------
# fdclose


def fdclose(fixed: Iterable, fds: Iterable) -> frozenset:
    """Close a fixed set under instantiated functional dependencies.

    ``fds`` is an iterable of (source_set, target) pairs over the same
    element kind as ``fixed`` (variable names or argument positions).
    Least fixpoint; monotone and idempotent.
    """
    out = set(fixed)
    pending = [(frozenset(s), t) for s, t in fds if t is not None and t not in out]
    changed = True
    while changed and pending:
        changed = False
        rest = []
        for s, t in pending:
            if s <= out:
                out.add(t)
                changed = True
            else:
                rest.append((s, t))
        pending = rest
    return frozenset(out)


def instantiate_fds(atom_args: Sequence[Term], fds: Iterable[FunctionalDependency]):
    """Map positional FDs onto an atom's variables.

    Positions holding literals are always known, so they drop out of the
    source; a literal target contributes nothing.
    """
    out = []
    for fd in fds:
        if fd.target is None:
            continue
        src = set()
        ok = True
        for i in fd.source:
            a = atom_args[i - 1]
            if isinstance(a, Var):
                src.add(a.name)
        tgt_term = atom_args[fd.target - 1]
        if isinstance(tgt_term, Var):
            out.append((frozenset(src), tgt_term.name))
    return out


# ---------------------------------------------------------------------------
# occurrence execution order


def execution_order(prog: Program, symbol: str, arity: int, dropped=frozenset()):
    """Occurrence ids in execution order: textual, with removed-side
    occurrences of a simpagation rule preceding the kept-side ones."""
    order = []
    for r in prog.rules:
        rem = [h.occurrence_id for h in r.removed if h.symbol == symbol and h.arity == arity]
        kep = [h.occurrence_id for h in r.kept if h.symbol == symbol and h.arity == arity]
        for occ in rem + kep:
            if (symbol, arity, occ) not in dropped:
                order.append(occ)
    return order


# ---------------------------------------------------------------------------
# storage / never-stored


def rhs_affects_store(rule: Rule) -> bool:
    """A body affects the store when it calls a CHR constraint."""
    return any(isinstance(item, ChrCall) for item in rule.body)


def _is_catch_all(rule: Rule, symbol: str, arity: int) -> bool:
    """Single most-general head of symbol/arity, no guard, any body."""
    if rule.kind != "simplification" or len(rule.removed) != 1 or rule.kept:
        return False
    h = rule.removed[0]
    if h.symbol != symbol or h.arity != arity:
        return False
    names = [a.name for a in h.args if isinstance(a, Var)]
    if len(names) != arity or len(set(names)) != arity:
        return False
    return all(g.builtin == "true" for g in rule.guard)


@dataclass
class StorageInfo:
    rule_ras: dict
    storage_occ: dict  # (symbol, arity) -> occ id | "end" | "never"
    never_stored: dict  # (symbol, arity) -> bool
    exec_order: dict
    dropped: frozenset

    def position(self, symbol, arity, occ_id) -> int:
        return self.exec_order[(symbol, arity)].index(occ_id)

    def storage_position(self, symbol, arity):
        s = self.storage_occ[(symbol, arity)]
        if s in (STORAGE_END, STORAGE_NEVER):
            return float("inf")
        return self.position(symbol, arity, s)


def infer_storage(prog: Program, dropped=frozenset()) -> StorageInfo:
    rule_ras = {r.source_index: rhs_affects_store(r) for r in prog.rules}
    storage_occ = {}
    never = {}
    exec_order = {}
    for key in prog.decls:
        sym, ar = key
        order = execution_order(prog, sym, ar, dropped)
        exec_order[key] = order
        occ_rule = {}
        occ_kept = {}
        for r, h, removed in prog.occurrences(sym, ar):
            occ_rule[h.occurrence_id] = r
            occ_kept[h.occurrence_id] = not removed
        point = STORAGE_END
        for occ in order:
            if occ_kept[occ] and rule_ras[occ_rule[occ].source_index]:
                point = occ
                break
        limit = order.index(point) if point != STORAGE_END else float("inf")
        is_never = any(
            _is_catch_all(occ_rule[occ], sym, ar)
            for pos, occ in enumerate(order)
            if pos < limit
        )
        storage_occ[key] = STORAGE_NEVER if is_never else point
        never[key] = is_never
    return StorageInfo(rule_ras, storage_occ, never, exec_order, frozenset(dropped))


# ---------------------------------------------------------------------------
# functional dependencies


def _var_names(args) -> Optional[list]:
    names = []
    for a in args:
        if not isinstance(a, Var):
            return None
        names.append(a.name)
    return names


def _two_head_form(rule: Rule):
    """Decompose a rule with exactly two heads of one constraint into
    (symbol, arity, shared-prefix length, tail1, tail2); None when the
    heads do not fit the shared-distinct-prefix shape."""
    if rule.kind == "simplification" and len(rule.removed) == 2 and not rule.kept:
        h1, h2 = rule.removed
    elif rule.kind == "simpagation" and len(rule.kept) == 1 and len(rule.removed) == 1:
        h1, h2 = rule.kept[0], rule.removed[0]
    else:
        return None
    if h1.key != h2.key:
        return None
    a1, a2 = _var_names(h1.args), _var_names(h2.args)
    if a1 is None or a2 is None:
        return None
    k = h1.arity
    if len(set(a1)) != k or len(set(a2)) != k:
        return None
    l = 0
    while l < k and a1[l] == a2[l]:
        l += 1
    if set(a1[l:]) & set(a2[l:]):
        return None
    if set(a2[l:]) & set(a1[:l]):
        return None
    return (h1.symbol, k, l, a1, a2)


def _guard_is_empty(rule: Rule) -> bool:
    return all(g.builtin == "true" for g in rule.guard)


def _single_comparison(rule: Rule):
    real = [g for g in rule.guard if g.builtin != "true"]
    if len(real) == 1 and real[0].builtin in (">=", "<=", ">", "<"):
        return real[0]
    return None


def _body_is_pointwise_eq(rule: Rule, a1, a2, l) -> bool:
    wanted = {frozenset((a1[i], a2[i])) for i in range(l, len(a1))}
    got = set()
    for item in rule.body:
        if isinstance(item, GuardCall) and item.builtin == "=":
            x, y = item.args
            if isinstance(x, Var) and isinstance(y, Var):
                got.add(frozenset((x.name, y.name)))
                continue
        if isinstance(item, GuardCall) and item.builtin == "true":
            continue
        return False
    return got == wanted


def _subst_term(t: Term, sub: dict) -> Term:
    if isinstance(t, Var):
        return sub.get(t.name, t)
    if isinstance(t, Struct):
        return Struct(t.name, tuple(_subst_term(a, sub) for a in t.args))
    return t


def _normalize_cmp(g: GuardCall):
    """Normalize to (lhs, strict?, rhs) meaning lhs >= rhs / lhs > rhs."""
    a, b = g.args
    if g.builtin == ">=":
        return (a, False, b)
    if g.builtin == ">":
        return (a, True, b)
    if g.builtin == "<=":
        return (b, False, a)
    return (b, True, a)


def _disjunction_total(g1: GuardCall, g2_sub: GuardCall) -> bool:
    """True when g1 or g2 holds for every assignment (total-order shape:
    s >= t or t >= s, with at most one side strict)."""
    l1, s1, r1 = _normalize_cmp(g1)
    l2, s2, r2 = _normalize_cmp(g2_sub)
    return l1 == r2 and r1 == l2 and not (s1 and s2)


def _rule_occ_positions_ok(storage: StorageInfo, rule: Rule, symbol: str, arity: int) -> bool:
    """Every occurrence of symbol/arity in the rule runs no later than the
    storage point (so the rule fires before the constraint is ever stored)."""
    limit = storage.storage_position(symbol, arity)
    order = storage.exec_order[(symbol, arity)]
    for h in rule.heads:
        if h.symbol == symbol and h.arity == arity:
            if h.occurrence_id not in order:
                return False
            if order.index(h.occurrence_id) > limit:
                return False
    return True


def infer_fds(prog: Program, storage: StorageInfo) -> set:
    out = set()
    forms = []
    for r in prog.rules:
        f = _two_head_form(r)
        if f is None:
            continue
        sym, k, l, a1, a2 = f
        if not _rule_occ_positions_ok(storage, r, sym, k):
            continue
        if r.kind in ("simplification", "simpagation") and _guard_is_empty(r):
            for j in range(l + 1, k + 1):
                out.add(FunctionalDependency(sym, k, frozenset(range(1, l + 1)), j))
        elif r.kind == "propagation" and _guard_is_empty(r) and _body_is_pointwise_eq(r, a1, a2, l):
            for j in range(l + 1, k + 1):
                out.add(FunctionalDependency(sym, k, frozenset(range(1, l + 1)), j))
        if r.kind in ("simplification", "simpagation") and _single_comparison(r):
            forms.append((r, sym, k, l, a1, a2))

    # guard-disjunction pairs (a rule may pair with its own renaming)
    for r1, sym1, k1, l1, y1a, z1a in forms:
        g1 = _single_comparison(r1)
        for r2, sym2, k2, l2, y2a, z2a in forms:
            if sym1 != sym2 or k1 != k2 or l1 != l2:
                continue
            g2 = _single_comparison(r2)
            # align r2 against r1 in the crossed orientation:
            # prefix' -> prefix, tail-kept' -> tail-removed, tail-removed' -> tail-kept
            sub = {}
            for i in range(l1):
                sub[y2a[i]] = Var(y1a[i])
            for i in range(l1, k1):
                sub[y2a[i]] = Var(z1a[i])
                sub[z2a[i]] = Var(y1a[i])
            g2s = GuardCall(g2.builtin, tuple(_subst_term(t, sub) for t in g2.args))
            if _disjunction_total(g1, g2s):
                for j in range(l1 + 1, k1 + 1):
                    out.add(FunctionalDependency(sym1, k1, frozenset(range(1, l1 + 1)), j))
    return out


# ---------------------------------------------------------------------------
# set semantics


def _dedup_witness_shape(rule: Rule):
    """Heads that match any pair of identical constraints: two heads of one
    symbol, all arguments variables, and every variable confined to a single
    argument position (it may appear in both heads at that position)."""
    if rule.kind == "simplification" and len(rule.removed) == 2 and not rule.kept:
        h1, h2 = rule.removed
    elif rule.kind == "simpagation" and len(rule.kept) == 1 and len(rule.removed) == 1:
        h1, h2 = rule.kept[0], rule.removed[0]
    else:
        return None
    if h1.key != h2.key:
        return None
    a1, a2 = _var_names(h1.args), _var_names(h2.args)
    if a1 is None or a2 is None:
        return None
    pos: dict = {}
    for i, name in enumerate(a1):
        if pos.setdefault(name, i) != i:
            return None
    for i, name in enumerate(a2):
        if pos.setdefault(name, i) != i:
            return None
    return (h1, h2, a1, a2)


def _guard_reflexive_under_merge(rule: Rule, a1, a2) -> bool:
    sub = {a2[i]: Var(a1[i]) for i in range(len(a1))}
    for g in rule.guard:
        if g.builtin == "true":
            continue
        if g.builtin not in (">=", "<=", "="):
            return False
        x, y = (_subst_term(t, sub) for t in g.args)
        if x != y:
            return False
    return True


def explicit_set_constraints(prog: Program, storage: StorageInfo) -> set:
    out = set()
    for r in prog.rules:
        shape = _dedup_witness_shape(r)
        if shape is None:
            continue
        h1, h2, a1, a2 = shape
        key = h1.key
        if not _guard_reflexive_under_merge(r, a1, a2):
            continue
        if not _rule_occ_positions_ok(storage, r, *key):
            continue
        out.add(key)
    return out


def _heads_can_match_identical(h1: HeadAtom, h2: HeadAtom) -> bool:
    """Can the two head patterns simultaneously match one ground tuple
    (i.e. two identical stored copies)?  Union-find over positions with
    literal pinning; guards are ignored (conservative)."""
    k = h1.arity
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i, j):
        parent[find(i)] = find(j)

    seen: dict = {}
    pins: dict = {}
    for args in (h1.args, h2.args):
        for i, a in enumerate(args):
            if isinstance(a, Var):
                if a.name in seen:
                    union(i, seen[a.name])
                else:
                    seen[a.name] = i
    for args in (h1.args, h2.args):
        for i, a in enumerate(args):
            if not isinstance(a, Var):
                root = find(i)
                if root in pins and pins[root] != a:
                    return False
                pins[root] = a
    return True


def behavioral_set_constraints(
    prog: Program, explicit: set, order_hint: Optional[Sequence] = None
) -> set:
    """Greatest fixpoint: start from every constraint with a head occurrence
    having set semantics, delete violators until stable.  ``order_hint``
    forces a deletion order (used to check order independence)."""
    headful = set()
    for r in prog.rules:
        for h in r.heads:
            headful.add(h.key)
    candidates = set(headful)

    def violates(key) -> bool:
        sym, ar = key
        for r in prog.rules:
            heads = [h for h in r.heads if h.key == key]
            if not heads:
                continue
            # 1. a rule matching two identical copies
            for i in range(len(heads)):
                for j in range(i + 1, len(heads)):
                    if _heads_can_match_identical(heads[i], heads[j]):
                        return True
            # 2. deleting a copy without deleting duplicates (unless the
            #    body always fails)
            for h in r.removed:
                if h.key != key:
                    continue
                dup = any(
                    other is not h and other.key == key and other.args == h.args
                    for other in r.heads
                )
                body_fails = len(r.body) == 1 and r.body[0].render() == "fail"
                if not dup and not body_fails:
                    return True
            # 3. generating constraints without set semantics
            for item in r.body:
                if isinstance(item, ChrCall):
                    bkey = (item.symbol, item.arity)
                    if bkey not in candidates and bkey not in explicit:
                        return True
        return False

    changed = True
    while changed:
        changed = False
        pool = sorted(candidates)
        if order_hint is not None:
            ranked = {k: i for i, k in enumerate(order_hint)}
            pool.sort(key=lambda k: ranked.get(k, len(ranked)))
        for key in pool:
            if key in explicit:
                continue
            if violates(key):
                candidates.discard(key)
                changed = True
                break
    return candidates - explicit


def infer_set_semantics(prog: Program, storage: StorageInfo, fds=None) -> dict:
    explicit = explicit_set_constraints(prog, storage)
    behavioral = behavioral_set_constraints(prog, explicit)
    out = {}
    for key in prog.decls:
        if key in explicit:
            out[key] = "explicit"
        elif key in behavioral:
            out[key] = "behavioral"
        else:
            out[key] = "none"
    return out


# ---------------------------------------------------------------------------
# symmetry


def _swap_args(args, i, j):
    lst = list(args)
    lst[i - 1], lst[j - 1] = lst[j - 1], lst[i - 1]
    return tuple(lst)


def _symmetry_rule_pair(rule: Rule):
    """Match the explicit symmetry shape p(..xi..xj..) ==> p(..xj..xi..)."""
    if rule.kind != "propagation" or len(rule.kept) != 1:
        return None
    if not _guard_is_empty(rule):
        return None
    if len(rule.body) != 1 or not isinstance(rule.body[0], ChrCall):
        return None
    h = rule.kept[0]
    b = rule.body[0]
    if (b.symbol, b.arity) != h.key:
        return None
    names = _var_names(h.args)
    if names is None or len(set(names)) != len(names):
        return None
    bargs = b.args
    if not all(isinstance(a, Var) for a in bargs):
        return None
    k = h.arity
    for i in range(1, k + 1):
        for j in range(i + 1, k + 1):
            if _swap_args(h.args, i, j) == bargs:
                return (h.key, i, j)
    return None


def _rule_swap_invariant(rule: Rule, key, i, j) -> bool:
    def swap_atoms(atoms):
        out = []
        for h in atoms:
            if (h.symbol, h.arity) == key:
                out.append((h.symbol, _swap_args(h.args, i, j)))
            else:
                out.append((h.symbol, h.args))
        return out

    def multiset(atoms):
        return sorted(repr(a) for a in atoms)

    if multiset(swap_atoms(rule.kept)) != multiset(
        [(h.symbol, h.args) for h in rule.kept]
    ):
        return False
    if multiset(swap_atoms(rule.removed)) != multiset(
        [(h.symbol, h.args) for h in rule.removed]
    ):
        return False
    for item in rule.body:
        if isinstance(item, ChrCall) and (item.symbol, item.arity) == key:
            if _swap_args(item.args, i, j) != item.args:
                return False
    return True


def infer_symmetries(prog: Program, storage: StorageInfo) -> set:
    out = set()
    for r in prog.rules:
        hit = _symmetry_rule_pair(r)
        if hit is None:
            continue
        key, i, j = hit
        if not _rule_occ_positions_ok(storage, r, *key):
            continue
        ok = True
        for rr in prog.rules:
            for h in rr.removed:
                if h.key != key:
                    continue
                dup = any(
                    other is not h and other.key == key and other.args == h.args
                    for other in rr.heads
                )
                if dup:
                    continue
                if not _rule_swap_invariant(rr, key, i, j):
                    ok = False
        if ok:
            out.add(SymmetryFact(key[0], key[1], frozenset((i, j))))
    return out


# ---------------------------------------------------------------------------
# top level


def analyze(prog: Program) -> AnalysisReport:
    """Run every inference to a joint fixpoint.

    Never-stored results drop partner occurrences, which shifts storage
    points, which widens the window the other analyses may use; iterate
    until the dropped set stabilizes.
    """
    dropped: frozenset = frozenset()
    while True:
        storage = infer_storage(prog, dropped)
        new_dropped = set(dropped)
        for r in prog.rules:
            for h in r.heads:
                # a never-stored partner can never be found in the store,
                # so this occurrence can never fire
                if any(
                    x is not h and storage.never_stored.get((x.symbol, x.arity), False)
                    for x in r.heads
                ):
                    new_dropped.add((h.symbol, h.arity, h.occurrence_id))
        new_dropped = frozenset(new_dropped)
        if new_dropped == dropped:
            break
        dropped = new_dropped

    fds = infer_fds(prog, storage)
    set_forms = infer_set_semantics(prog, storage, fds)
    syms = infer_symmetries(prog, storage)

    constraints = {}
    for key in prog.decls:
        sym, ar = key
        info = ConstraintInfo(sym, ar)
        my_fds = sorted(
            (fd for fd in fds if (fd.symbol, fd.arity) == key),
            key=lambda fd: (sorted(fd.source), fd.target),
        )
        if set_forms[key] == "explicit":
            my_fds.append(FunctionalDependency(sym, ar, frozenset(range(1, ar + 1)), None))
        info.fds = tuple(my_fds)
        info.set_form = set_forms[key]
        info.symmetries = tuple(
            sorted((s for s in syms if (s.symbol, s.arity) == key), key=lambda s: sorted(s.positions))
        )
        info.never_stored = storage.never_stored[key]
        info.storage_occ = storage.storage_occ[key]
        constraints[key] = info
    return AnalysisReport(constraints, storage.rule_ras, storage.exec_order, dropped)


# ---------------------------------------------------------------------------
# report rendering


def render_report(report: AnalysisReport) -> str:
    lines = []
    for key in sorted(report.constraints):
        info = report.constraints[key]
        segs = [fd.render() for fd in info.positional_fds()]
        if info.set_form != "none":
            segs.append(f"set {info.set_form}")
        segs.extend(s.render() for s in info.symmetries)
        if info.never_stored:
            segs.append("never-stored")
        else:
            segs.append(f"storage-occ {info.storage_occ}")
        lines.append(f"constraint {info.symbol}/{info.arity}: " + " | ".join(segs))
    return "\n".join(lines)


def report_json(report: AnalysisReport) -> dict:
    out = {}
    for (sym, ar), info in sorted(report.constraints.items()):
        out[f"{sym}/{ar}"] = {
            "fds": [
                {"source": sorted(fd.source), "target": fd.target}
                for fd in info.fds
            ],
            "set": info.set_form,
            "symmetries": [sorted(s.positions) for s in info.symmetries],
            "never_stored": info.never_stored,
            "storage_occ": info.storage_occ,
        }
    return out
