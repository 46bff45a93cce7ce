"""Constraint store and execution engine.

The store keeps one index per constraint (yesno slot, sorted tree over a
key, or unsorted list) plus probe counters so benchmarks can report
machine-independent work.  Activations run as generators driven by an
explicit stack: a body call pushes a child activation, and a body whose
last action replaces a removed active constraint loops in place instead
of nesting, so reduction chains like gcd run at constant depth.

Iterators honor the usual store discipline: existential lookups are lazy
and skip constraints deleted after the iterator opened; universal loops
snapshot their candidates up front and re-check liveness at each step, so
constraints inserted by rule bodies are handled by their own activations
rather than the running loop.
"""
from __future__ import annotations

from bisect import bisect_left, insort
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .analysis import STORAGE_END, STORAGE_NEVER, AnalysisReport
from .builtins import BuiltinRegistry, EvalError
from .errors import ChrFailure, ChrRuntimeError, DepthLimitExceeded
from .flags import OptFlags
from .indexsel import LIST, TREE, YESNO, IndexSpec
from .plancompile import (
    BODY_CALL,
    BODY_FAIL,
    BODY_GUARD,
    BODY_TAIL,
    CompiledProgram,
    GuardStep,
    PartnerStep,
    compile_term,
)
from .surface import ChrCall, GuardCall, Program
from .terms import ground_key, render_value, term_vars


class StoredConstraint:
    __slots__ = ("symbol", "arity", "args", "number", "alive", "stored")

    def __init__(self, symbol, arity, args, number):
        self.symbol = symbol
        self.arity = arity
        self.args = args
        self.number = number
        self.alive = True
        self.stored = False

    def render(self) -> str:
        if self.symbol == "!=" and self.arity == 2:
            return f"{render_value(self.args[0])} != {render_value(self.args[1])}"
        if not self.args:
            return self.symbol
        return f"{self.symbol}({','.join(render_value(a) for a in self.args)})"

    def __repr__(self):
        return f"<{self.render()}#{self.number}{'' if self.alive else ' dead'}>"


# ---------------------------------------------------------------------------
# indexes


class YesNoIndex:
    __slots__ = ("slot",)
    kind = YESNO

    def __init__(self, spec: IndexSpec):
        self.slot: Optional[StoredConstraint] = None

    def insert(self, sc, store):
        store.probes += 1
        if self.slot is not None:
            raise ChrRuntimeError(
                f"yesno index for {sc.symbol}/{sc.arity} already holds "
                f"{self.slot!r}; analysis should forbid this"
            )
        self.slot = sc

    def delete(self, sc, store):
        store.probes += 1
        if self.slot is not sc:
            raise ChrRuntimeError("deleting a constraint absent from its yesno slot")
        self.slot = None

    def lazy(self, fixed, store):
        sc = self.slot
        if sc is not None and sc.alive:
            store.probes += 1
            if all(sc.args[i] == v for i, v in fixed):
                yield sc

    def snapshot(self, fixed, store):
        return list(self.lazy(fixed, store))

    def contents(self):
        return [self.slot] if self.slot is not None else []


class TreeIndex:
    """Sorted entries (gkey, number, constraint); gkey projects the key
    positions through the ground term order.  Stands in for a balanced
    tree: probes count binary-search comparisons and visited entries."""

    __slots__ = ("key", "entries")
    kind = TREE

    def __init__(self, spec: IndexSpec):
        self.key = spec.key  # 1-based positions
        self.entries: list = []

    def _gkey(self, args):
        return tuple(ground_key(args[p - 1]) for p in self.key)

    def insert(self, sc, store):
        store.probes += max(len(self.entries).bit_length(), 1)
        insort(self.entries, (self._gkey(sc.args), sc.number, sc))

    def delete(self, sc, store):
        store.probes += max(len(self.entries).bit_length(), 1)
        i = bisect_left(self.entries, (self._gkey(sc.args), sc.number))
        if i < len(self.entries) and self.entries[i][2] is sc:
            del self.entries[i]
            return
        raise ChrRuntimeError("deleting a constraint absent from its tree index")

    def _split(self, fixed):
        bypos = dict(fixed)
        prefix = []
        for p in self.key:
            if (p - 1) in bypos:
                prefix.append(ground_key(bypos.pop(p - 1)))
            else:
                break
        return tuple(prefix), list(bypos.items())

    def lazy(self, fixed, store):
        prefix, rest = self._split(fixed)
        m = len(prefix)
        entries = self.entries
        store.probes += max(len(entries).bit_length(), 1)
        i = bisect_left(entries, (prefix,))
        last = None
        while i < len(entries):
            gkey, number, sc = entries[i]
            if gkey[:m] != prefix:
                return
            store.probes += 1
            last = (gkey, number)
            if sc.alive and all(sc.args[q] == v for q, v in rest):
                yield sc
            # re-locate: deletions and inserts may have shifted positions
            i = bisect_left(entries, (last[0], last[1] + 1))

    def snapshot(self, fixed, store):
        prefix, rest = self._split(fixed)
        m = len(prefix)
        entries = self.entries
        store.probes += max(len(entries).bit_length(), 1)
        i = bisect_left(entries, (prefix,))
        out = []
        while i < len(entries):
            gkey, _, sc = entries[i]
            if gkey[:m] != prefix:
                break
            store.probes += 1
            if sc.alive and all(sc.args[q] == v for q, v in rest):
                out.append(sc)
            i += 1
        return out

    def contents(self):
        return [e[2] for e in self.entries]


class ListIndex:
    __slots__ = ("entries",)
    kind = LIST

    def __init__(self, spec: IndexSpec):
        self.entries: list = []

    def insert(self, sc, store):
        store.probes += 1
        self.entries.append(sc)

    def delete(self, sc, store):
        try:
            i = self.entries.index(sc)
        except ValueError:
            raise ChrRuntimeError("deleting a constraint absent from its list index")
        store.probes += i + 1
        del self.entries[i]

    def lazy(self, fixed, store):
        # iterate over a snapshot: deletions mark constraints dead, so an
        # open iterator simply skips them
        n = 0
        for sc in list(self.entries):
            n += 1
            if sc.alive and all(sc.args[i] == v for i, v in fixed):
                store.probes += n
                n = 0
                yield sc
        store.probes += n

    def snapshot(self, fixed, store):
        store.probes += len(self.entries)
        return [
            sc for sc in self.entries
            if sc.alive and all(sc.args[i] == v for i, v in fixed)
        ]

    def contents(self):
        return list(self.entries)


_INDEX_KINDS = {YESNO: YesNoIndex, TREE: TreeIndex, LIST: ListIndex}


class ConstraintStore:
    def __init__(self, specs: dict):
        self.indexes = {key: _INDEX_KINDS[spec.structure](spec) for key, spec in specs.items()}
        self.next_number = 0
        self.probes = 0
        self.inserts = 0
        self.deletes = 0

    # -- spec-level operations ------------------------------------------

    def new_constraint(self, symbol, arity, args) -> StoredConstraint:
        sc = StoredConstraint(symbol, arity, args, self.next_number)
        self.next_number += 1
        return sc

    def insert(self, sc: StoredConstraint):
        if sc.stored or not sc.alive:
            raise ChrRuntimeError("inserting a dead or already-stored constraint")
        self.indexes[(sc.symbol, sc.arity)].insert(sc, self)
        sc.stored = True
        self.inserts += 1

    def insert_constraint(self, symbol, arity, args) -> StoredConstraint:
        sc = self.new_constraint(symbol, arity, args)
        self.insert(sc)
        return sc

    def delete_constraint(self, sc: StoredConstraint):
        if not sc.alive:
            raise ChrRuntimeError("deleting a dead constraint")
        if sc.stored:
            self.indexes[(sc.symbol, sc.arity)].delete(sc, self)
            sc.stored = False
        sc.alive = False
        self.deletes += 1

    def iterate(self, symbol, arity, fixed, mode="exists"):
        """``fixed``: iterable of (0-based position, ground value)."""
        idx = self.indexes[(symbol, arity)]
        fixed = list(fixed)
        if mode == "forall":
            snap = idx.snapshot(fixed, self)

            def stepper():
                for sc in snap:
                    if sc.alive:
                        yield sc

            return stepper()
        return idx.lazy(fixed, self)

    def find_exact(self, key, args) -> Optional[StoredConstraint]:
        for sc in self.indexes[key].lazy(list(enumerate(args)), self):
            return sc
        return None

    def live_constraints(self):
        for idx in self.indexes.values():
            yield from idx.contents()

    def check_coherence(self):
        for key, idx in self.indexes.items():
            for sc in idx.contents():
                if not sc.alive:
                    raise ChrRuntimeError(f"dead constraint {sc!r} in index {key}")
                if not sc.stored:
                    raise ChrRuntimeError(f"unstored constraint {sc!r} in index {key}")
                if (sc.symbol, sc.arity) != key:
                    raise ChrRuntimeError(f"misfiled constraint {sc!r} in index {key}")


# ---------------------------------------------------------------------------
# match cursor


class _Level:
    __slots__ = ("step_idx", "source", "pos", "sc")

    def __init__(self, step_idx, source, pos, sc):
        self.step_idx = step_idx
        self.source = source  # generator (lazy) or list (snapshot)
        self.pos = pos
        self.sc = sc


class MatchCursor:
    """Backtracking search over one occurrence's steps.

    Universal levels iterate a snapshot with liveness re-checks; the
    existential suffix uses live lazy lookups.  After a firing,
    ``resume_after_fire`` pops back to the deepest universal level (or the
    shallowest one whose candidate died) and continues.
    """

    __slots__ = ("plan", "store", "active", "bindings", "levels", "matched")

    def __init__(self, plan, store, active, bindings):
        self.plan = plan
        self.store = store
        self.active = active
        self.bindings = bindings
        self.levels: list = []
        self.matched = False

    def _open_level(self, step_idx, step: PartnerStep):
        b = self.bindings
        fixed = [
            (qpos, b[src[1]] if src[0] == "s" else src[1])
            for qpos, src in step.query
        ]
        idx = self.store.indexes[step.key]
        if step.universal:
            source = idx.snapshot(fixed, self.store)
            lev = _Level(step_idx, source, -1, None)
        else:
            lev = _Level(step_idx, idx.lazy(fixed, self.store), -1, None)
        self.levels.append(lev)
        return lev

    def _accept(self, step: PartnerStep, sc) -> bool:
        if not sc.alive:
            return False
        if sc.number == self.active.number:
            return False
        for lev in self.levels:
            if lev.sc is not None and lev.sc.number == sc.number:
                return False
        b = self.bindings
        args = sc.args
        for op in step.post:
            tag, pos, x = op
            if tag == "bind":
                b[x] = args[pos]
            elif tag == "chk":
                if args[pos] != b[x]:
                    return False
            else:
                if args[pos] != x:
                    return False
        return True

    def _advance_level(self, lev: _Level) -> bool:
        step = self.plan.steps[lev.step_idx]
        mirror = step.view_perm is not None
        if isinstance(lev.source, list):
            while True:
                lev.pos += 1
                if lev.pos >= len(lev.source):
                    return False
                sc = lev.source[lev.pos]
                sc = self._resolve(step, sc, mirror)
                if sc is not None and self._accept(step, sc):
                    lev.sc = sc
                    return True
        else:
            for sc in lev.source:
                sc = self._resolve(step, sc, mirror)
                if sc is not None and self._accept(step, sc):
                    lev.sc = sc
                    return True
            return False

    def _resolve(self, step, sc, mirror):
        """Map a mirrored-index candidate back to the true twin instance."""
        if not mirror:
            return sc
        view = step.view_perm
        twin_args = tuple(sc.args[view[p]] for p in range(len(view)))
        return self.store.find_exact(step.key, twin_args)

    def next_match(self) -> bool:
        plan = self.plan
        steps = plan.steps
        b = self.bindings
        if self.matched:
            self.matched = False
            if not self.levels:
                return False
            ip = self._backtrack()
            if ip is None:
                return False
        else:
            ip = 0
        while True:
            if ip == len(steps):
                self.matched = True
                return True
            step = steps[ip]
            if isinstance(step, GuardStep):
                try:
                    ok = step.fn(b)
                except TypeError as e:
                    raise ChrRuntimeError(f"guard {step.call.render()}: {e}") from None
                if ok:
                    ip += 1
                    continue
                ip = self._backtrack()
                if ip is None:
                    return False
                continue
            if self.levels and self.levels[-1].step_idx == ip:
                lev = self.levels[-1]
            else:
                lev = self._open_level(ip, step)
            if self._advance_level(lev):
                ip += 1
                continue
            self.levels.pop()
            ip = self._backtrack()
            if ip is None:
                return False

    def _backtrack(self):
        """Advance the innermost open level; returns the next step index
        to run from, or None when the search space is exhausted."""
        while self.levels:
            lev = self.levels[-1]
            if self._advance_level(lev):
                return lev.step_idx + 1
            self.levels.pop()
        return None

    def resume_after_fire(self) -> bool:
        boundary = self.plan.universal_prefix
        target = None
        for i, lev in enumerate(self.levels[:boundary]):
            if lev.sc is None or not lev.sc.alive:
                target = i
                break
        if target is None:
            target = min(boundary, len(self.levels)) - 1
        if target < 0:
            return False
        del self.levels[target + 1:]
        self.matched = False
        lev = self.levels[-1]
        if self._advance_level(lev):
            return self._forward_from(lev.step_idx + 1)
        self.levels.pop()
        ip = self._backtrack()
        if ip is None:
            return False
        return self._forward_from(ip)

    def _forward_from(self, ip) -> bool:
        steps = self.plan.steps
        b = self.bindings
        while True:
            if ip == len(steps):
                self.matched = True
                return True
            step = steps[ip]
            if isinstance(step, GuardStep):
                try:
                    ok = step.fn(b)
                except TypeError as e:
                    raise ChrRuntimeError(f"guard {step.call.render()}: {e}") from None
                if ok:
                    ip += 1
                    continue
                ip = self._backtrack()
                if ip is None:
                    return False
                continue
            if self.levels and self.levels[-1].step_idx == ip:
                lev = self.levels[-1]
            else:
                lev = self._open_level(ip, step)
            if self._advance_level(lev):
                ip += 1
                continue
            self.levels.pop()
            ip = self._backtrack()
            if ip is None:
                return False

    def partner_numbers(self):
        return [lev.sc for lev in self.levels]


# ---------------------------------------------------------------------------
# engine


class Engine:
    def __init__(self, compiled: CompiledProgram, depth_limit: int = 1_000_000,
                 near_tolerance: int = 25, debug_checks: bool = False):
        self.compiled = compiled
        self.program = compiled.program
        self.depth_limit = depth_limit
        self.debug_checks = debug_checks
        self.program.builtins.near_tolerance = near_tolerance
        specs = {key: c.index_spec for key, c in compiled.constraints.items()}
        self.store = ConstraintStore(specs)
        self.history: set = set()
        self.failed = False
        self.max_depth = 0

    # -- public API -------------------------------------------------------

    def solve_goal(self, calls: Sequence[ChrCall]):
        """Activate each goal constraint left to right; returns
        (final live constraints, failed?)."""
        try:
            for call in calls:
                args = tuple(compile_term(a, {})(()) for a in call.args)
                self.activate(call.symbol, call.arity, args)
        except ChrFailure:
            self.failed = True
        return list(self.store.live_constraints()), self.failed

    def activate(self, symbol, arity, args):
        self._drive(self._act((symbol, arity), tuple(args)))
        if self.debug_checks:
            self.store.check_coherence()

    # -- driver -----------------------------------------------------------

    def _drive(self, gen):
        stack = [gen]
        limit = self.depth_limit
        push = stack.append
        pop = stack.pop
        while stack:
            try:
                req = next(stack[-1])
            except StopIteration:
                pop()
                continue
            if len(stack) >= limit:
                raise DepthLimitExceeded(
                    f"activation depth limit {limit} exceeded "
                    f"(likely non-terminating program)"
                )
            if len(stack) > self.max_depth:
                self.max_depth = len(stack)
            push(self._act(req[0], req[1]))

    def _act(self, key, args):
        store = self.store
        constraints = self.compiled.constraints
        history = self.history
        while True:  # tail-call loop
            cprog = constraints.get(key)
            if cprog is None:
                raise ChrRuntimeError(f"activation of undeclared constraint {key}")
            num = store.next_number
            store.next_number = num + 1
            active = StoredConstraint(key[0], key[1], args, num)
            if cprog.storage == "entry":
                store.insert(active)
            occ = cprog.entry
            tail = None
            while occ is not None and active.alive:
                plan = cprog.plans[occ]
                b = [None] * plan.nslots
                okay = True
                for pos, slot in plan.active_binds:
                    b[slot] = args[pos]
                for tag, pos, x in plan.active_checks:
                    if tag == "v":
                        if args[pos] != x:
                            okay = False
                            break
                    elif args[pos] != b[x]:
                        okay = False
                        break
                if not okay:
                    occ = plan.fail_next
                    continue

                sx = plan.sx
                if sx is not None:
                    # compiled fast path: existential, at most one partner
                    lead, st, trail = sx
                    found = None
                    zero_partner_match = False
                    ok = True
                    for fn in lead:
                        if not fn(b):
                            ok = False
                            break
                    if ok and st is None:
                        zero_partner_match = True
                    elif ok:
                        idx = store.indexes[st.key]
                        anum = active.number
                        post = st.post
                        if type(idx) is YesNoIndex:
                            sc = idx.slot
                            store.probes += 1
                            if sc is not None and sc.alive and sc.number != anum:
                                cargs = sc.args
                                ok2 = True
                                for qpos, src in st.query:
                                    v = b[src[1]] if src[0] == "s" else src[1]
                                    if cargs[qpos] != v:
                                        ok2 = False
                                        break
                                if ok2:
                                    for tag, pos, x in post:
                                        if tag == "bind":
                                            b[x] = cargs[pos]
                                        elif tag == "chk":
                                            if cargs[pos] != b[x]:
                                                ok2 = False
                                                break
                                        elif cargs[pos] != x:
                                            ok2 = False
                                            break
                                if ok2:
                                    for fn in trail:
                                        if not fn(b):
                                            ok2 = False
                                            break
                                if ok2:
                                    found = sc
                        else:
                            fixed = [
                                (qpos, b[src[1]] if src[0] == "s" else src[1])
                                for qpos, src in st.query
                            ]
                            for sc in idx.lazy(fixed, store):
                                if sc.number == anum:
                                    continue
                                cargs = sc.args
                                ok2 = True
                                for tag, pos, x in post:
                                    if tag == "bind":
                                        b[x] = cargs[pos]
                                    elif tag == "chk":
                                        if cargs[pos] != b[x]:
                                            ok2 = False
                                            break
                                    elif cargs[pos] != x:
                                        ok2 = False
                                        break
                                if ok2:
                                    for fn in trail:
                                        if not fn(b):
                                            ok2 = False
                                            break
                                if ok2:
                                    found = sc
                                    break
                    if found is not None or zero_partner_match:
                        if found is not None and st.removed:
                            store.delete_constraint(found)
                        if plan.active_removed:
                            store.delete_constraint(active)
                        if plan.store_here and active.alive and not active.stored:
                            store.insert(active)
                        mode = plan.body_mode
                        if mode == 1:
                            fns = plan.body_tail[1]
                            if len(fns) == 1:
                                tail = (plan.body_tail[0], (fns[0](b),))
                            else:
                                tail = (plan.body_tail[0], tuple(f(b) for f in fns))
                            break
                        if mode == 2:
                            tail = yield from self._run_body(plan, b)
                            if tail is not None:
                                break
                        occ = plan.succ_next if active.alive else None
                    else:
                        if plan.store_here and active.alive and not active.stored:
                            store.insert(active)
                        occ = plan.fail_next
                    continue

                cur = MatchCursor(plan, store, active, b)
                if plan.search == "existential":
                    fired = False
                    while cur.next_match():
                        if plan.history_rule is not None:
                            hkey = self._history_key(plan, cur, active)
                            if hkey in history:
                                continue
                        self._fire_deletes(plan, cur, active)
                        if plan.history_rule is not None:
                            history.add(hkey)
                        if plan.store_here and active.alive and not active.stored:
                            store.insert(active)
                        tail = yield from self._run_body(plan, b)
                        fired = True
                        break
                    if tail is not None:
                        break
                    if fired:
                        occ = plan.succ_next if active.alive else None
                    else:
                        if plan.store_here and active.alive and not active.stored:
                            store.insert(active)
                        occ = plan.fail_next
                else:
                    m = cur.next_match()
                    while m:
                        if plan.history_rule is not None:
                            hkey = self._history_key(plan, cur, active)
                            if hkey in history:
                                m = cur.next_match()
                                continue
                        self._fire_deletes(plan, cur, active)
                        if plan.history_rule is not None:
                            history.add(hkey)
                        if plan.store_here and active.alive and not active.stored:
                            store.insert(active)
                        yield from self._run_body(plan, b)
                        if not active.alive:
                            break
                        m = cur.resume_after_fire()
                    if plan.store_here and active.alive and not active.stored:
                        store.insert(active)
                    occ = plan.fail_next if active.alive else None

            if tail is None:
                if active.alive and not active.stored and cprog.storage == STORAGE_END:
                    store.insert(active)
                return
            key, args = tail

    def _history_key(self, plan, cur: MatchCursor, active):
        levels = cur.levels
        nums = tuple(
            active.number if i < 0 else levels[i].sc.number
            for i in plan.history_layout
        )
        return (plan.history_rule,) + nums

    def _fire_deletes(self, plan, cur: MatchCursor, active):
        store = self.store
        levels = cur.levels
        for li in plan.removed_levels:
            store.delete_constraint(levels[li].sc)
        if plan.active_removed:
            store.delete_constraint(active)

    def _run_body(self, plan, b):
        for op in plan.body_ops:
            tag = op[0]
            if tag == BODY_CALL:
                yield op[1], tuple(f(b) for f in op[2])
            elif tag == BODY_TAIL:
                return op[1], tuple(f(b) for f in op[2])
            elif tag == BODY_GUARD:
                try:
                    ok = op[1](b)
                except TypeError as e:
                    raise ChrRuntimeError(f"body test {op[2]}: {e}") from None
                if not ok:
                    raise ChrFailure(f"body test {op[2]} failed")
            else:
                raise ChrFailure("fail")
        return None


# ---------------------------------------------------------------------------
# spec-level builtin evaluation (used by tests and oracles)


def eval_builtin(call: GuardCall, bindings: dict, registry: BuiltinRegistry):
    """Evaluate one builtin over a name->value environment.

    Returns True/False for tests; for a binding call returns the updated
    environment.  Unbound inputs raise; division by zero fails the
    derivation.
    """
    slots = {}
    vals = []
    for name in sorted({v.name for a in call.args for v in term_vars(a)}):
        slots[name] = len(vals)
        vals.append(bindings.get(name))
    outs = frozenset(n for n in call.out_candidates if bindings.get(n) is None)
    missing = [n for n in (call.all_vars - outs) if bindings.get(n) is None]
    if missing:
        raise ChrRuntimeError(f"unbound input {missing[0]} in {call.render()}")
    from .plancompile import _compile_guard_fn

    fn, bound_slots = _compile_guard_fn(call, slots, outs, registry)
    ok = fn(vals)
    if not outs:
        return bool(ok)
    out = dict(bindings)
    for n in outs:
        out[n] = vals[slots[n]]
    return out


# ---------------------------------------------------------------------------
# canonical store rendering


def canonical_constraints(live: Iterable[StoredConstraint], analysis: AnalysisReport):
    """Dedupe set-semantics constraints, then sort by symbol and ground
    term order.  Duplicate copies of set-semantics constraints are
    interchangeable by construction, so one line stands for them all."""
    seen = set()
    rows = []
    for sc in live:
        key = (sc.symbol, sc.arity)
        info = analysis.constraints.get(key)
        if info is not None and info.has_set_semantics:
            ident = (sc.symbol, sc.arity, sc.args)
            if ident in seen:
                continue
            seen.add(ident)
        rows.append(sc)
    rows.sort(key=lambda sc: (sc.symbol, sc.arity, tuple(ground_key(a) for a in sc.args)))
    return rows


def canonical_lines(live, analysis) -> list:
    return [sc.render() for sc in canonical_constraints(live, analysis)]
