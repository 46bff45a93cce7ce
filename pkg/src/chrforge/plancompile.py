"""Occurrence compilation: from analyzed rules to executable search plans.

Each constraint gets one program: its occurrences in execution order,
each lowered to a sequence of partner-lookup and guard steps over a flat
slot frame, plus body operations, continuation wiring, and the storage
placement decided by the late-storage analysis.  Variables are resolved
to slot indexes here so the engine never touches names.

Search shape per occurrence: when the active constraint is removed the
whole search is existential (first full match fires, then the active is
gone).  With the active kept, partner levels iterate universally up to
and including the first removed partner in join order and existentially
after it; firing resumes iteration at the deepest universal level.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

from .analysis import STORAGE_END, STORAGE_NEVER, AnalysisReport
from .builtins import ArithFailure, BuiltinRegistry, EvalError
from .errors import ChrFailure, ChrRuntimeError
from .flags import OptFlags
from .indexsel import LIST, TREE, YESNO, IndexSpec, ReducedLookup, choose_index, is_singleton_lookup, reduce_lookups
from .joinorder import GuardGoal, JoinPlan, Lookup, PartnerGoal, best_join_order
from .surface import ChrCall, FailItem, GuardCall, HeadAtom, Program, Rule, TrueItem
from .terms import Atom, Int, Struct, Term, Var, to_value

HALT = None


# ---------------------------------------------------------------------------
# slot-compiled term evaluation


def _div(a, d):
    if d == 0:
        raise ChrFailure("division by zero")
    return a // d


def _mod(a, d):
    if d == 0:
        raise ChrFailure("division by zero")
    return a % d


_EVAL_ENV = {"_div": _div, "_mod": _mod, "min": min, "max": max, "__builtins__": {}}


def term_source(t: Term, slots: dict) -> str:
    """Python source for evaluating ``t`` against a binding frame ``b``."""
    if isinstance(t, Var):
        return f"b[{slots[t.name]}]"
    if isinstance(t, Int):
        return repr(t.value)
    if isinstance(t, Atom):
        return repr(t.name)
    assert isinstance(t, Struct)
    subs = [term_source(a, slots) for a in t.args]
    name = t.name
    if name in ("+", "-", "*") and len(subs) == 2:
        return f"({subs[0]} {name} {subs[1]})"
    if name == "-" and len(subs) == 1:
        return f"(-{subs[0]})"
    if name == "//":
        return f"_div({subs[0]}, {subs[1]})"
    if name == "mod":
        return f"_mod({subs[0]}, {subs[1]})"
    if name in ("min", "max") and len(subs) == 2:
        return f"{name}({subs[0]}, {subs[1]})"
    inner = ", ".join([repr(name)] + subs)
    return f"({inner})"


def compile_term(t: Term, slots: dict) -> Callable:
    """Single-frame evaluator for a term over a binding frame."""
    return eval(f"lambda b: {term_source(t, slots)}", dict(_EVAL_ENV))


_CMP_SRC = {"=": "==", "!=": "!=", ">=": ">=", "<=": "<=", ">": ">", "<": "<"}


def _compile_guard_fn(call: GuardCall, slots: dict, bind_vars: frozenset,
                      registry: BuiltinRegistry):
    """Compile one guard into (test_or_bind_fn, bound_slots)."""
    name = call.builtin
    if bind_vars:
        # single-out builtins: '=' computes the rhs, others via spec.compute
        (var,) = bind_vars
        slot = slots[var]
        if name == "=":
            src = term_source(call.args[1], slots)
            fn = eval(
                f"lambda b: (b.__setitem__({slot}, {src}), True)[1]", dict(_EVAL_ENV)
            )
            return fn, (slot,)
        spec = registry.get(name, len(call.args))
        compute = spec.compute
        out_pos = next(iter(spec.out_positions))
        in_fns = tuple(
            compile_term(a, slots)
            for i, a in enumerate(call.args, start=1)
            if i != out_pos
        )

        def bind_generic(b, slot=slot, compute=compute, in_fns=in_fns):
            b[slot] = compute([f(b) for f in in_fns])
            return True

        return bind_generic, (slot,)

    if name in _CMP_SRC and len(call.args) == 2:
        a = term_source(call.args[0], slots)
        c = term_source(call.args[1], slots)
        return eval(f"lambda b: {a} {_CMP_SRC[name]} {c}", dict(_EVAL_ENV)), ()
    if name == "true":
        return (lambda b: True), ()
    if name == "fail":
        return (lambda b: False), ()
    spec = registry.get(name, len(call.args))
    test = spec.test
    arg_fns = tuple(compile_term(a, slots) for a in call.args)

    def call_test(b, test=test, arg_fns=arg_fns):
        return test([f(b) for f in arg_fns])

    return call_test, ()


# ---------------------------------------------------------------------------
# compiled step / plan structures


@dataclass
class PartnerStep:
    key: tuple  # (symbol, arity)
    atom: Optional[HeadAtom]
    removed: bool
    universal: bool
    query: tuple  # ((query_pos0, ('s', slot) | ('v', value)), ...)
    post: tuple  # (('bind', pos0, slot) | ('chk', pos0, slot) | ('chkv', pos0, value)), over the view
    view_perm: Optional[tuple]  # 0-based: view[i] = cand.args[view_perm[i]]
    lookup: Optional[ReducedLookup]
    raw_lookup: Optional[Lookup]
    singleton: bool
    bound_slots: tuple

    def render(self) -> str:
        tag = "removed" if self.removed else "kept"
        mode = "forall" if self.universal else "exists"
        s = f"{self.atom.render() if self.atom else self.key[0]}[{tag}] {mode} lookup {self.lookup.render() if self.lookup else '?'}"
        if self.singleton:
            s += " [singleton]"
        return s


@dataclass
class GuardStep:
    fn: Callable
    call: GuardCall
    bound_slots: tuple

    def render(self) -> str:
        return self.call.render()


BODY_CALL = 0
BODY_TAIL = 1
BODY_GUARD = 2
BODY_FAIL = 3


@dataclass
class OccurrencePlan:
    occ_id: int
    rule: Optional[Rule]
    rule_label: str
    active: Optional[HeadAtom]
    active_removed: bool
    active_binds: tuple  # ((pos0, slot), ...)
    active_checks: tuple  # (('v', pos0, value) | ('s', pos0, slot), ...)
    steps: tuple
    universal_prefix: int  # partner levels iterated universally
    search: str  # existential | universal
    body_ops: tuple
    history_rule: Optional[int]
    history_layout: tuple  # -1 for the active, else partner level index; head-textual order
    store_here: bool
    delete_active_emits: bool
    nslots: int
    fail_next: Optional[int]
    succ_next: Optional[int]
    score_render: str = ""
    goal_render: str = ""
    body_render: str = ""
    residuals: tuple = ()
    # fast-path fields, derived in finalize()
    removed_levels: tuple = ()
    body_mode: int = 2  # 0 empty, 1 single tail call, 2 general
    body_tail: tuple = ()
    sx: Optional[tuple] = None  # (lead guard fns, partner step | None, trail guard fns)

    @property
    def partner_levels(self) -> int:
        return sum(1 for s in self.steps if isinstance(s, PartnerStep))

    def finalize(self):
        partner_idx = [i for i, s in enumerate(self.steps) if isinstance(s, PartnerStep)]
        self.removed_levels = tuple(
            li for li, i in enumerate(partner_idx) if self.steps[i].removed
        )
        if not self.body_ops:
            self.body_mode = 0
        elif len(self.body_ops) == 1 and self.body_ops[0][0] == BODY_TAIL:
            self.body_mode = 1
            self.body_tail = (self.body_ops[0][1], self.body_ops[0][2])
        else:
            self.body_mode = 2
        self.sx = None
        if self.search == "existential" and self.history_rule is None and len(partner_idx) <= 1:
            if not partner_idx:
                fns = tuple(s.fn for s in self.steps)
                self.sx = (fns, None, ())
            else:
                pi = partner_idx[0]
                step = self.steps[pi]
                if step.view_perm is None:
                    lead = tuple(s.fn for s in self.steps[:pi])
                    trail = tuple(s.fn for s in self.steps[pi + 1:])
                    self.sx = (lead, step, trail)


@dataclass
class ConstraintProgram:
    key: tuple
    occ_order: tuple
    plans: dict
    entry: Optional[int]
    storage: object  # 'entry' | 'end' | 'never' | occurrence id
    index_spec: IndexSpec
    dedup_injected: bool
    never_stored: bool


@dataclass
class CompiledProgram:
    program: Program
    analysis: AnalysisReport
    flags: OptFlags
    constraints: dict  # key -> ConstraintProgram
    join_plans: dict  # key -> list[(occ_id, JoinPlan)]

    def render_plan(self) -> str:
        return render_plan_dump(self)

    def render_indexes(self) -> str:
        lines = [self.constraints[k].index_spec.render() for k in sorted(self.constraints)]
        return "\n".join(lines)

    def render_joins(self) -> str:
        lines = []
        for key in sorted(self.join_plans):
            for occ, jp in self.join_plans[key]:
                lines.append(
                    f"join {key[0]}/{key[1]} occ {occ}: score {jp.score.render()} "
                    f"goal: {jp.render_goal()} lookups: "
                    + "; ".join(lk.render() for lk in jp.lookups)
                )
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# occurrence ordering / search classification (public pipeline pieces)


def order_occurrences(prog: Program, symbol: str, arity: int) -> list:
    """Textual order, except simpagation removed-side occurrences of the
    symbol run before the kept-side ones."""
    from .analysis import execution_order

    return execution_order(prog, symbol, arity)


def classify_search(active_removed: bool, joinplan: JoinPlan) -> str:
    if active_removed:
        return "existential"
    if not any(isinstance(g, PartnerGoal) for g in joinplan.goal):
        return "existential"
    return "universal"


# ---------------------------------------------------------------------------
# continuation optimization


def _match_term(pat: Term, tgt: Term, sub: dict) -> Optional[dict]:
    if isinstance(pat, Var):
        if pat.name in sub:
            return sub if sub[pat.name] == tgt else None
        out = dict(sub)
        out[pat.name] = tgt
        return out
    if isinstance(pat, (Int, Atom)):
        return sub if pat == tgt else None
    if isinstance(pat, Struct) and isinstance(tgt, Struct) and pat.name == tgt.name \
            and len(pat.args) == len(tgt.args):
        for a, b in zip(pat.args, tgt.args):
            sub = _match_term(a, b, sub)
            if sub is None:
                return None
        return sub
    return None


def _match_atoms(pat: HeadAtom, tgt: HeadAtom, sub: dict) -> Optional[dict]:
    if pat.key != tgt.key:
        return None
    for a, b in zip(pat.args, tgt.args):
        sub = _match_term(a, b, sub)
        if sub is None:
            return None
    return sub


def _subsumes(active_i, partners_i, guards_i, active_j, partners_j, guards_j) -> bool:
    """Failure of occurrence i implies failure of occurrence j: find a
    substitution mapping i's match condition into (a sub-multiset of) j's."""
    sub = _match_atoms(active_i, active_j, {})
    if sub is None:
        return None

    def place_partners(idx, used, sub):
        if idx == len(partners_i):
            return place_guards(0, sub)
        for t, tgt in enumerate(partners_j):
            if t in used:
                continue
            s2 = _match_atoms(partners_i[idx], tgt, sub)
            if s2 is not None and place_partners(idx + 1, used | {t}, s2):
                return True
        return False

    def place_guards(idx, sub):
        if idx == len(guards_i):
            return True
        g = guards_i[idx]
        if g.builtin == "true":
            return place_guards(idx + 1, sub)
        for h in guards_j:
            if h.builtin != g.builtin or len(h.args) != len(g.args):
                continue
            s2 = sub
            for a, b in zip(g.args, h.args):
                s2 = _match_term_term(a, b, s2)
                if s2 is None:
                    break
            if s2 is not None and place_guards(idx + 1, s2):
                return True
        return False

    return bool(place_partners(0, frozenset(), sub))


def _match_term_term(pat: Term, tgt: Term, sub: dict) -> Optional[dict]:
    """Like _match_term but the target is a pattern term too (guards)."""
    if isinstance(pat, Var):
        if pat.name in sub:
            return sub if sub[pat.name] == tgt else None
        out = dict(sub)
        out[pat.name] = tgt
        return out
    if isinstance(pat, (Int, Atom)):
        return sub if pat == tgt else None
    if isinstance(pat, Struct) and isinstance(tgt, Struct) and pat.name == tgt.name \
            and len(pat.args) == len(tgt.args):
        for a, b in zip(pat.args, tgt.args):
            sub = _match_term_term(a, b, sub)
            if sub is None:
                return None
        return sub
    return None


def continuation_skips(occ_infos: Sequence) -> tuple:
    """Apply fail-continuation optimization over an execution-ordered
    occurrence sequence.

    ``occ_infos``: (occ_id, search, active_removed, active, partners, guards).
    Returns (surviving occurrence ids, fail_next map, dropped ids).
    """
    infos = list(occ_infos)

    def subsume(a, b):
        if a[1] != "existential" or b[1] != "existential":
            return False
        return _subsumes(a[3], a[4], a[5], b[3], b[4], b[5])

    # drop occurrences made unreachable by a subsuming active-removing
    # predecessor that also removes its own active
    changed = True
    dropped = []
    while changed:
        changed = False
        for i in range(len(infos) - 1):
            a, b = infos[i], infos[i + 1]
            if a[2] and b[2] and subsume(a, b):
                dropped.append(b[0])
                del infos[i + 1]
                changed = True
                break

    fail_next = {}
    ids = [x[0] for x in infos]
    for i, a in enumerate(infos):
        j = i + 1
        while j < len(infos) and subsume(a, infos[j]):
            j += 1
        fail_next[a[0]] = infos[j][0] if j < len(infos) else HALT
    return tuple(ids), fail_next, tuple(dropped)


# ---------------------------------------------------------------------------
# lowering one occurrence


def _rule_slots(rule: Rule) -> dict:
    names = []
    seen = set()
    for h in rule.heads:
        for a in h.args:
            for v in _term_vars(a):
                if v not in seen:
                    seen.add(v)
                    names.append(v)
    for g in rule.guard:
        for v in sorted(g.all_vars | g.out_candidates):
            if v not in seen:
                seen.add(v)
                names.append(v)
    return {n: i for i, n in enumerate(names)}


def _term_vars(t: Term):
    if isinstance(t, Var):
        yield t.name
    elif isinstance(t, Struct):
        for a in t.args:
            yield from _term_vars(a)


def _active_ops(active: HeadAtom, slots: dict):
    binds = []
    checks = []
    bound = set()
    for pos, a in enumerate(active.args):
        if isinstance(a, Var):
            if a.name in bound:
                checks.append(("s", pos, slots[a.name]))
            else:
                binds.append((pos, slots[a.name]))
                bound.add(a.name)
        else:
            checks.append(("v", pos, to_value(a)))
    return tuple(binds), tuple(checks), bound


def _lower_partner(atom: HeadAtom, reduced: ReducedLookup, raw: Lookup, removed: bool,
                   universal: bool, singleton: bool, slots: dict, bound: set):
    k = atom.arity
    perm = reduced.swap  # 1-based original->query, or None
    inv = None
    view_perm = None
    if perm is not None:
        inv = [0] * k
        for p in range(1, k + 1):
            inv[perm[p - 1] - 1] = p
        # candidate view: view[p-1] = cand.args[perm[p-1]-1]
        view_perm = tuple(perm[p - 1] - 1 for p in range(1, k + 1))

    query = []
    for p in range(1, k + 1):
        qp = perm[p - 1] if perm else p
        if qp in reduced.fixed:
            a = atom.args[p - 1]
            if isinstance(a, Var):
                query.append((qp - 1, ("s", slots[a.name])))
            else:
                query.append((qp - 1, ("v", to_value(a))))
    query.sort(key=lambda e: e[0])

    post = []
    newly = []
    covered = {qp for qp, _ in query}
    for pos, a in enumerate(atom.args):
        qpos = (perm[pos] - 1) if perm else pos
        if isinstance(a, Var):
            if a.name in bound:
                if qpos not in covered:
                    post.append(("chk", pos, slots[a.name]))
            elif a.name in [n for _, n in newly]:
                post.append(("chk", pos, slots[a.name]))
            else:
                post.append(("bind", pos, slots[a.name]))
                newly.append((pos, a.name))
        else:
            if qpos not in covered:
                post.append(("chkv", pos, to_value(a)))
    bound.update(n for _, n in newly)
    return PartnerStep(
        key=(atom.symbol, atom.arity),
        atom=atom,
        removed=removed,
        universal=universal,
        query=tuple(query),
        post=tuple(post),
        view_perm=view_perm,
        lookup=reduced,
        raw_lookup=raw,
        singleton=singleton,
        bound_slots=tuple(slots[n] for _, n in newly),
    )


def _lower_body(rule: Rule, slots: dict, active_removed: bool, succ_is_halt: bool,
                registry: BuiltinRegistry):
    ops = []
    items = list(rule.body)
    for idx, item in enumerate(items):
        last = idx == len(items) - 1
        if isinstance(item, ChrCall):
            arg_fns = tuple(compile_term(a, slots) for a in item.args)
            tail = last and active_removed and succ_is_halt
            ops.append((BODY_TAIL if tail else BODY_CALL, (item.symbol, item.arity), arg_fns))
        elif isinstance(item, GuardCall):
            fn, _ = _compile_guard_fn(item, slots, frozenset(), registry)
            ops.append((BODY_GUARD, fn, item.render()))
        elif isinstance(item, TrueItem):
            pass
        else:
            ops.append((BODY_FAIL, None, None))
    return tuple(ops)


def _lower_occurrence(prog: Program, rule: Rule, active: HeadAtom, removed: bool,
                      jp: JoinPlan, reduced_map: dict, singleton_map: dict,
                      registry: BuiltinRegistry) -> OccurrencePlan:
    slots = _rule_slots(rule)
    binds, checks, bound = _active_ops(active, slots)

    # universal prefix: levels up to and including the first removed partner
    partner_goals = [g for g in jp.goal if isinstance(g, PartnerGoal)]
    first_removed = None
    for i, pg in enumerate(partner_goals):
        if rule.is_removed(pg.atom):
            first_removed = i
            break
    if removed:
        universal_prefix = 0
    elif first_removed is None:
        universal_prefix = len(partner_goals)
    else:
        universal_prefix = first_removed + 1

    steps = []
    level = 0
    residuals = []
    for g in jp.goal:
        if isinstance(g, PartnerGoal):
            reduced = reduced_map[g.lookup]
            singleton = singleton_map[g.lookup]
            step = _lower_partner(
                g.atom, reduced, g.lookup, rule.is_removed(g.atom),
                level < universal_prefix, singleton, slots, bound,
            )
            residuals.extend(reduced.residual_pairs)
            steps.append(step)
            level += 1
        else:
            fn, bslots = _compile_guard_fn(g.call, slots, g.outs, registry)
            bound |= g.outs
            steps.append(GuardStep(fn, g.call, bslots))

    search = classify_search(removed, jp)
    succ_is_halt = removed
    body_ops = _lower_body(rule, slots, removed, succ_is_halt, registry)

    history_rule = rule.source_index if rule.kind == "propagation" else None
    layout = []
    if history_rule is not None:
        for h in rule.heads:
            if h is active:
                layout.append(-1)
            else:
                layout.append(next(i for i, pg in enumerate(partner_goals) if pg.atom is h))

    plan = OccurrencePlan(
        occ_id=active.occurrence_id,
        rule=rule,
        rule_label=rule.name or f"rule{rule.source_index + 1}",
        active=active,
        active_removed=removed,
        active_binds=binds,
        active_checks=checks,
        steps=tuple(steps),
        universal_prefix=universal_prefix,
        search=search,
        body_ops=body_ops,
        history_rule=history_rule,
        history_layout=tuple(layout),
        store_here=False,
        delete_active_emits=False,
        nslots=len(slots),
        fail_next=HALT,
        succ_next=HALT,
        score_render=jp.score.render(),
        goal_render=jp.render_goal(),
        body_render=", ".join(b.render() for b in rule.body),
        residuals=tuple(residuals),
    )
    plan.finalize()
    return plan


def _dedup_plan(key: tuple, first_occ: Optional[int]) -> OccurrencePlan:
    sym, ar = key
    query = tuple((p, ("s", p)) for p in range(ar))
    step = PartnerStep(
        key=key,
        atom=None,
        removed=False,
        universal=False,
        query=query,
        post=(),
        view_perm=None,
        lookup=ReducedLookup(sym, ar, frozenset(range(1, ar + 1))),
        raw_lookup=None,
        singleton=True,
        bound_slots=(),
    )
    plan = OccurrencePlan(
        occ_id=0,
        rule=None,
        rule_label="dedup",
        active=None,
        active_removed=True,
        active_binds=tuple((p, p) for p in range(ar)),
        active_checks=(),
        steps=(step,),
        universal_prefix=0,
        search="existential",
        body_ops=(),
        history_rule=None,
        history_layout=(),
        store_here=False,
        delete_active_emits=False,
        nslots=ar,
        fail_next=first_occ,
        succ_next=HALT,
        goal_render=f"duplicate {sym}/{ar}",
        body_render="true",
    )
    plan.finalize()
    return plan


# ---------------------------------------------------------------------------
# whole-program compilation


def compile_constraint(prog: Program, key: tuple, analysis: AnalysisReport,
                       joinplans: dict, index_spec: IndexSpec, reduced_map: dict,
                       singleton_map: dict, flags: OptFlags) -> ConstraintProgram:
    sym, ar = key
    info = analysis.info(sym, ar)
    order = [
        occ for occ in analysis.exec_order[key]
        if (sym, ar, occ) not in analysis.dropped_occurrences
    ]
    occ_data = {}
    for r, h, removed in prog.occurrences(sym, ar):
        occ_data[h.occurrence_id] = (r, h, removed)

    plans = {}
    infos = []
    for occ in order:
        r, h, removed = occ_data[occ]
        jp = joinplans[(key, occ)]
        plan = _lower_occurrence(prog, r, h, removed, jp, reduced_map, singleton_map,
                                 prog.builtins)
        partners = [g.atom for g in jp.goal if isinstance(g, PartnerGoal)]
        plans[occ] = plan
        infos.append((occ, plan.search, removed, h, partners, list(r.guard)))

    if flags.continuation:
        order_kept, fail_map, dropped = continuation_skips(infos)
    else:
        order_kept = tuple(x[0] for x in infos)
        fail_map = {
            x[0]: (infos[i + 1][0] if i + 1 < len(infos) else HALT)
            for i, x in enumerate(infos)
        }
        dropped = ()
    for d in dropped:
        del plans[d]

    seq = list(order_kept)
    for i, occ in enumerate(seq):
        plan = plans[occ]
        nxt = seq[i + 1] if i + 1 < len(seq) else HALT
        plan.fail_next = fail_map[occ]
        plan.succ_next = HALT if plan.active_removed else nxt

    # storage placement
    if info.never_stored:
        storage = STORAGE_NEVER
    elif not flags.late_storage:
        storage = "entry"
    else:
        storage = info.storage_occ
        if storage not in (STORAGE_END, STORAGE_NEVER) and storage not in plans:
            # the storage occurrence was optimized away; store at quiescence
            storage = STORAGE_END
    pos_of = {occ: i for i, occ in enumerate(seq)}
    for occ, plan in plans.items():
        plan.store_here = storage == occ
        if plan.active_removed:
            if storage == "entry":
                plan.delete_active_emits = True
            elif storage in (STORAGE_END, STORAGE_NEVER):
                plan.delete_active_emits = False
            else:
                plan.delete_active_emits = pos_of.get(storage, 1 << 30) < pos_of[occ]

    dedup = flags.set_dedup and info.set_form == "behavioral"
    if dedup:
        entry = 0
        plans[0] = _dedup_plan(key, seq[0] if seq else HALT)
        seq = [0] + seq
    else:
        entry = seq[0] if seq else HALT

    return ConstraintProgram(
        key=key,
        occ_order=tuple(seq),
        plans=plans,
        entry=entry,
        storage=storage,
        index_spec=index_spec,
        dedup_injected=dedup,
        never_stored=info.never_stored,
    )


def compile_program(prog: Program, analysis: AnalysisReport, flags: OptFlags) -> CompiledProgram:
    fds = set()
    for info in analysis.constraints.values():
        fds.update(info.fds)

    # join plans per surviving occurrence
    joinplans = {}
    per_key_joins = {}
    raw_lookups: dict = {}
    for key in prog.decls:
        sym, ar = key
        pk = []
        survivors = [
            occ for occ in analysis.exec_order[key]
            if (sym, ar, occ) not in analysis.dropped_occurrences
        ]
        occ_data = {h.occurrence_id: (r, h) for r, h, _ in prog.occurrences(sym, ar)}
        for occ in survivors:
            r, h = occ_data[occ]
            jp = best_join_order(r, h, fds, early_guards=flags.join_order)
            joinplans[(key, occ)] = jp
            pk.append((occ, jp))
            for lk in jp.lookups:
                raw_lookups.setdefault((lk.symbol, lk.arity), set()).add(lk)
        per_key_joins[key] = pk

    # per-constraint lookup reduction + index choice
    reduced_map: dict = {}
    singleton_map: dict = {}
    specs: dict = {}
    for key in prog.decls:
        info = analysis.info(*key)
        lookups = raw_lookups.get(key, set())
        mapping, shapes = reduce_lookups(lookups, info, use_symmetry=flags.symmetry)
        reduced_map.update(mapping)
        for lk, red in mapping.items():
            singleton_map[lk] = is_singleton_lookup(red, info.fds, info.has_set_semantics)
        if flags.index_auto:
            spec = choose_index(key[0], key[1], shapes, info)
            if spec.structure == YESNO and not flags.late_storage:
                # eager insertion can momentarily hold two copies
                spec = IndexSpec(key[0], key[1], LIST, (), spec.shapes)
        else:
            spec = IndexSpec(key[0], key[1], LIST, (), shapes)
        specs[key] = spec

    constraints = {}
    for key in prog.decls:
        constraints[key] = compile_constraint(
            prog, key, analysis, joinplans, specs[key], reduced_map, singleton_map, flags
        )
    return CompiledProgram(prog, analysis, flags, constraints, per_key_joins)


# ---------------------------------------------------------------------------
# plan dump


def render_plan_dump(cp: CompiledProgram) -> str:
    lines = []
    for key in sorted(cp.constraints):
        c = cp.constraints[key]
        sym, ar = key
        lines.append(f"constraint {sym}/{ar}:")
        lines.append(f"  index {c.index_spec.structure}"
                     + (f" key=({','.join(map(str, c.index_spec.key))})"
                        if c.index_spec.structure == TREE else ""))
        order_txt = ",".join("dedup" if o == 0 and c.dedup_injected else str(o)
                             for o in c.occ_order)
        lines.append(f"  order {order_txt or '-'}")
        lines.append(f"  storage {c.storage}")
        for occ in c.occ_order:
            p = c.plans[occ]
            name = "dedup" if occ == 0 and c.dedup_injected else f"occ {occ}"
            lines.append(
                f"  {name} rule {p.rule_label} active "
                f"{'removed' if p.active_removed else 'kept'} search {p.search}"
            )
            lines.append(f"    goal: {p.goal_render or '-'}")
            lines.append(f"    body: {p.body_render or 'true'}")
            lines.append(f"    delete-active: {'yes' if p.delete_active_emits else 'no'}")
            lines.append(f"    insert: {'here' if p.store_here else 'no'}")
            if p.search == "universal":
                tgt = "halt" if p.fail_next is HALT else f"occ {p.fail_next}"
                lines.append(f"    cont -> {tgt}")
            else:
                f_t = "halt" if p.fail_next is HALT else f"occ {p.fail_next}"
                s_t = "halt" if p.succ_next is HALT else f"occ {p.succ_next}"
                lines.append(f"    fail -> {f_t} ; succ -> {s_t}")
    return "\n".join(lines)
