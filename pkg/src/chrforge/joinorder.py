"""Join ordering and guard scheduling for occurrence compilation.

Per occurrence, the remaining heads of the rule form a multi-way join
driven from the active constraint.  With no cardinality statistics, cost
is the pair (u, f): u counts partner variables still free before the join
(worst-case join-size exponent), f the negated count of already-fixed
partner variables, both adjusted by the selectivity of guards that become
schedulable right after the join.  Pairs compare lexicographically and
accumulate with weight n-i+1 for the i-th of n joins, which rewards
putting cheap joins early.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .analysis import FunctionalDependency, fdclose, instantiate_fds
from .surface import GuardCall, HeadAtom, Rule
from .terms import Term, Var, term_vars

HALF = Fraction(1, 2)


@dataclass(frozen=True)
class CostPair:
    u: Fraction
    f: Fraction

    def __add__(self, other: "CostPair") -> "CostPair":
        return CostPair(self.u + other.u, self.f + other.f)

    def key(self):
        return (self.u, self.f)

    def __lt__(self, other):
        return self.key() < other.key()

    def __le__(self, other):
        return self.key() <= other.key()

    def render(self) -> str:
        return f"({_fr(self.u)},{_fr(self.f)})"


def _fr(x: Fraction) -> str:
    if x.denominator == 1:
        return str(x.numerator)
    return str(float(x))


ZERO = CostPair(Fraction(0), Fraction(0))


@dataclass(frozen=True)
class Lookup:
    """Index query pattern: per position either the fixed term or None."""

    symbol: str
    arity: int
    pattern: tuple  # Term | None per position
    swap: Optional[tuple] = None  # symmetry rewrite applied at match time

    @property
    def fixed_positions(self) -> frozenset:
        return frozenset(i + 1 for i, t in enumerate(self.pattern) if t is not None)

    def render(self) -> str:
        if self.arity == 0:
            return self.symbol
        inner = ",".join("_" if t is None else str(t) for t in self.pattern)
        s = f"{self.symbol}({inner})"
        if self.swap:
            i, j = sorted(self.swap)
            s += f" via swap({i},{j})"
        return s


@dataclass(frozen=True)
class PartnerGoal:
    atom: HeadAtom
    lookup: Lookup

    def render(self) -> str:
        return self.atom.render()


@dataclass(frozen=True)
class GuardGoal:
    call: GuardCall
    outs: frozenset = frozenset()  # variables this placement binds

    def render(self) -> str:
        return self.call.render()


@dataclass(frozen=True)
class JoinPlan:
    occurrence_id: int
    score: CostPair
    goal: tuple  # PartnerGoal | GuardGoal
    lookups: tuple  # one Lookup per partner, join order

    def render_goal(self) -> str:
        return ", ".join(item.render() for item in self.goal)


# ---------------------------------------------------------------------------


def guard_outs(g: GuardCall, fixed) -> frozenset:
    """Variables this guard binds when run with ``fixed`` already known."""
    return g.out_candidates - set(fixed)


def guard_schedulable(g: GuardCall, fixed) -> bool:
    f = set(fixed)
    return (g.all_vars - guard_outs(g, f)) <= f


def schedule_guards(fixed: Iterable, guards: Sequence[GuardCall]) -> list:
    """Guards whose inputs are covered, scheduled eagerly in source order.

    Modes are chosen per call site: an out-capable position binds exactly
    when its variable is still unfixed here.
    """
    f = set(fixed)
    pending = list(guards)
    out = []
    changed = True
    while changed and pending:
        changed = False
        for g in list(pending):
            if guard_schedulable(g, f):
                out.append(g)
                f |= guard_outs(g, f)
                pending.remove(g)
                changed = True
    return out


def selectivity(guards: Sequence[GuardCall], fixed: Iterable = ()) -> Fraction:
    """Summed filtering power of a guard batch scheduled at ``fixed``.

    An equality with both sides already fixed removes one degree of
    freedom (1); a guard that binds removes none (0); any other test
    counts 0.5.
    """
    total = Fraction(0)
    f = set(fixed)
    for g in guards:
        outs = guard_outs(g, f)
        if g.builtin == "true":
            pass
        elif outs:
            pass  # computations filter nothing
        elif g.builtin == "=":
            total += 1
        else:
            total += HALF
        f |= outs
    return total


def _atom_vars(atom: HeadAtom) -> set:
    return {v.name for a in atom.args for v in term_vars(a)}


def _lookup_for(atom: HeadAtom, fbar: set) -> Lookup:
    pat = []
    for a in atom.args:
        if isinstance(a, Var):
            pat.append(a if a.name in fbar else None)
        else:
            pat.append(a)  # literal positions are always fixed
    return Lookup(atom.symbol, atom.arity, tuple(pat))


def _fds_for(atom: HeadAtom, fds) -> list:
    mine = [fd for fd in fds if fd.symbol == atom.symbol and fd.arity == atom.arity]
    return instantiate_fds(atom.args, mine)


def _join_step(fixed: set, pending_guards: list, atom: HeadAtom, fds, early: bool):
    """Cost and consequences of joining ``atom`` next.  Pure."""
    inst = _fds_for(atom, fds)
    fixed_p = fdclose(fixed, inst)
    xvars = _atom_vars(atom)
    fbar = xvars & fixed_p
    new_fixed = fixed | xvars
    if early:
        gs = schedule_guards(new_fixed, pending_guards)
    else:
        gs = []
    sel = selectivity(gs, new_fixed)
    u = max(Fraction(len(xvars - fbar)) - sel, Fraction(0))
    cost = CostPair(u, -Fraction(len(fbar)) - sel)
    return cost, fbar, gs


def _append_guards(goal, fixed, pending, gs):
    for g in gs:
        outs = guard_outs(g, fixed)
        goal.append(GuardGoal(g, outs))
        fixed |= outs
        pending.remove(g)


def measure(fixed: Iterable, partners: Sequence[HeadAtom], fds, guards: Sequence[GuardCall],
            early_guards: bool = True):
    """Evaluate one partner order; returns (score, goal, lookups, costs)."""
    fixed = set(fixed)
    pending = list(guards)
    goal: list = []
    lookups: list = []
    costs: list = []
    score = ZERO
    running = ZERO
    if early_guards:
        _append_guards(goal, fixed, pending, schedule_guards(fixed, pending))
    for atom in partners:
        cost, fbar, gs = _join_step(fixed, pending, atom, fds, early_guards)
        fixed |= _atom_vars(atom)
        lk = _lookup_for(atom, fbar)
        lookups.append(lk)
        goal.append(PartnerGoal(atom, lk))
        _append_guards(goal, fixed, pending, gs)
        running = running + cost
        score = score + running
        costs.append(cost)
    if pending:
        # remaining guards run once every head variable is bound
        _append_guards(goal, fixed, pending, schedule_guards(fixed, pending))
    return score, tuple(goal), tuple(lookups), costs


def best_join_order(
    rule: Rule,
    active: HeadAtom,
    fds=(),
    exhaustive_limit: int = 6,
    early_guards: bool = True,
) -> JoinPlan:
    """Pick the partner permutation with lexicographically least score.

    Exhaustive below ``exhaustive_limit`` partners, greedy above it; ties
    resolve toward textual order.  With ``early_guards`` off the textual
    order is kept and every guard runs after the last join.
    """
    partners = [h for h in rule.heads if h is not active]
    fixed = _atom_vars(active)

    if not early_guards:
        score, goal, lookups, _ = measure(fixed, partners, fds, rule.guard, False)
        return JoinPlan(active.occurrence_id, score, goal, lookups)

    if len(partners) <= exhaustive_limit:
        best = None
        for perm in itertools.permutations(range(len(partners))):
            order = [partners[i] for i in perm]
            score, goal, lookups, _ = measure(fixed, order, fds, rule.guard, True)
            if best is None or score < best[0]:
                best = (score, goal, lookups)
        score, goal, lookups = best
        return JoinPlan(active.occurrence_id, score, goal, lookups)

    # greedy: repeatedly take the partner with least incremental cost
    remaining = list(partners)
    order = []
    cur_fixed = set(fixed)
    pending = list(rule.guard)
    for g in schedule_guards(cur_fixed, pending):
        cur_fixed |= guard_outs(g, cur_fixed)
        pending.remove(g)
    while remaining:
        best_i, best_cost = 0, None
        for i, atom in enumerate(remaining):
            cost, _, _ = _join_step(cur_fixed, pending, atom, fds, True)
            if best_cost is None or cost < best_cost:
                best_i, best_cost = i, cost
        atom = remaining.pop(best_i)
        order.append(atom)
        cur_fixed |= _atom_vars(atom)
        for g in schedule_guards(cur_fixed, pending):
            cur_fixed |= guard_outs(g, cur_fixed)
            pending.remove(g)
    score, goal, lookups, _ = measure(fixed, order, fds, rule.guard, True)
    return JoinPlan(active.occurrence_id, score, goal, lookups)
