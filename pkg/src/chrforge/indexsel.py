"""Lookup reduction and index structure selection.

Raw lookups from join planning are reduced before an index is chosen:

* generalization drops repeated query variables in favor of an equality
  check after retrieval, so one index serves both shapes;
* functional-dependency reduction un-fixes positions determined by other
  fixed positions;
* symmetry reduction folds a mirrored lookup onto its twin, querying with
  the arguments swapped and resolving the mirror instance at match time.

One structure per constraint: a yesno slot when at most one instance can
ever be live, a sorted tree over a determining key when set semantics
holds and every remaining lookup is a key prefix, otherwise an unsorted
list.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .analysis import ConstraintInfo, fdclose
from .joinorder import Lookup
from .terms import Var

YESNO = "yesno"
TREE = "tree"
LIST = "list"


@dataclass(frozen=True)
class ReducedLookup:
    symbol: str
    arity: int
    fixed: frozenset  # positions the index query constrains
    # Mirror permutation (1-based, original position -> query position)
    # applied to the query and undone on candidates; None is identity.
    swap: Optional[tuple] = None
    residual_pairs: tuple = ()  # position pairs equated after retrieval

    def render(self) -> str:
        cells = []
        for i in range(1, self.arity + 1):
            cells.append(str(i) if i in self.fixed else "_")
        s = f"{self.symbol}({','.join(cells)})" if self.arity else self.symbol
        if self.swap:
            moved = sorted(i + 1 for i, tgt in enumerate(self.swap) if tgt != i + 1)
            s += f" swap({','.join(map(str, moved))})"
        return s


@dataclass
class IndexSpec:
    symbol: str
    arity: int
    structure: str  # yesno | tree | list
    key: tuple = ()  # tree key positions, ascending
    shapes: frozenset = frozenset()  # supported fixed-position sets

    def render(self) -> str:
        if self.structure == TREE:
            return f"index {self.symbol}/{self.arity} = tree key=({','.join(map(str, self.key))})"
        return f"index {self.symbol}/{self.arity} = {self.structure}"


# ---------------------------------------------------------------------------


def _positional_fds(info: ConstraintInfo):
    return [(fd.source, fd.target) for fd in info.positional_fds()]


def _generalize(lookup: Lookup):
    """Free repeated fixed variables; record the equality residuals."""
    seen: dict = {}
    fixed = set()
    residual = []
    for i, t in enumerate(lookup.pattern, start=1):
        if t is None:
            continue
        if isinstance(t, Var):
            if t.name in seen:
                residual.append((seen[t.name], i))
                continue
            seen[t.name] = i
        fixed.add(i)
    return frozenset(fixed), tuple(residual)


def _fd_reduce(fixed: frozenset, fds) -> frozenset:
    """Un-fix determined positions, freeing the highest position first."""
    fixed = set(fixed)
    while True:
        removable = [t for s, t in fds if t in fixed and s <= fixed - {t}]
        if not removable:
            return frozenset(fixed)
        fixed.discard(max(removable))


def _apply_swap(fixed: frozenset, i: int, j: int) -> frozenset:
    out = set(fixed)
    if (i in out) != (j in out):
        out.symmetric_difference_update((i, j))
    return frozenset(out)


def reduce_lookups(lookups: Iterable[Lookup], info: ConstraintInfo, use_symmetry: bool = True):
    """Reduce a constraint's lookups; returns (mapping, shapes).

    ``mapping`` takes each raw Lookup to its ReducedLookup; ``shapes`` is
    the set of fixed-position sets the chosen index must support.
    """
    fds = _positional_fds(info)
    mapping: dict = {}
    base: dict = {}
    for lk in lookups:
        if lk in base:
            continue
        fixed, residual = _generalize(lk)
        fixed = _fd_reduce(fixed, fds)
        base[lk] = (fixed, residual)

    shapes = {fixed for fixed, _ in base.values()}
    swaps: dict = {}
    if use_symmetry:
        for sym in info.symmetries:
            i, j = sorted(sym.positions)
            changed = True
            while changed:
                changed = False
                for shape in sorted(shapes, key=sorted):
                    mirrored = _apply_swap(shape, i, j)
                    if mirrored == shape or mirrored not in shapes:
                        continue
                    keep, drop = sorted((shape, mirrored), key=sorted)
                    if drop in shapes:
                        shapes.discard(drop)
                        swaps[drop] = (keep, (i, j))
                        changed = True
                        break

    for lk, (fixed, residual) in base.items():
        perm = None
        while fixed in swaps:
            fixed, (i, j) = swaps[fixed]
            if perm is None:
                perm = list(range(1, lk.arity + 1))
            for p in range(lk.arity):
                if perm[p] == i:
                    perm[p] = j
                elif perm[p] == j:
                    perm[p] = i
        mapping[lk] = ReducedLookup(
            lk.symbol, lk.arity, fixed, tuple(perm) if perm else None, residual
        )
    return mapping, frozenset(shapes)


def is_singleton_lookup(lookup, fds, has_set_semantics: bool) -> bool:
    """At most one live candidate: the fixed positions determine the whole
    tuple and duplicates cannot coexist."""
    if not has_set_semantics:
        return False
    if isinstance(lookup, ReducedLookup):
        fixed, arity = lookup.fixed, lookup.arity
    else:
        fixed, arity = lookup.fixed_positions, lookup.arity
    pairs = [(fd.source, fd.target) for fd in fds if fd.target is not None]
    return fdclose(fixed, pairs) >= frozenset(range(1, arity + 1))


def choose_index(symbol: str, arity: int, shapes: Iterable[frozenset], info: ConstraintInfo) -> IndexSpec:
    """One index per constraint.

    With set semantics, the smallest position set whose closure determines
    the full tuple becomes the key: empty key means a yesno slot, else a
    tree, provided every lookup shape is a key prefix.  Everything else
    (and every rejection) falls back to the unsorted list.
    """
    shapes = frozenset(shapes)
    if info.has_set_semantics:
        fds = _positional_fds(info)
        allpos = frozenset(range(1, arity + 1))
        key_src = None
        for size in range(0, arity + 1):
            for combo in itertools.combinations(range(1, arity + 1), size):
                if fdclose(combo, fds) >= allpos:
                    key_src = combo
                    break
            if key_src is not None:
                break
        if key_src is not None:
            if len(key_src) == 0:
                return IndexSpec(symbol, arity, YESNO, (), shapes)
            key = tuple(sorted(key_src))
            ok = all(shape == frozenset(key[: len(shape)]) for shape in shapes)
            if ok:
                return IndexSpec(symbol, arity, TREE, key, shapes)
    return IndexSpec(symbol, arity, LIST, (), shapes)
