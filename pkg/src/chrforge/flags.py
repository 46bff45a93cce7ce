"""Optimization toggles and run configuration."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace


@dataclass(frozen=True)
class OptFlags:
    join_order: bool = True
    index_auto: bool = True
    late_storage: bool = True
    continuation: bool = True
    set_dedup: bool = True
    symmetry: bool = True

    @staticmethod
    def all_off() -> "OptFlags":
        return OptFlags(False, False, False, False, False, False)

    @staticmethod
    def all_combinations():
        names = ("join_order", "index_auto", "late_storage", "continuation",
                 "set_dedup", "symmetry")
        for bits in itertools.product((True, False), repeat=len(names)):
            yield OptFlags(**dict(zip(names, bits)))

    def describe(self) -> str:
        offs = [
            name for name in
            ("join_order", "index_auto", "late_storage", "continuation",
             "set_dedup", "symmetry")
            if not getattr(self, name)
        ]
        return "all-on" if not offs else "no-" + ",no-".join(offs)


@dataclass
class RunConfig:
    program_path: str = ""
    goal: str = ""
    flags: OptFlags = field(default_factory=OptFlags)
    depth_limit: int = 1_000_000
    near_tolerance: int = 25
    bench_repetitions: int = 3
