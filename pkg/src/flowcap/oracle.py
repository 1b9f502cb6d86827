"""Brute-force semantics for testing the syntactic kernel.

Models are (principal, region, clock, list contents). List contents are
enumerated only over the facts that the rules under test can observe; each
such fact is one bit of a numpy index so a whole family of list states is
evaluated at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from flowcap.policy import (
    FdOnly,
    KeyIs,
    ListHas,
    ListLacks,
    MetadataView,
    Policy,
    RegionIs,
    Rule,
    Taint,
    TimeAfter,
)
from flowcap.restrict import ConduitFacts, ListExcludes, ListIncludes

MAX_MODELS = 10**6


class UniverseTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class FiniteUniverse:
    principals: tuple
    regions: tuple
    clocks: tuple = (0,)
    entities: tuple = ()  # non-principal list entries (e.g. conduit classes)

    def list_domain(self) -> tuple:
        return tuple(self.principals) + tuple(self.entities)


def _is_var(term: str) -> bool:
    return term[:1].isupper()


def _facts_of(rules: Iterable[Rule], universe: FiniteUniverse) -> list:
    facts = set()
    for r in rules:
        for d in r.disjuncts:
            for a in d:
                if isinstance(a, (ListHas, ListLacks)):
                    if _is_var(a.term):
                        facts.update((a.list_id, p) for p in universe.principals)
                    else:
                        facts.add((a.list_id, a.term))
    return sorted(facts)


def _clock_grid(rules: Iterable[Rule], universe: FiniteUniverse, min_clock: int) -> list:
    points = {c for c in universe.clocks if c >= min_clock} | {min_clock}
    for r in rules:
        for d in r.disjuncts:
            for a in d:
                if isinstance(a, TimeAfter):
                    for c in (a.t, a.t + 1):
                        if c >= min_clock:
                            points.add(c)
    return sorted(points)


class _Evaluator:
    def __init__(self, free: list, fixed: Mapping) -> None:
        self.index = {f: i for i, f in enumerate(free)}
        self.fixed = dict(fixed)
        n = 1 << len(free)
        self.n = n
        bits = np.arange(n, dtype=np.int64)
        self.cols = {f: ((bits >> i) & 1).astype(bool) for f, i in self.index.items()}

    def fact(self, key):
        if key in self.cols:
            return self.cols[key]
        if key in self.fixed:
            return bool(self.fixed[key])
        raise KeyError(key)

    def atom(self, a, principal, region, clock):
        if isinstance(a, KeyIs):
            return True if _is_var(a.term) else a.term == principal
        if isinstance(a, RegionIs):
            return a.region == region
        if isinstance(a, TimeAfter):
            return clock > a.t
        if isinstance(a, FdOnly):
            return True
        if isinstance(a, (ListHas, ListLacks)):
            who = principal if _is_var(a.term) else a.term
            v = self.fact((a.list_id, who))
            return v if isinstance(a, ListHas) else np.logical_not(v)
        raise TypeError(a)

    def rule(self, r: Rule, principal, region, clock):
        acc = np.zeros(self.n, dtype=bool)
        for d in r.disjuncts:
            term = np.ones(self.n, dtype=bool)
            for a in d:
                term = np.logical_and(term, self.atom(a, principal, region, clock))
            acc = np.logical_or(acc, term)
        return acc


def _fixed_from_conds(conds: Iterable) -> dict:
    fixed = {}
    for c in conds:
        if isinstance(c, ListIncludes):
            fixed[(c.list_id, c.entry)] = True
        elif isinstance(c, ListExcludes):
            fixed[(c.list_id, c.entry)] = False
    return fixed


def semantic_implies(
    r1: Rule,
    r2: Rule,
    universe: FiniteUniverse,
    *,
    given: Iterable = (),
    facts: Mapping | None = None,
    min_clock: int = 0,
    clock: int | None = None,
) -> bool:
    """True iff every model satisfying ``r1`` satisfies ``r2``.

    ``given`` imposes state conditions (list memberships); ``facts`` fixes
    list memberships outright; ``clock`` pins the clock, otherwise every grid
    point at or after ``min_clock`` is a model.
    """
    fixed = dict(facts or {})
    fixed.update(_fixed_from_conds(given))
    relevant = _facts_of((r1, r2), universe)
    free = [f for f in relevant if f not in fixed]
    clocks = [clock] if clock is not None else _clock_grid((r1, r2), universe, min_clock)
    models = len(universe.principals) * max(1, len(universe.regions)) * len(clocks) * (1 << len(free))
    if models > MAX_MODELS:
        raise UniverseTooLarge(f"{models} models exceeds {MAX_MODELS}")
    ev = _Evaluator(free, fixed)
    regions = universe.regions or (None,)
    for p in universe.principals:
        for reg in regions:
            for c in clocks:
                lhs = ev.rule(r1, p, reg, c)
                if not lhs.any():
                    continue
                rhs = ev.rule(r2, p, reg, c)
                if np.any(lhs & ~rhs):
                    return False
    return True


def truth_value(rule: Rule, principal, region, clock: int, lists: Mapping) -> bool:
    """Single-model truth table evaluation; ``lists`` maps list id to entries."""
    facts = {(lid, e): True for lid, entries in lists.items() for e in entries}
    for f in _facts_of((rule,), FiniteUniverse((principal,), (region,))):
        if f[0] not in lists:
            raise KeyError(f[0])
        facts.setdefault(f, False)
    ev = _Evaluator([], facts)
    return bool(ev.rule(rule, principal, region, clock)[0])


def view_facts(view: MetadataView, universe: FiniteUniverse) -> dict:
    return {
        (lid, e): e in ml.entries
        for lid, ml in view.lists.items()
        for e in universe.list_domain()
    }


def _fd_only_shape(update: Rule) -> bool:
    return all(any(isinstance(a, FdOnly) for a in d) for d in update.disjuncts)


def _trigger_fires(trigger: frozenset, target: ConduitFacts, view: MetadataView) -> bool:
    for a in trigger:
        if isinstance(a, FdOnly):
            if not _fd_only_shape(target.update):
                return False
        elif isinstance(a, TimeAfter):
            if not view.clock > a.t:
                return False
        elif isinstance(a, ListHas):
            if a.term not in view.lists[a.list_id].entries:
                return False
        elif isinstance(a, ListLacks):
            if a.term in view.lists[a.list_id].entries:
                return False
        else:
            return False
    return True


def semantic_write_ok(
    taint: Taint, target: ConduitFacts, view: MetadataView, universe: FiniteUniverse
) -> bool:
    """Exhaustive write permission at a fixed state.

    For each taint component, every escape is tried independently; the write
    is allowed iff each component has some resulting requirement that the
    target's read rule implies in every session of the universe.
    """
    facts = view_facts(view, universe)
    for comp in taint.components:
        fired = [e.result for e in comp.escapes if _trigger_fires(e.trigger, target, view)]
        reqs = fired or [comp.read]
        if not any(
            semantic_implies(target.read, req, universe, facts=facts, clock=view.clock)
            for req in reqs
        ):
            return False
    return True


def semantic_read_ok(policy: Policy, session_principal, region, view: MetadataView) -> bool:
    lists = {lid: ml.entries for lid, ml in view.lists.items()}
    return truth_value(policy.read, session_principal, region, view.clock, lists)
