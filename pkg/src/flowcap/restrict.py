"""Policy-comparison kernel shared by the offline analyzer and both monitors.

``is_as_restr`` is a syntactic disjunct-cover check: every conjunct of the
stricter rule must be covered by some conjunct of the looser one after
unifying key atoms. Residual list and clock atoms are evaluated against a
metadata snapshot; satisfied list atoms become state conditions, under which
the verdict stays valid. The check is sound but not complete.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Union

from flowcap.policy import (
    FDONLY_RULE,
    TRUE,
    DeclassRule,
    FdOnly,
    KeyIs,
    ListHas,
    ListLacks,
    MetadataView,
    MissingMetadata,
    Policy,
    RegionIs,
    Rule,
    SessionContext,
    Taint,
    TimeAfter,
    conjunct_sort_key,
    is_variable,
)

# ---------------------------------------------------------------------------
# State conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class PolicyEquals:
    conduit_class: str
    class_id: str

    def holds(self, view: MetadataView) -> bool:
        p = view.policies.get(self.conduit_class)
        return p is not None and p.class_id == self.class_id

    def render(self) -> str:
        return f"polEq:{self.conduit_class}={self.class_id}"

    @property
    def depends_on(self) -> tuple:
        return ("class", self.conduit_class)


@dataclass(frozen=True, order=True)
class ListIncludes:
    list_id: str
    entry: str

    def holds(self, view: MetadataView) -> bool:
        try:
            return view.has(self.list_id, self.entry)
        except MissingMetadata:
            return False

    def render(self) -> str:
        return f"inc:{self.list_id}:{self.entry}"

    @property
    def depends_on(self) -> tuple:
        return ("list", self.list_id)


@dataclass(frozen=True, order=True)
class ListExcludes:
    list_id: str
    entry: str

    def holds(self, view: MetadataView) -> bool:
        try:
            return not view.has(self.list_id, self.entry)
        except MissingMetadata:
            return False

    def render(self) -> str:
        return f"exc:{self.list_id}:{self.entry}"

    @property
    def depends_on(self) -> tuple:
        return ("list", self.list_id)


StateCondition = Union[PolicyEquals, ListIncludes, ListExcludes]


def cond_sort_key(c: StateCondition) -> str:
    return c.render()


def parse_cond(text: str) -> StateCondition:
    kind, _, rest = text.partition(":")
    if kind == "polEq":
        cls, eq, h = rest.rpartition("=")
        if not eq or not cls or not h:
            raise ValueError(f"bad condition {text!r}")
        return PolicyEquals(cls, h)
    if kind in ("inc", "exc"):
        lst, sep, entry = rest.rpartition(":")
        if not sep or not lst or not entry:
            raise ValueError(f"bad condition {text!r}")
        return ListIncludes(lst, entry) if kind == "inc" else ListExcludes(lst, entry)
    raise ValueError(f"bad condition {text!r}")


def conds_hold(conds: Iterable[StateCondition], view: MetadataView) -> bool:
    return all(c.holds(view) for c in conds)


@dataclass(frozen=True)
class CheckResult:
    okay: bool
    conds: frozenset = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if not self.okay and self.conds:
            object.__setattr__(self, "conds", frozenset())

    def __bool__(self) -> bool:
        return self.okay

    def __and__(self, other: "CheckResult") -> "CheckResult":
        if self.okay and other.okay:
            return CheckResult(True, self.conds | other.conds)
        return DENY


DENY = CheckResult(False)
ALLOW = CheckResult(True)


@dataclass(frozen=True)
class ConduitFacts:
    """What the kernel needs to know about a write target."""

    conduit_class: str
    policy: Policy

    @property
    def read(self) -> Rule:
        return self.policy.read

    @property
    def update(self) -> Rule:
        return self.policy.update


# ---------------------------------------------------------------------------
# Disjunct cover
# ---------------------------------------------------------------------------


def _bind(atom, value: str):
    if isinstance(atom, KeyIs) and is_variable(atom.term):
        return KeyIs(value)
    if isinstance(atom, ListHas) and is_variable(atom.term):
        return ListHas(atom.list_id, value)
    if isinstance(atom, ListLacks) and is_variable(atom.term):
        return ListLacks(atom.list_id, value)
    return atom


def _cover(d1: frozenset, d2: frozenset, view: MetadataView) -> frozenset | None:
    """Conditions under which conjunct ``d1`` implies ``d2``, or None."""
    if any(isinstance(a, KeyIs) and is_variable(a.term) for a in d2):
        keys = sorted(a.term for a in d1 if isinstance(a, KeyIs))
        if not keys:
            return None
        d2 = frozenset(_bind(a, keys[0]) for a in d2)
    conds = set()
    for a in d2:
        if a in d1:
            continue
        if isinstance(a, (KeyIs, RegionIs, FdOnly)):
            return None
        if isinstance(a, TimeAfter):
            if any(isinstance(b, TimeAfter) and b.t >= a.t for b in d1):
                continue
            if view.clock > a.t:
                continue
            return None
        if isinstance(a, (ListHas, ListLacks)):
            if is_variable(a.term):
                return None
            try:
                member = view.has(a.list_id, a.term)
            except MissingMetadata:
                return None
            if isinstance(a, ListHas) and member:
                conds.add(ListIncludes(a.list_id, a.term))
            elif isinstance(a, ListLacks) and not member:
                conds.add(ListExcludes(a.list_id, a.term))
            else:
                return None
            continue
        return None
    return frozenset(conds)


def _best(options: list) -> frozenset | None:
    if not options:
        return None
    return min(options, key=lambda c: (len(c), sorted(map(cond_sort_key, c))))


def _rule_restr(r1: Rule, r2: Rule, view: MetadataView) -> CheckResult:
    if r2.is_true:
        return ALLOW
    conds: set = set()
    d2s = r2.ordered()
    for d1 in r1.ordered():
        chosen = _best([c for d2 in d2s if (c := _cover(d1, d2, view)) is not None])
        if chosen is None:
            return DENY
        conds |= chosen
    return CheckResult(True, frozenset(conds))


def is_as_restr(r1: Rule | Taint | Policy, r2: Rule, view: MetadataView) -> CheckResult:
    """Is ``r1`` at least as restrictive as ``r2`` (r1 implies r2)?

    A taint argument is checked per component; every component must pass.
    """
    if isinstance(r1, Taint):
        out = ALLOW
        for comp in r1.components:
            out = out & _rule_restr(comp.read, r2, view)
            if not out:
                return DENY
        return out
    if isinstance(r1, Policy):
        r1 = r1.read
    return _rule_restr(r1, r2, view)


# ---------------------------------------------------------------------------
# Declassification-aware comparisons
# ---------------------------------------------------------------------------


def _trigger_implies(t_strong: frozenset, t_weak: frozenset) -> bool:
    for a in t_weak:
        if a in t_strong:
            continue
        if isinstance(a, TimeAfter) and any(
            isinstance(b, TimeAfter) and b.t >= a.t for b in t_strong
        ):
            continue
        return False
    return True


def policy_dominates(
    strict_read: Rule,
    strict_escapes: tuple,
    loose_read: Rule,
    loose_escapes: tuple,
    view: MetadataView,
) -> CheckResult:
    """Data released under the strict side is never released further than the
    loose side would allow: its requirement implies the loose requirement and
    each of its escapes is matched by the loose side."""
    out = _rule_restr(strict_read, loose_read, view)
    if not out:
        return DENY
    for e in strict_escapes:
        res = _rule_restr(e.result, loose_read, view)
        if not res:
            res = DENY
            for le in loose_escapes:
                if _trigger_implies(e.trigger, le.trigger):
                    res = _rule_restr(e.result, le.result, view)
                    if res:
                        break
        if not res:
            return DENY
        out = out & res
    return out


def trigger_holds(trigger: frozenset, target: ConduitFacts, view: MetadataView) -> CheckResult:
    conds: set = set()
    for a in sorted(trigger, key=lambda a: a.key()):
        if isinstance(a, FdOnly):
            r = _rule_restr(target.update, FDONLY_RULE, view)
            if not r:
                return DENY
            conds |= r.conds
        elif isinstance(a, TimeAfter):
            if not view.clock > a.t:
                return DENY
        elif isinstance(a, (ListHas, ListLacks)):
            try:
                member = view.has(a.list_id, a.term)
            except MissingMetadata:
                return DENY
            if isinstance(a, ListHas) and member:
                conds.add(ListIncludes(a.list_id, a.term))
            elif isinstance(a, ListLacks) and not member:
                conds.add(ListExcludes(a.list_id, a.term))
            else:
                return DENY
        else:
            # session atoms are not evaluable against a conduit
            return DENY
    return CheckResult(True, frozenset(conds))


def apply_declass(
    component: Policy, target: ConduitFacts, view: MetadataView
) -> list[tuple[Rule, frozenset]]:
    """Requirements the component imposes on ``target``.

    One entry per escape whose trigger holds (with the conditions that made
    it hold); when none fires, the single unrelaxed read requirement.
    """
    out = []
    for e in component.escapes:
        t = trigger_holds(e.trigger, target, view)
        if t:
            out.append((e.result, t.conds))
    if not out:
        out.append((component.read, frozenset()))
    return out


def is_as_restr_with_declass(
    target: ConduitFacts, taint: Taint, view: MetadataView
) -> CheckResult:
    """May data carrying ``taint`` be written into ``target``?"""
    out = CheckResult(True, frozenset({PolicyEquals(target.conduit_class, target.policy.class_id)}))
    for comp in taint.components:
        best = None
        for req, tconds in apply_declass(comp, target, view):
            r = policy_dominates(target.read, target.policy.escapes, req, comp.escapes, view)
            if r:
                cand = r.conds | tconds
                if best is None or (len(cand), sorted(map(cond_sort_key, cand))) < (
                    len(best),
                    sorted(map(cond_sort_key, best)),
                ):
                    best = cand
        if best is None:
            return DENY
        out = out & CheckResult(True, best)
    return out


def policy_eval(update: Rule, writer: SessionContext, view: MetadataView) -> CheckResult:
    """Evaluate an update rule for a writer; list atoms become conditions.

    Missing metadata fails closed.
    """
    options = []
    for d in update.ordered():
        conds: set = set()
        ok = True
        for a in d:
            if isinstance(a, KeyIs):
                term = writer.principal if is_variable(a.term) else a.term
                ok = writer.principal is not None and term == writer.principal
            elif isinstance(a, RegionIs):
                ok = writer.region == a.region
            elif isinstance(a, TimeAfter):
                ok = view.clock > a.t
            elif isinstance(a, FdOnly):
                ok = True
            elif isinstance(a, (ListHas, ListLacks)):
                term = writer.principal if is_variable(a.term) else a.term
                if term is None:
                    ok = False
                else:
                    try:
                        member = view.has(a.list_id, term)
                    except MissingMetadata:
                        ok = False
                    else:
                        if isinstance(a, ListHas):
                            ok = member
                            conds.add(ListIncludes(a.list_id, term))
                        else:
                            ok = not member
                            conds.add(ListExcludes(a.list_id, term))
            if not ok:
                break
        if ok:
            options.append(frozenset(conds))
    best = _best(options)
    return DENY if best is None else CheckResult(True, best)


# ---------------------------------------------------------------------------
# Access checks as the analyzer and monitors perform them
# ---------------------------------------------------------------------------

# The taint of a task that has read nothing: anyone may read its output.
PUBLIC = Policy(TRUE, TRUE, DeclassRule(), name="public")


def check_read(taint: Taint, conduit_class: str, policy: Policy, view: MetadataView) -> CheckResult:
    """May a task with ``taint`` read a conduit governed by ``policy``?"""
    comps = taint.components or (PUBLIC,)
    out = CheckResult(True, frozenset({PolicyEquals(conduit_class, policy.class_id)}))
    for c in comps:
        out = out & policy_dominates(c.read, c.escapes, policy.read, policy.escapes, view)
        if not out:
            return DENY
    return out


def check_write(
    taint: Taint,
    conduit_class: str,
    policy: Policy,
    writer: SessionContext,
    view: MetadataView,
) -> CheckResult:
    target = ConduitFacts(conduit_class, policy)
    return is_as_restr_with_declass(target, taint, view) & policy_eval(policy.update, writer, view)


def taint_dominates(new: Taint, old: Taint, view: MetadataView) -> CheckResult:
    """Is ``new`` at least as restrictive as ``old``, component-wise?"""
    out = ALLOW
    new_comps = new.components or (PUBLIC,)
    for oc in old.components:
        best = None
        for nc in new_comps:
            r = policy_dominates(nc.read, nc.escapes, oc.read, oc.escapes, view)
            if r:
                best = r
                break
        if best is None:
            return DENY
        out = out & best
    return out


__all__ = [
    "ALLOW",
    "DENY",
    "CheckResult",
    "ConduitFacts",
    "ListExcludes",
    "ListIncludes",
    "PolicyEquals",
    "StateCondition",
    "apply_declass",
    "check_read",
    "check_write",
    "conds_hold",
    "cond_sort_key",
    "conjunct_sort_key",
    "is_as_restr",
    "is_as_restr_with_declass",
    "parse_cond",
    "policy_dominates",
    "policy_eval",
    "taint_dominates",
    "trigger_holds",
]
