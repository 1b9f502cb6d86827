"""Policy algebra: atoms, DNF rules, three-rule policies, taints and metadata.

A rule is a set of conjuncts (disjunctive normal form). The empty rule is
FALSE; a rule holding the empty conjunct is TRUE. Every conjunct may mention
at most one variable, and that variable always stands for the principal of
the session being evaluated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

VARIABLE = "X"


class PolicyError(ValueError):
    """A policy value violates a structural invariant."""


class MissingMetadata(LookupError):
    """A rule referred to a metadata list that the view does not hold."""

    def __init__(self, list_id: str) -> None:
        super().__init__(f"metadata list {list_id!r} is missing")
        self.list_id = list_id


def is_variable(term: str) -> bool:
    return bool(term) and term[0].isupper()


# ---------------------------------------------------------------------------
# Atoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeyIs:
    term: str

    rank = 0

    def key(self) -> tuple:
        return (self.rank, self.term)

    def __str__(self) -> str:
        return f"key({self.term})"


@dataclass(frozen=True)
class RegionIs:
    region: str

    rank = 1

    def key(self) -> tuple:
        return (self.rank, self.region)

    def __str__(self) -> str:
        return f"region({self.region})"


@dataclass(frozen=True)
class ListHas:
    list_id: str
    term: str

    rank = 2

    def key(self) -> tuple:
        return (self.rank, self.list_id, self.term)

    def __str__(self) -> str:
        return f"in({self.list_id}, {self.term})"


@dataclass(frozen=True)
class ListLacks:
    list_id: str
    term: str

    rank = 3

    def key(self) -> tuple:
        return (self.rank, self.list_id, self.term)

    def __str__(self) -> str:
        return f"notin({self.list_id}, {self.term})"


@dataclass(frozen=True)
class TimeAfter:
    """Holds once the clock is strictly past ``t``."""

    t: int

    rank = 4

    def key(self) -> tuple:
        return (self.rank, f"{self.t:020d}")

    def __str__(self) -> str:
        return f"after({self.t})"


@dataclass(frozen=True)
class FdOnly:
    """Shape atom: the conduit carries descriptors only, never data bytes.

    On the session side it always holds, since the sandbox (not the session)
    is what forbids data on such conduits.
    """

    rank = 5

    def key(self) -> tuple:
        return (self.rank,)

    def __str__(self) -> str:
        return "fdonly"


Atom = KeyIs | RegionIs | ListHas | ListLacks | TimeAfter | FdOnly
Conjunct = frozenset  # frozenset[Atom]


def atom_terms(atom: Atom) -> tuple[str, ...]:
    if isinstance(atom, KeyIs):
        return (atom.term,)
    if isinstance(atom, (ListHas, ListLacks)):
        return (atom.term,)
    return ()


def conjunct_variables(conj: Iterable[Atom]) -> set[str]:
    return {t for a in conj for t in atom_terms(a) if is_variable(t)}


def _substitute(atom: Atom, var: str, value: str) -> Atom:
    if isinstance(atom, KeyIs) and atom.term == var:
        return KeyIs(value)
    if isinstance(atom, ListHas) and atom.term == var:
        return ListHas(atom.list_id, value)
    if isinstance(atom, ListLacks) and atom.term == var:
        return ListLacks(atom.list_id, value)
    return atom


def check_conjunct(conj: Iterable[Atom]) -> None:
    """Enforce the binding discipline: one variable, bound by a key atom."""
    conj = list(conj)
    variables = conjunct_variables(conj)
    if len(variables) > 1:
        raise PolicyError(f"more than one variable in conjunct: {sorted(variables)}")
    for var in variables:
        if KeyIs(var) not in conj:
            raise PolicyError(f"unbound variable {var}: no key({var}) in the same conjunct")


def normalize_conjunct(conj: Iterable[Atom]) -> frozenset | None:
    """Canonical form of one conjunct, or None if it is unsatisfiable."""
    atoms = set(conj)
    check_conjunct(atoms)
    variables = conjunct_variables(atoms)
    var = next(iter(variables), None)
    keys = {a.term for a in atoms if isinstance(a, KeyIs) and not is_variable(a.term)}
    if len(keys) > 1:
        return None
    if var is not None and keys:
        # key(X) & key(alice) pins X to alice
        value = next(iter(keys))
        atoms = {_substitute(a, var, value) for a in atoms}
        var = None
    if var is not None and var != VARIABLE:
        atoms = {_substitute(a, var, VARIABLE) for a in atoms}
    regions = {a.region for a in atoms if isinstance(a, RegionIs)}
    if len(regions) > 1:
        return None
    has = {(a.list_id, a.term) for a in atoms if isinstance(a, ListHas)}
    lacks = {(a.list_id, a.term) for a in atoms if isinstance(a, ListLacks)}
    if has & lacks:
        return None
    afters = [a for a in atoms if isinstance(a, TimeAfter)]
    if len(afters) > 1:
        latest = max(afters, key=lambda a: a.t)
        atoms = {a for a in atoms if not isinstance(a, TimeAfter)} | {latest}
    return frozenset(atoms)


def conjunct_sort_key(conj: frozenset) -> tuple:
    return (len(conj), tuple(sorted(a.key() for a in conj)))


@dataclass(frozen=True)
class Rule:
    """A DNF rule. Construct through :meth:`of` to get the normal form."""

    disjuncts: frozenset = frozenset()

    @classmethod
    def of(cls, disjuncts: Iterable[Iterable[Atom]]) -> "Rule":
        normed = set()
        for d in disjuncts:
            n = normalize_conjunct(d)
            if n is not None:
                normed.add(n)
        # absorption: a conjunct implied by a smaller one is redundant
        kept = [d for d in normed if not any(o < d for o in normed)]
        return cls(frozenset(kept))

    def ordered(self) -> list[frozenset]:
        return sorted(self.disjuncts, key=conjunct_sort_key)

    def __iter__(self) -> Iterator[frozenset]:
        return iter(self.ordered())

    @property
    def is_false(self) -> bool:
        return not self.disjuncts

    @property
    def is_true(self) -> bool:
        return frozenset() in self.disjuncts

    def atoms(self) -> set:
        return {a for d in self.disjuncts for a in d}

    def is_ground(self) -> bool:
        return not any(conjunct_variables(d) for d in self.disjuncts)

    def __or__(self, other: "Rule") -> "Rule":
        return Rule.of(list(self.disjuncts) + list(other.disjuncts))

    def __and__(self, other: "Rule") -> "Rule":
        return Rule.of(a | b for a in self.disjuncts for b in other.disjuncts)

    def __str__(self) -> str:
        from flowcap.lang import format_rule

        return format_rule(self)


TRUE = Rule(frozenset({frozenset()}))
FALSE = Rule(frozenset())
FDONLY_RULE = Rule(frozenset({frozenset({FdOnly()})}))


def conj(*atoms: Atom) -> Rule:
    return Rule.of([atoms])


# ---------------------------------------------------------------------------
# Policies and taints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Escape:
    """``until trigger => result``: relax the requirement when trigger holds."""

    trigger: frozenset
    result: Rule

    def sort_key(self) -> tuple:
        return (conjunct_sort_key(self.trigger), str(self.result))


@dataclass(frozen=True)
class DeclassRule:
    escapes: tuple = ()

    @classmethod
    def of(cls, escapes: Iterable[Escape]) -> "DeclassRule":
        for e in escapes:
            if conjunct_variables(e.trigger):
                raise PolicyError("declassification triggers must be ground")
        uniq = {(e.trigger, e.result): e for e in escapes}
        return cls(tuple(sorted(uniq.values(), key=Escape.sort_key)))


@dataclass(frozen=True)
class Policy:
    read: Rule
    update: Rule
    declassify: DeclassRule = DeclassRule()
    name: str = field(default="", compare=False)

    @property
    def escapes(self) -> tuple:
        return self.declassify.escapes

    def canonical(self) -> str:
        from flowcap.lang import serialize_policy

        return serialize_policy(self)

    @property
    def class_id(self) -> str:
        cached = self.__dict__.get("_class_id")
        if cached is None:
            cached = hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:32]
            object.__setattr__(self, "_class_id", cached)
        return cached

    def mentions_region(self) -> bool:
        rules = [self.read] + [e.result for e in self.escapes]
        return any(isinstance(a, RegionIs) for r in rules for a in r.atoms())

    def rebind_region(self, old: str, new: str) -> "Policy":
        def swap(rule: Rule) -> Rule:
            return Rule.of(
                {RegionIs(new) if a == RegionIs(old) else a for a in d} for d in rule.disjuncts
            )

        escapes = [Escape(e.trigger, swap(e.result)) for e in self.escapes]
        return Policy(swap(self.read), self.update, DeclassRule.of(escapes), name=self.name)


@dataclass(frozen=True)
class Taint:
    """Conjunction of component policies, deduplicated by class id."""

    components: tuple = ()

    @classmethod
    def of(cls, policies: Iterable[Policy]) -> "Taint":
        uniq = {p.class_id: p for p in policies}
        return cls(tuple(uniq[k] for k in sorted(uniq)))

    def join(self, *policies: Policy) -> "Taint":
        return Taint.of(list(self.components) + list(policies))

    def class_ids(self) -> frozenset:
        return frozenset(p.class_id for p in self.components)

    def __len__(self) -> int:
        return len(self.components)


EMPTY_TAINT = Taint()


# ---------------------------------------------------------------------------
# Sessions and metadata
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionContext:
    principal: str | None
    region: str | None = None
    clock: int = 0

    def __post_init__(self) -> None:
        if self.clock < 0:
            raise PolicyError("clock must be non-negative")
        if self.principal == "":
            raise PolicyError("principal must be non-empty")


@dataclass(frozen=True)
class MetaList:
    list_id: str
    entries: frozenset = frozenset()
    last_updated: int = 0


@dataclass(frozen=True)
class MetadataView:
    """Immutable snapshot of policies by conduit class, metadata lists and clock."""

    policies: Mapping[str, Policy] = field(default_factory=dict)
    lists: Mapping[str, MetaList] = field(default_factory=dict)
    clock: int = 0

    def has(self, list_id: str, entry: str) -> bool:
        try:
            return entry in self.lists[list_id].entries
        except KeyError:
            raise MissingMetadata(list_id) from None

    def with_list(self, ml: MetaList) -> "MetadataView":
        lists = dict(self.lists)
        lists[ml.list_id] = ml
        return MetadataView(self.policies, lists, self.clock)

    def with_policy(self, class_id: str, policy: Policy) -> "MetadataView":
        policies = dict(self.policies)
        policies[class_id] = policy
        return MetadataView(policies, self.lists, self.clock)

    def with_clock(self, clock: int) -> "MetadataView":
        return MetadataView(self.policies, self.lists, clock)


# ---------------------------------------------------------------------------
# Rule semantics
# ---------------------------------------------------------------------------


def eval_atom(atom: Atom, s: SessionContext, state: MetadataView) -> bool:
    def val(term: str) -> str | None:
        return s.principal if is_variable(term) else term

    if isinstance(atom, KeyIs):
        return s.principal is not None and val(atom.term) == s.principal
    if isinstance(atom, RegionIs):
        return s.region == atom.region
    if isinstance(atom, ListHas):
        v = val(atom.term)
        return v is not None and state.has(atom.list_id, v)
    if isinstance(atom, ListLacks):
        v = val(atom.term)
        return v is not None and not state.has(atom.list_id, v)
    if isinstance(atom, TimeAfter):
        return state.clock > atom.t
    if isinstance(atom, FdOnly):
        return True
    raise TypeError(f"not an atom: {atom!r}")


def eval_rule(
    rule: Rule, s: SessionContext, state: MetadataView, *, fail_closed: bool = False
) -> bool:
    """True iff some disjunct holds; variables bind to ``s.principal``.

    A missing metadata list raises :class:`MissingMetadata` unless
    ``fail_closed`` is set, in which case the offending atom is false.
    """
    for d in rule.ordered():
        ok = True
        for atom in sorted(d, key=lambda a: a.key()):
            try:
                holds = eval_atom(atom, s, state)
            except MissingMetadata:
                if not fail_closed:
                    raise
                holds = False
            if not holds:
                ok = False
                break
        if ok:
            return True
    return False
