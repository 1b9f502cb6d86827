"""Random generators for rules, policies and metadata views used by the tests."""

from __future__ import annotations

import random

from hypothesis import strategies as st

from flowcap.oracle import FiniteUniverse
from flowcap.policy import (
    DeclassRule,
    Escape,
    FdOnly,
    KeyIs,
    ListHas,
    ListLacks,
    MetadataView,
    MetaList,
    Policy,
    RegionIs,
    Rule,
    TimeAfter,
)

PRINCIPALS = ("alice", "bob", "carol", "dave")
REGIONS = ("r1", "r2")
LISTS = ("L1", "L2", "L3")
ENTITIES = ("c1", "c2")
TIMES = (10, 20)

UNIVERSE = FiniteUniverse(PRINCIPALS, REGIONS, clocks=(0, 15, 30), entities=ENTITIES)


def random_atom(rng: random.Random, *, ground: bool, var_ok: bool):
    kind = rng.choices(
        ["key", "region", "in", "notin", "after"], weights=[4, 2, 3, 2, 1]
    )[0]
    if kind == "key":
        return KeyIs("X" if var_ok and not ground and rng.random() < 0.5 else rng.choice(PRINCIPALS))
    if kind == "region":
        return RegionIs(rng.choice(REGIONS))
    if kind == "after":
        return TimeAfter(rng.choice(TIMES))
    lst = rng.choice(LISTS)
    if var_ok and not ground and rng.random() < 0.5:
        term = "X"
    else:
        term = rng.choice(PRINCIPALS + ENTITIES)
    return ListHas(lst, term) if kind == "in" else ListLacks(lst, term)


def random_conjunct(rng: random.Random, *, ground: bool) -> set:
    atoms = {random_atom(rng, ground=ground, var_ok=True) for _ in range(rng.randint(0, 3))}
    if any(getattr(a, "term", None) == "X" for a in atoms):
        atoms.add(KeyIs("X"))
    return atoms


def random_rule(rng: random.Random, *, ground: bool = False, max_disjuncts: int = 3) -> Rule:
    n = rng.randint(0, max_disjuncts)
    return Rule.of(random_conjunct(rng, ground=ground) for _ in range(n))


def random_view(rng: random.Random, clock: int | None = None) -> MetadataView:
    domain = PRINCIPALS + ENTITIES
    lists = {
        lid: MetaList(lid, frozenset(e for e in domain if rng.random() < 0.5)) for lid in LISTS
    }
    return MetadataView({}, lists, rng.choice((0, 15, 30)) if clock is None else clock)


def random_policy(rng: random.Random, *, with_fd: bool = True) -> Policy:
    escapes = []
    for _ in range(rng.randint(0, 2)):
        trig = set()
        r = rng.random()
        if r < 0.4 and with_fd:
            trig.add(FdOnly())
        elif r < 0.7:
            trig.add(TimeAfter(rng.choice(TIMES)))
        else:
            lst = rng.choice(LISTS)
            e = rng.choice(ENTITIES)
            trig.add(ListHas(lst, e) if rng.random() < 0.5 else ListLacks(lst, e))
        escapes.append(Escape(frozenset(trig), random_rule(rng, max_disjuncts=2)))
    return Policy(
        random_rule(rng),
        random_rule(rng, max_disjuncts=2),
        DeclassRule.of(escapes),
        name=f"p{rng.randrange(10**6)}",
    )


seeds = st.integers(min_value=0, max_value=2**32 - 1)


@st.composite
def rules(draw, ground: bool = False):
    return random_rule(random.Random(draw(seeds)), ground=ground)


@st.composite
def views(draw):
    return random_view(random.Random(draw(seeds)))


@st.composite
def policies(draw):
    return random_policy(random.Random(draw(seeds)))
