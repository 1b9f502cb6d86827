"""Policy language, normal form and rule evaluation."""

from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given, settings

from flowcap.lang import PolicySyntaxError, parse_policies, parse_policy, parse_rule, serialize_block, serialize_policy
from flowcap.oracle import truth_value
from flowcap.policy import (
    FALSE,
    TRUE,
    DeclassRule,
    Escape,
    FdOnly,
    KeyIs,
    ListHas,
    ListLacks,
    MetadataView,
    MetaList,
    MissingMetadata,
    Policy,
    PolicyError,
    RegionIs,
    Rule,
    SessionContext,
    Taint,
    TimeAfter,
    eval_rule,
)
from helpers import PRINCIPALS, REGIONS, policies, random_policy, random_rule, random_view, rules, views


def ctx(p, region=None, clock=0):
    return SessionContext(p, region, clock)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class TestParse:
    def test_all_permissive_read(self):
        p = parse_policy("read :- true; update :- key(admin); declassify :- propagate;")
        assert p.read == TRUE
        assert p.update == Rule.of([{KeyIs("admin")}])
        assert p.escapes == ()
        for who in PRINCIPALS:
            assert eval_rule(p.read, ctx(who), MetadataView())

    def test_false_read_denies_everyone(self):
        p = parse_policy("read :- false; update :- true; declassify :- propagate;")
        assert p.read.is_false
        for who, region in itertools.product(PRINCIPALS, REGIONS):
            assert not eval_rule(p.read, ctx(who, region), MetadataView())

    def test_friends_list_rule(self):
        r = parse_rule("key(X) & in(bob.friends, X)")
        view = MetadataView({}, {"bob.friends": MetaList("bob.friends", frozenset({"alice", "carol"}))})
        assert eval_rule(r, ctx("alice"), view)
        assert not eval_rule(r, ctx("dave"), view)

    def test_named_blocks_and_comments(self):
        text = """
        # two policies
        policy a { read :- key(alice) | key(bob); update :- false; declassify :- propagate; }
        policy b { read :- region(eu) & notin(blacklist.eu, doc1);
                   update :- key(X) & in(editors, X);
                   declassify :- propagate until after(2018-01-01T00:00Z) => true; }
        """
        ps = parse_policies(text)
        assert set(ps) == {"a", "b"}
        assert ps["b"].escapes[0].trigger == frozenset({TimeAfter(1514764800)})
        assert ps["b"].escapes[0].result == TRUE

    def test_fdonly_escape(self):
        p = parse_policy("read :- key(u1); update :- key(u1); declassify :- propagate until fdonly => true;")
        assert p.escapes == (Escape(frozenset({FdOnly()}), TRUE),)

    def test_key_pins_variable(self):
        # key(X) & key(alice) is the same conjunct as key(alice) with X := alice
        r = parse_rule("key(X) & key(alice) & in(L1, X)")
        assert r == Rule.of([{KeyIs("alice"), ListHas("L1", "alice")}])

    def test_contradictions_drop_out(self):
        assert parse_rule("key(alice) & key(bob)").is_false
        assert parse_rule("region(r1) & region(r2)").is_false
        assert parse_rule("in(L1, c1) & notin(L1, c1)").is_false
        assert parse_rule("false | key(bob)") == Rule.of([{KeyIs("bob")}])

    def test_absorption(self):
        assert parse_rule("key(alice) | key(alice) & region(r1)") == Rule.of([{KeyIs("alice")}])
        assert parse_rule("true | key(alice)") == TRUE

    @pytest.mark.parametrize(
        "text, line, col",
        [
            ("read :- key(alice) update :- true; declassify :- propagate;", 1, 20),
            ("read :- kee(alice); update :- true; declassify :- propagate;", 1, 9),
            ("read :- true;\nupdate :- true;\ndeclassify :- propagate until key(X) => true;", 3, 31),
            ("read :- in(L1, Y); update :- true; declassify :- propagate;", 1, 9),
            ("read :- key(X) & key(Y); update :- true; declassify :- propagate;", 1, 9),
            ("read :- after(yesterday); update :- true; declassify :- propagate;", 1, 15),
            ("read :- true; update :- true; declassify :- propagate; extra", 1, 56),
            ("read :- true $", 1, 14),
        ],
    )
    def test_syntax_errors_carry_position(self, text, line, col):
        with pytest.raises(PolicySyntaxError) as exc:
            parse_policy(text)
        assert (exc.value.line, exc.value.col) == (line, col)

    def test_duplicate_block_names(self):
        blk = "policy a { read :- true; update :- true; declassify :- propagate; }"
        with pytest.raises(PolicySyntaxError, match="duplicate"):
            parse_policies(blk + blk)

    def test_region_must_be_constant(self):
        with pytest.raises(PolicySyntaxError):
            parse_rule("region(R)")


# ---------------------------------------------------------------------------
# Canonical form and class ids
# ---------------------------------------------------------------------------


class TestCanonical:
    def test_true_read_serializes_identically(self):
        p = Policy(TRUE, TRUE)
        assert serialize_policy(p) == "read :- true; update :- true; declassify :- propagate;"
        assert serialize_policy(Policy(TRUE, TRUE)) == serialize_policy(p)

    def test_construction_order_is_irrelevant(self):
        atoms = [KeyIs("X"), ListHas("L1", "X"), RegionIs("r1")]
        a = Rule.of([atoms, [KeyIs("bob")]])
        b = Rule.of([[KeyIs("bob")], list(reversed(atoms))])
        esc1 = Escape(frozenset({FdOnly()}), TRUE)
        esc2 = Escape(frozenset({TimeAfter(10)}), a)
        p = Policy(a, FALSE, DeclassRule.of([esc1, esc2]))
        q = Policy(b, FALSE, DeclassRule.of([esc2, esc1]))
        assert serialize_policy(p) == serialize_policy(q)
        assert p.class_id == q.class_id

    def test_variable_names_are_canonical(self):
        assert parse_rule("key(Who) & in(L1, Who)") == parse_rule("key(X) & in(L1, X)")

    def test_round_trip_500_random(self):
        rng = random.Random(20240501)
        for _ in range(500):
            p = random_policy(rng)
            text = serialize_policy(p)
            q = parse_policy(text)
            assert q == p
            assert serialize_policy(q) == text
            assert q.class_id == p.class_id

    def test_block_round_trip_keeps_name(self):
        p = random_policy(random.Random(3))
        assert parse_policies(serialize_block(p))[p.name] == p

    def test_class_id_injective_on_generator(self):
        rng = random.Random(99)
        seen: dict = {}
        for _ in range(100_000):
            p = random_policy(rng)
            text = p.canonical()
            prev = seen.setdefault(p.class_id, text)
            assert prev == text
        assert len(seen) > 1000

    @given(rules())
    def test_normalization_idempotent(self, r):
        again = Rule.of(r.disjuncts)
        assert again == r
        assert Rule.of(again.disjuncts) == again

    @given(rules())
    def test_serialize_parse_rule(self, r):
        assert parse_rule(str(r)) == r


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _lists(view: MetadataView) -> dict:
    return {lid: ml.entries for lid, ml in view.lists.items()}


class TestEval:
    def test_identity(self):
        assert eval_rule(parse_rule("key(alice)"), ctx("alice"), MetadataView())

    @given(views())
    def test_false_bottom_true_top(self, view):
        for who, region in itertools.product(PRINCIPALS, REGIONS):
            assert not eval_rule(FALSE, ctx(who, region, view.clock), view)
            assert eval_rule(TRUE, ctx(who, region, view.clock), view)

    @settings(max_examples=300)
    @given(rules(), views())
    def test_agrees_with_truth_table(self, rule, view):
        lists = _lists(view)
        for who, region in itertools.product(PRINCIPALS[:3], REGIONS):
            got = eval_rule(rule, ctx(who, region, view.clock), view)
            assert got == truth_value(rule, who, region, view.clock, lists)

    def test_exhaustive_small_universe(self):
        # every rule over a 3-principal / 2-region / 2-list grammar slice
        atoms = [KeyIs("alice"), KeyIs("X"), RegionIs("r1"), ListHas("L1", "X"), ListLacks("L2", "c1")]
        conjs = []
        for k in range(0, 3):
            for combo in itertools.combinations(atoms, k):
                s = set(combo)
                if any(getattr(a, "term", None) == "X" for a in s):
                    s.add(KeyIs("X"))
                conjs.append(s)
        rng = random.Random(5)
        for _ in range(400):
            rule = Rule.of(rng.sample(conjs, rng.randint(0, 3)))
            for l1 in (frozenset(), frozenset({"alice", "bob"})):
                for l2 in (frozenset(), frozenset({"c1"})):
                    view = MetadataView({}, {"L1": MetaList("L1", l1), "L2": MetaList("L2", l2)})
                    for who, region in itertools.product(("alice", "bob", "carol"), REGIONS):
                        assert eval_rule(rule, ctx(who, region), view) == truth_value(
                            rule, who, region, 0, _lists(view)
                        )

    def test_time_after_is_strict(self):
        r = parse_rule("after(20)")
        assert not eval_rule(r, ctx("alice", clock=20), MetadataView(clock=20))
        assert eval_rule(r, ctx("alice", clock=21), MetadataView(clock=21))

    def test_missing_list_raises_or_fails_closed(self):
        r = parse_rule("key(X) & in(nowhere, X)")
        with pytest.raises(MissingMetadata):
            eval_rule(r, ctx("alice"), MetadataView())
        assert not eval_rule(r, ctx("alice"), MetadataView(), fail_closed=True)

    def test_anonymous_session_never_matches_key(self):
        assert not eval_rule(parse_rule("key(X)"), ctx(None), MetadataView())

    def test_unbound_variable_rejected_at_construction(self):
        with pytest.raises(PolicyError):
            Rule.of([{ListHas("L1", "X")}])
        with pytest.raises(PolicyError):
            Rule.of([{KeyIs("X"), ListHas("L1", "Y")}])

    def test_session_validation(self):
        with pytest.raises(PolicyError):
            SessionContext("alice", None, -1)
        with pytest.raises(PolicyError):
            SessionContext("")


# ---------------------------------------------------------------------------
# Taints and region rebinding
# ---------------------------------------------------------------------------


class TestTaint:
    @given(policies(), policies())
    def test_dedup_by_class(self, p, q):
        t = Taint.of([p, q, p])
        assert len(t) == len({p.class_id, q.class_id})
        assert Taint.of([q, p]) == t

    def test_join_is_idempotent(self):
        p = random_policy(random.Random(1))
        t = Taint.of([p])
        assert t.join(p) == t

    def test_rebind_region(self):
        p = parse_policy("read :- key(u) & region(r0); update :- false; declassify :- propagate until fdonly => region(r0);")
        q = p.rebind_region("r0", "r1")
        assert q.read == parse_rule("key(u) & region(r1)")
        assert q.escapes[0].result == parse_rule("region(r1)")
        assert p.mentions_region() and not parse_policy(
            "read :- key(u); update :- false; declassify :- propagate;"
        ).mentions_region()

    def test_random_rule_generator_sanity(self):
        rng = random.Random(0)
        rs = [random_rule(rng) for _ in range(200)]
        assert any(r.is_false for r in rs) and any(not r.is_ground() for r in rs)
        assert random_view(rng).lists
