"""Hybrid reference monitor: registration, slow path, revalidation, sessions."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcap.analyzer import compile_capabilities
from flowcap.lang import parse_policy
from flowcap.monitor import (
    INTERCEPTION_KINDS,
    ReferenceMonitor,
    apply_change,
    credential_for,
)
from flowcap.pipeline import LOGGER, PUBLIC_LOG, Pipeline, SessionScript
from flowcap.policy import SessionContext, eval_rule
from flowcap.sandbox import Conduit, Handle


@pytest.fixture()
def shai(small_corpus, small_oa):
    p = Pipeline(small_corpus, "shai", small_oa)
    p.start()
    return p


def friend_pair(corpus):
    """(owner, friend) such that the owner has friends-only documents."""
    for cid in corpus.docs_of_kind("friends"):
        owner = corpus.docs[cid].owner
        friends = sorted(corpus.friends[owner])
        if friends:
            return owner, friends[0], cid
    raise AssertionError("no friends-only documents")


def private_of(corpus, user, other=False):
    for cid in corpus.docs_of_kind("private"):
        if (corpus.docs[cid].owner == user) != other:
            return cid
    raise AssertionError


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------


class TestRegister:
    def test_grant_matches_valid_list(self, shai, small_oa):
        sb, mon = shai.sb, shai.monitor
        sb.session = "t"
        sb.spawn("w")
        _, v = mon.register(sb, "w", "worker.u000")
        assert v
        want = {(m, c) for m, c in mon.valid_accesses("worker.u000")}
        got = {(("R" if r == "r" else "W"), e.conduit_class) for e in sb.task("w").caps.entries for r in e.rights}
        assert got == want
        groups = compile_capabilities(small_oa)["worker.u000"].groups
        assert len(groups) <= 5

    def test_unknown_instance(self, shai, small_corpus):
        sb, mon = shai.sb, shai.monitor
        sb.session = "t"
        sb.spawn("w")
        _, v = mon.register(sb, "w", "worker.nobody")
        assert not v and v.reason == "unknown-instance"
        assert len(sb.task("w").caps) == 0
        # slow path is still available, with a public taint
        before = mon.interceptions("t")
        h = sb.open("w", private_of(small_corpus, "u000"), "r")
        assert not h and h.reason == "read-not-implied"
        assert mon.interceptions("t") == before + 1

    def test_misregistration_cannot_leak(self, shai, small_corpus):
        alice, bob = small_corpus.users[0], small_corpus.users[1]
        region = small_corpus.home[bob]
        sid, worker, pipes, egress = shai.open_session(
            bob, region, instance=f"worker.{alice}", credential=credential_for(bob)
        )
        assert shai.monitor.counts[sid]["authenticate"] == 1
        assert shai.monitor.log[-1].decision == "deny"
        shai.query(worker, bob, region, pipes, egress, ("t001",))
        egress_writes = [r for r in shai.sb.log if r.session == sid and r.conduit == egress and r.op == "write"]
        assert egress_writes and all(r.decision == "deny" for r in egress_writes)
        assert shai.leaks == []


# ---------------------------------------------------------------------------
# Slow path
# ---------------------------------------------------------------------------


class TestSlowPath:
    def _worker(self, shai, user):
        sb = shai.sb
        sid, worker, pipes, egress = shai.open_session(user, shai.corpus.home[user])
        return sb, worker

    def test_conduit_created_after_analysis(self, shai):
        sb, worker = self._worker(shai, "u000")
        late = parse_policy("read :- key(u000); update :- key(u000); declassify :- propagate until fdonly => true;")
        sb.store.add(Conduit("doc/u000/late", "ingress", "late.u000"), late)
        h = sb.open(worker, "doc/u000/late", "r")
        assert isinstance(h, Handle)
        assert shai.monitor.log[-1].kind == "slow-path-open"

    def test_other_users_private_document(self, shai, small_corpus):
        sb, worker = self._worker(shai, "u000")
        v = sb.open(worker, private_of(small_corpus, "u000", other=True), "r")
        assert not v and v.reason == "read-not-implied"

    def test_write_denials_are_typed(self, shai, small_corpus):
        sb, worker = self._worker(shai, "u000")
        # the worker's taint is narrower than the public log's audience
        v = sb.open(worker, PUBLIC_LOG, "w")
        assert not v and v.reason == "declass-failed"
        # own profile: taint fits, but the profile's owner is someone else
        v = shai.monitor.decide(sb, worker, "prof.u001", "w")
        assert not v and v.reason in ("declass-failed", "update-rule-failed")

    def test_replay_agrees_with_analysis(self, shai, small_oa, small_corpus):
        sb, mon = shai.sb, shai.monitor
        sb.session = "replay"
        view = sb.store.view
        for task in sorted({c.task for c in small_oa.certified}):
            sb.spawn(f"r.{task}")
            mon.register(sb, f"r.{task}", task)
        for ca in small_oa.certified:
            assert mon.decide(sb, f"r.{ca.task}", ca.conduit_class, ca.mode.lower()), ca.render()
        assert sb.store.view is view

    def test_patching_makes_second_open_fast(self, small_corpus, small_oa):
        p = Pipeline(small_corpus, "shai", small_oa, patch_slowpath=True)
        p.start()
        sb = p.sb
        sid, worker, *_ = p.open_session("u000", small_corpus.home["u000"])
        late = parse_policy("read :- key(u000); update :- false; declassify :- propagate until fdonly => true;")
        sb.store.add(Conduit("doc/u000/late", "ingress", "late.u000"), late)
        assert isinstance(sb.open(worker, "doc/u000/late", "r"), Handle)
        assert isinstance(sb.open(worker, "doc/u000/late", "r"), Handle)
        assert p.monitor.counts[sid]["slow-path-open"] == 1


# ---------------------------------------------------------------------------
# Metadata changes
# ---------------------------------------------------------------------------


class TestRevalidation:
    def test_unfriend_affects_next_session_only(self, shai, small_corpus):
        owner, friend, doc = friend_pair(small_corpus)
        sb, mon = shai.sb, shai.monitor
        region = small_corpus.home[friend]
        sid, worker, *_ = shai.open_session(friend, region)
        assert ("R", f"fr.{owner}") in mon.valid_accesses(f"worker.{friend}")
        report = mon.on_metadata_change(sb, ("list-remove", f"friends.{owner}", friend))
        assert (f"worker.{friend}", "R", f"fr.{owner}", "invalid") in report
        assert ("R", f"fr.{owner}") not in mon.valid_accesses(f"worker.{friend}")
        # the live session keeps its capability (no revocation)
        assert isinstance(sb.open(worker, doc, "r"), Handle)
        assert mon.counts[sid]["slow-path-open"] == 0
        shai.close_session(worker)
        sid2, worker2, *_ = shai.open_session(friend, region)
        v = sb.open(worker2, doc, "r")
        assert not v and mon.counts[sid2]["slow-path-open"] == 1

    def test_adding_a_friend_removes_nothing(self, shai, small_corpus):
        mon = shai.monitor
        before = {t: set(v) for t, v in mon.valid.items()}
        outsider = next(u for u in small_corpus.users if u not in small_corpus.friends["u000"] and u != "u000")
        report = mon.on_metadata_change(shai.sb, ("list-add", "friends.u000", outsider))
        assert all(state == "valid" for *_, state in report)
        for t, v in before.items():
            assert v <= mon.valid[t]

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["list-add", "list-remove", "policy"]), st.integers(0, 10**6)), max_size=12))
    def test_incremental_equals_from_scratch(self, small_corpus, small_oa, ops):
        p = Pipeline(small_corpus, "shai", small_oa)
        sb, mon = p.sb, p.monitor
        rng = random.Random(len(ops))
        lists = sorted(sb.store.view.lists)
        for kind, n in ops:
            r = random.Random(n)
            if kind == "policy":
                cls = r.choice(sorted(small_corpus.manifest.classes))
                other = small_corpus.policies[r.choice(sorted(small_corpus.policies))]
                change = ("policy-set", cls, other)
            else:
                lid = r.choice(lists)
                entry = r.choice(list(small_corpus.users) + ["pub"] + sorted(small_corpus.docs)[:3]).rsplit("/", 1)[-1]
                change = (kind, lid, entry)
            mon.on_metadata_change(sb, change)
            rng.random()
        incremental = {t: set(v) for t, v in mon.valid.items() if v}
        mon.revalidate_all(sb.store.view)
        assert incremental == {t: set(v) for t, v in mon.valid.items() if v}

    def test_apply_change_rejects_unknown(self, shai):
        with pytest.raises(ValueError):
            apply_change(shai.sb, ("teleport", "x"))


# ---------------------------------------------------------------------------
# Re-registration
# ---------------------------------------------------------------------------


class TestReregister:
    def _logger(self, shai, session):
        sb, mon = shai.sb, shai.monitor
        sb.session = session
        sb.spawn(LOGGER)
        mon.register(sb, LOGGER, LOGGER)
        return sb, mon

    def test_vacuous_when_no_open_writes(self, shai):
        sb, mon = self._logger(shai, "rr1")
        assert mon.reregister(sb, LOGGER, "worker.u000")
        assert mon.registered[LOGGER].instance == "worker.u000"

    def test_open_write_blocks_raise(self, shai):
        sb, mon = self._logger(shai, "rr2")
        assert isinstance(sb.open(LOGGER, PUBLIC_LOG, "w"), Handle)
        v = mon.reregister(sb, LOGGER, "worker.u000")
        assert not v and v.reason == "open-write-leak"

    def test_taint_never_decreases(self, shai):
        sb, mon = shai.sb, shai.monitor
        sb.session = "rr3"
        sb.spawn("w")
        mon.register(sb, "w", "worker.u000")
        v = mon.reregister(sb, "w", LOGGER)
        assert not v and v.reason == "taint-decrease"


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------


class TestSession:
    @pytest.mark.parametrize("length", [0, 1, 8])
    def test_four_interceptions(self, shai, length):
        pool = ["t020", "t021", "t022", "t023"]
        script = SessionScript("u003", shai.corpus.home["u003"], tuple((pool[i % 4],) for i in range(length)))
        m = shai.run_session(script)
        assert m.interceptions == {"register": 1, "accept": 1, "authenticate": 1, "reset": 1}
        assert m.denials == 0

    def test_reset_clears_and_next_user_gets_own_grant(self, shai):
        sb, mon = shai.sb, shai.monitor
        sb.session = "r"
        sb.spawn("w")
        mon.register(sb, "w", "worker.u000")
        h = sb.open("w", private_of(shai.corpus, "u000"), "r")
        assert isinstance(h, Handle)
        mon.reset(sb, "w")
        assert sb.read("w", h).reason == "no-handle"
        mon.register(sb, "w", "worker.u001")
        classes = set(sb.task("w").caps.classes())
        assert "priv.u001" in classes and "priv.u000" not in classes

    def test_authentication_mismatch_refused(self, shai):
        sb, mon = shai.sb, shai.monitor
        sb.session = "a"
        sb.spawn("w")
        mon.register(sb, "w", "worker.u000")
        e = mon.accept(sb, "w")
        v = mon.authenticate(sb, "w", credential_for("u001"), shai.corpus.home["u000"], e)
        assert not v and v.reason == "session-refused"
        assert not mon.authenticate(sb, "w", "garbage", shai.corpus.home["u000"], e)

    def test_unexpected_region_degrades_gracefully(self, shai, small_corpus):
        user = "u002"
        home = small_corpus.home[user]
        away = next(r for r in small_corpus.regions if r != home)
        script = SessionScript(user, away, (("t020",), ("t021",)))
        m = shai.run_session(script)
        assert m.interceptions["authenticate"] == 1 and m.denials == 0
        assert (user, away) in shai.monitor.predictions
        # one extra interception per region-conditioned descriptor actually sent
        view = shai.sb.store.view
        regional = [
            r for r in shai.sb.log
            if r.session == m.session_id and r.op == "transfer"
            and view.policies[shai.sb.store.get(r.conduit).conduit_class].mentions_region()
        ]
        assert m.slowpath == len(regional) > 0

    def test_interception_log_csv(self, shai):
        shai.run_session(SessionScript("u000", shai.corpus.home["u000"], (("t020",),)))
        text = shai.monitor.export_csv()
        lines = text.splitlines()
        assert lines[0] == "session_id,kind,task,conduit,decision,tick"
        assert all(line.split(",")[1] in INTERCEPTION_KINDS for line in lines[1:])
        ticks = [int(line.rsplit(",", 1)[1]) for line in lines[1:]]
        assert ticks == sorted(ticks)


def test_monitor_requires_known_region_policy(small_corpus, small_oa):
    # the worker taint binds the home region; readers of its egress match that binding
    mon = ReferenceMonitor(small_corpus.manifest, small_corpus.policies, small_oa, small_corpus.view())
    taint = mon.instance_taint("worker.u000")
    home = small_corpus.home["u000"]
    (comp,) = taint.components
    assert eval_rule(comp.read, SessionContext("u000", home), small_corpus.view())
