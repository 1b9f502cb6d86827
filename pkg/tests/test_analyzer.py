"""Offline analysis: certification, policy-class dedup, capabilities and persistence."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcap.analyzer import (
    CertifiedAccess,
    ManifestError,
    OAFormatError,
    OAOutput,
    apply_predictions,
    build_view,
    compile_capabilities,
    dedup_by_policy_class,
    dumps_oa,
    format_manifest,
    format_metadata,
    load_oa,
    loads_oa,
    parse_manifest,
    parse_metadata,
    persist_oa,
    run_oa,
)
from flowcap.lang import parse_policies
from flowcap.oracle import semantic_implies, view_facts
from flowcap.policy import MetaList
from flowcap.restrict import ListIncludes, PolicyEquals, parse_cond
from helpers import UNIVERSE

POLICIES = """
policy pub      { read :- true; update :- key(admin); declassify :- propagate until fdonly => true; }
policy bob.fr   { read :- key(bob) | key(X) & in(bob.friends, X); update :- key(bob);
                  declassify :- propagate until fdonly => true; }
policy bob.priv { read :- key(bob); update :- key(bob); declassify :- propagate until fdonly => true; }
policy t.alice  { read :- key(alice); update :- false; declassify :- propagate until fdonly => true; }
policy t.svc    { read :- false; update :- false; declassify :- propagate until fdonly => true; }
policy notes    { read :- key(alice); update :- key(alice); declassify :- propagate until fdonly => true; }
"""

MANIFEST = """
class pub.a policy=pub members=doc/pub/a*
class pub.b policy=pub members=doc/pub/b*
class bob.fr policy=bob.fr members=doc/bob/fr/*
class bob.priv policy=bob.priv members=doc/bob/priv/*
class alice.notes policy=notes members=doc/alice/notes/*
task worker.alice user=alice region=r1 taint=t.alice
task indexer user=svc region=- taint=t.svc
task idle user=carol region=r1 taint=t.alice active=0
reads worker.alice pub.a
reads worker.alice pub.b
reads worker.alice bob.fr
reads worker.alice bob.priv
reads worker.alice alice.notes
writes worker.alice alice.notes
writes worker.alice bob.priv
reads indexer pub.a
reads indexer pub.b
reads indexer bob.fr
reads indexer bob.priv
reads idle pub.a
"""

METADATA = "clock 100\nlist bob.friends 5 alice,carol\n"


@pytest.fixture()
def inputs():
    policies = parse_policies(POLICIES)
    manifest = parse_manifest(MANIFEST)
    return manifest, policies, build_view(manifest, policies, METADATA)


def records(out: OAOutput) -> dict:
    return {(c.mode, c.task, c.conduit_class): c.conds for c in out.certified}


# ---------------------------------------------------------------------------
# Manifest and metadata formats
# ---------------------------------------------------------------------------


class TestInputs:
    def test_manifest_round_trip(self):
        m = parse_manifest(MANIFEST)
        assert parse_manifest(format_manifest(m)) == m
        assert m.tasks["idle"].active is False
        assert m.tasks["indexer"].region is None

    def test_class_of_uses_globs(self):
        m = parse_manifest(MANIFEST)
        assert m.class_of("doc/bob/fr/x1") == "bob.fr"
        assert m.class_of("doc/nowhere") is None

    @pytest.mark.parametrize("bad, line", [
        ("task t1 user=a\n", 1),
        ("class c\n", 1),
        ("\nfrobnicate x\n", 2),
        ("task t user=a taint=p oops\n", 1),
    ])
    def test_manifest_errors_name_line(self, bad, line):
        with pytest.raises(ManifestError, match=f"line {line}"):
            parse_manifest(bad)

    def test_access_for_unknown_task(self):
        with pytest.raises(ManifestError, match="unknown task"):
            parse_manifest("reads ghost c1\n")

    def test_unknown_class_is_hard_error_before_analysis(self, inputs):
        manifest, policies, view = inputs
        bad = parse_manifest(MANIFEST + "reads worker.alice no.such.class\n")
        with pytest.raises(ManifestError, match="unknown conduit class"):
            run_oa(bad, policies, view)

    def test_unknown_policy(self):
        with pytest.raises(ManifestError, match="unknown policy"):
            parse_manifest("class c policy=nope\n").validate({})

    def test_metadata_round_trip(self):
        lists, clock = parse_metadata(METADATA)
        assert clock == 100 and lists["bob.friends"].entries == {"alice", "carol"}
        assert parse_metadata(format_metadata(lists, clock)) == (lists, clock)
        assert parse_metadata("list empty 0 -\n")[0]["empty"] == MetaList("empty", frozenset(), 0)
        with pytest.raises(ManifestError, match="metadata line 1"):
            parse_metadata("clock soon\n")


# ---------------------------------------------------------------------------
# Certification
# ---------------------------------------------------------------------------


class TestRunOA:
    def test_friend_access_carries_conditions(self, inputs):
        manifest, policies, view = inputs
        rec = records(run_oa(manifest, policies, view))
        conds = rec[("R", "worker.alice", "bob.fr")]
        assert conds == {ListIncludes("bob.friends", "alice"), PolicyEquals("bob.fr", policies["bob.fr"].class_id)}

    def test_private_access_absent_and_oracle_agrees(self, inputs):
        manifest, policies, view = inputs
        rec = records(run_oa(manifest, policies, view))
        assert ("R", "worker.alice", "bob.priv") not in rec
        facts = view_facts(view, UNIVERSE)
        assert not semantic_implies(policies["t.alice"].read, policies["bob.priv"].read, UNIVERSE, facts=facts)

    def test_writes(self, inputs):
        manifest, policies, view = inputs
        rec = records(run_oa(manifest, policies, view))
        assert ("W", "worker.alice", "alice.notes") in rec
        assert ("W", "worker.alice", "bob.priv") not in rec  # alice fails bob's update rule

    def test_indexer_reads_everything_indexable(self, inputs):
        manifest, policies, view = inputs
        rec = records(run_oa(manifest, policies, view))
        for cls in ("pub.a", "pub.b", "bob.fr", "bob.priv"):
            assert ("R", "indexer", cls) in rec

    def test_service_tasks_of_generated_corpus(self, small_corpus, small_oa):
        rec = records(small_oa)
        for task in ("indexer", "engine"):
            wanted = small_corpus.manifest.tasks[task].expected_reads
            assert wanted and all(("R", task, cls) in rec for cls in wanted)

    def test_tuples_unique_and_snapshot_complete(self, small_oa):
        keys = [(c.mode, c.task, c.conduit_class) for c in small_oa.certified]
        assert len(keys) == len(set(keys))
        assert {c.conduit_class for c in small_oa.certified} <= set(small_oa.policy_snapshot)

    def test_active_only_skips_inactive(self, inputs):
        manifest, policies, view = inputs
        assert ("R", "idle", "pub.a") in records(run_oa(manifest, policies, view))
        assert not any(c.task == "idle" for c in run_oa(manifest, policies, view, active_only=True).certified)

    def test_parallel_matches_serial_byte_for_byte(self, small_corpus):
        m, p, v = small_corpus.manifest, small_corpus.policies, small_corpus.view()
        assert dumps_oa(run_oa(m, p, v, parallel=3)) == dumps_oa(run_oa(m, p, v))

    def test_check_bound(self, inputs, small_corpus, small_oa):
        manifest, policies, view = inputs
        classes = len(dedup_by_policy_class(manifest.class_policies(policies)))
        assert run_oa(manifest, policies, view).checks <= len(manifest.tasks) * classes * 2
        k = len(dedup_by_policy_class(small_corpus.manifest.class_policies(small_corpus.policies)))
        assert small_oa.checks <= len(small_corpus.manifest.tasks) * k * 2


class TestDedup:
    def test_shared_public_policy_is_one_class(self, inputs):
        manifest, policies, _ = inputs
        groups = dedup_by_policy_class(manifest.class_policies(policies))
        assert groups[policies["pub"].class_id] == ("pub.a", "pub.b")

    def test_empty(self):
        assert dedup_by_policy_class({}) == {}

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 300), st.integers(0, 2**16))
    def test_checks_follow_policy_classes_not_conduits(self, k, n, seed):
        rng = random.Random(seed)
        pols = "".join(
            f"policy p{i} {{ read :- key(u{i}) | key(X) & in(f{i}, X); update :- key(u{i}); declassify :- propagate; }}\n"
            for i in range(k)
        )
        policies = parse_policies(pols + "policy t { read :- key(u0); update :- key(u0); declassify :- propagate; }")
        lines = [f"class c{j} policy=p{j % k if j < k else rng.randrange(k)}" for j in range(max(n, k))]
        lines.append("task w user=u0 region=- taint=t")
        lines += [f"reads w c{j}" for j in range(max(n, k))] + [f"writes w c{j}" for j in range(max(n, k))]
        manifest = parse_manifest("\n".join(lines))
        assert len(dedup_by_policy_class(manifest.class_policies(policies))) == k
        meta = "".join(f"list f{i} 0 u0\n" for i in range(k))
        out = run_oa(manifest, policies, build_view(manifest, policies, meta))
        assert out.checks == 2 * k
        # read results fan out to every member; the writes are refused because
        # the taint's reader (u0) is narrower than the targets' audiences
        assert sum(c.mode == "R" for c in out.certified) == max(n, k)
        assert not any(c.mode == "W" for c in out.certified)


# ---------------------------------------------------------------------------
# Capability compilation
# ---------------------------------------------------------------------------


class TestCapabilities:
    def test_union_equals_certified(self, small_oa):
        bps = compile_capabilities(small_oa)
        for task, bp in bps.items():
            want = {(c.mode, c.conduit_class) for c in small_oa.for_task(task)}
            assert bp.accesses() == want

    def test_groups_disjoint(self, small_oa):
        for bp in compile_capabilities(small_oa).values():
            seen = [cls for g in bp.groups for cls in g.classes]
            assert len(seen) == len(set(seen))

    def test_workers_need_few_groups(self, small_oa):
        bps = compile_capabilities(small_oa)
        worker_groups = [len(bp.groups) for t, bp in bps.items() if t.startswith("worker.")]
        assert worker_groups and max(worker_groups) <= 5

    def test_members_keep_their_own_conditions(self, small_oa):
        for bp in compile_capabilities(small_oa).values():
            for g in bp.groups:
                for cls, conds in g.members:
                    assert PolicyEquals(cls, small_oa.policy_snapshot[cls]) in conds

    def test_no_accesses_no_blueprint(self):
        assert compile_capabilities(OAOutput()) == {}


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


class TestPersistence:
    def test_empty_round_trip(self, tmp_path):
        persist_oa(OAOutput(), tmp_path / "oa.txt")
        assert load_oa(tmp_path / "oa.txt") == OAOutput()

    def test_round_trip_and_stable_bytes(self, small_oa, tmp_path):
        p = tmp_path / "oa.txt"
        persist_oa(small_oa, p)
        back = load_oa(p)
        assert back == small_oa
        assert dumps_oa(back) == p.read_text()

    def test_large_output_round_trips(self):
        rng = random.Random(8)
        snap = {f"c{i}": f"{rng.getrandbits(128):032x}" for i in range(500)}
        certified = sorted(
            CertifiedAccess(
                rng.choice("RW"), f"t{i % 200}", cls,
                frozenset({PolicyEquals(cls, snap[cls]), parse_cond(f"inc:friends.u{i % 7}:u{i % 11}")}),
            )
            for i, cls in enumerate(f"c{j % 500}" for j in range(100_000))
        )
        out = OAOutput(certified, snap, 42)
        text = dumps_oa(out)
        assert dumps_oa(loads_oa(text)) == text

    def test_version_mismatch(self, small_oa):
        text = dumps_oa(small_oa).replace("oa-v1", "oa-v0", 1)
        with pytest.raises(OAFormatError, match="version") as exc:
            loads_oa(text)
        assert exc.value.line == 1

    def test_checksum_failure(self, small_oa):
        text = dumps_oa(small_oa)
        header, rest = text.split("\n", 1)
        with pytest.raises(OAFormatError, match="checksum"):
            loads_oa(header + "\n" + rest.replace("R ", "W ", 1))

    def test_bad_record_names_line(self, small_oa):
        lines = dumps_oa(small_oa).split("\n")
        lines[5] = "Q nonsense"
        with pytest.raises(OAFormatError) as exc:
            loads_oa("\n".join(lines))
        assert exc.value.line == 6 and "line 6" in str(exc.value)

    def test_truncation_fuzz(self, small_oa):
        text = dumps_oa(small_oa)
        rng = random.Random(1)
        for cut in sorted(rng.sample(range(1, len(text) - 1), 200)):
            with pytest.raises(OAFormatError):
                loads_oa(text[:cut])

    def test_byte_flip_fuzz(self, small_oa):
        text = dumps_oa(small_oa)
        rng = random.Random(2)
        for _ in range(200):
            i = rng.randrange(len(text.split("\n", 1)[0]) + 1, len(text) - 1)
            ch = rng.choice("xyz019 :|")
            if text[i] == ch:
                continue
            with pytest.raises(OAFormatError):
                loads_oa(text[:i] + ch + text[i + 1:])


# ---------------------------------------------------------------------------
# Runtime predictions
# ---------------------------------------------------------------------------


class TestPredictions:
    def test_new_instance_with_rebound_taint(self, small_corpus):
        policies = dict(small_corpus.policies)
        m = apply_predictions(small_corpus.manifest, [("u000", "r1")], policies)
        inst = m.tasks["worker.u000@r1"]
        assert inst.region == "r1"
        taint = m.taint_of(inst.task_id, policies)
        assert all("region(r1)" in p.canonical() for p in taint.components)
        assert inst.expected_reads == small_corpus.manifest.tasks["worker.u000"].expected_reads

    def test_known_or_unknown_pairs_are_ignored(self, small_corpus):
        policies = dict(small_corpus.policies)
        home = small_corpus.home["u000"]
        m = apply_predictions(small_corpus.manifest, [("u000", home), ("nobody", "r1")], policies)
        assert set(m.tasks) == set(small_corpus.manifest.tasks) | {f"worker.u000@{home}"}

    def test_oa_after_predictions_certifies_new_instance(self, small_corpus):
        policies = dict(small_corpus.policies)
        m = apply_predictions(small_corpus.manifest, [("u001", "r2")], policies)
        out = run_oa(m, policies, small_corpus.view())
        assert any(c.task == "worker.u001@r2" and c.mode == "R" for c in out.certified)
