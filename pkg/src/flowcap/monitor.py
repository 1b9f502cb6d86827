"""Reference monitor for the hybrid scheme.

Tasks register as an offline-analyzed instance and receive that instance's
currently valid certified accesses as capabilities. Anything the capability
set cannot decide faults here and is checked with the same kernel the
analyzer used, against the live metadata.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from flowcap.analyzer import Manifest, OAOutput, TaskInstance
from flowcap.policy import (
    FALSE,
    FDONLY_RULE,
    TRUE,
    DeclassRule,
    Escape,
    FdOnly,
    KeyIs,
    MetaList,
    Policy,
    RegionIs,
    SessionContext,
    Taint,
    conj,
)
from flowcap.restrict import (
    ConduitFacts,
    check_read,
    check_write,
    conds_hold,
    is_as_restr_with_declass,
    policy_eval,
    taint_dominates,
)
from flowcap.sandbox import (
    ALLOWED,
    CapabilitySet,
    CapEntry,
    Conduit,
    KvFilter,
    Sandbox,
    Verdict,
    denied,
)

INTERCEPTION_KINDS = ("register", "accept", "authenticate", "reset", "slow-path-open", "write-check")

# Runtime conduits created by the monitor, shared by every session.
QUERY_PIPE_CLASS = "qpipe"
REPLY_PIPE_CLASS = "rpipe"
PENDING_EGRESS_CLASS = "egress.pending"
QUERY_PIPE_POLICY = Policy(
    FALSE, TRUE, DeclassRule.of([Escape(frozenset({FdOnly()}), TRUE)]), name=QUERY_PIPE_CLASS
)
REPLY_PIPE_POLICY = Policy(TRUE, FDONLY_RULE, DeclassRule(), name=REPLY_PIPE_CLASS)
PENDING_EGRESS_POLICY = Policy(FALSE, FALSE, DeclassRule(), name=PENDING_EGRESS_CLASS)


def egress_class(principal: str, region: str | None) -> str:
    return f"egress.{principal}@{region or '-'}"


def egress_policy(principal: str, region: str | None) -> Policy:
    atoms = [KeyIs(principal)] + ([RegionIs(region)] if region else [])
    return Policy(conj(*atoms), conj(KeyIs(principal)), DeclassRule(), name=egress_class(principal, region))


def credential_for(principal: str) -> str:
    """Modeled credential token; authentication only checks the claimed principal."""
    return f"cred:{principal}"


@dataclass(frozen=True)
class TickCosts:
    lwc_reset: int = 2
    exec_reset: int = 20
    rm_entry: int = 1


@dataclass(frozen=True)
class Interception:
    session_id: str
    kind: str
    task: str
    conduit: str
    decision: str
    tick: int

    def csv(self) -> str:
        return ",".join([self.session_id, self.kind, self.task, self.conduit, self.decision, str(self.tick)])


@dataclass
class SessionPipes:
    query_w: object  # worker's write handle on the query pipe
    query_r: object  # engine's read handle
    reply_w: object  # engine's descriptor-send handle
    reply_r: object  # worker's descriptor-receive handle


def deny_reason_for_write(taint: Taint, cls: str, policy: Policy, writer: SessionContext, view) -> str:
    if not is_as_restr_with_declass(ConduitFacts(cls, policy), taint, view):
        return "declass-failed"
    if not policy_eval(policy.update, writer, view):
        return "update-rule-failed"
    return "write-denied"


class MonitorBase:
    """Shared plumbing: interception log, ticks, runtime conduits."""

    name = "base"
    checks_every_transfer = False

    def __init__(self, manifest: Manifest, policies: Mapping[str, Policy], *, ticks: TickCosts = TickCosts()) -> None:
        self.manifest = manifest
        self.policies = dict(policies)
        self.ticks = ticks
        self.tick = 0
        self.log: list = []
        self.counts: dict = defaultdict(Counter)
        self.reset_ticks: Counter = Counter()
        self.sessions: dict = {}  # task -> SessionContext after authentication

    # -- accounting ----------------------------------------------------------

    def intercept(self, sb: Sandbox, kind: str, task: str, conduit: str, v: Verdict) -> Verdict:
        self.tick += self.ticks.rm_entry
        self.log.append(Interception(sb.session, kind, task, conduit, "allow" if v else "deny", self.tick))
        self.counts[sb.session][kind] += 1
        return v

    def interceptions(self, session: str) -> int:
        return sum(self.counts[session].values())

    def export_csv(self) -> str:
        lines = ["session_id,kind,task,conduit,decision,tick"]
        lines += [r.csv() for r in self.log]
        return "\n".join(lines) + "\n"

    # -- instances -------------------------------------------------------------

    def instance(self, instance_id: str) -> TaskInstance | None:
        return self.manifest.tasks.get(instance_id)

    def instance_taint(self, instance_id: str) -> Taint:
        inst = self.manifest.tasks[instance_id]
        return Taint.of(self.policies[n] for n in inst.taint_names)

    # -- runtime conduits --------------------------------------------------------

    @staticmethod
    def ensure_class(sb: Sandbox, cls: str, policy: Policy) -> None:
        if sb.store.view.policies.get(cls) != policy:
            sb.store.view = sb.store.view.with_policy(cls, policy)

    def make_pipes(self, sb: Sandbox, worker: str, engine: str, sid: str) -> SessionPipes:
        self.ensure_class(sb, QUERY_PIPE_CLASS, QUERY_PIPE_POLICY)
        self.ensure_class(sb, REPLY_PIPE_CLASS, REPLY_PIPE_POLICY)
        q = sb.create_conduit(f"pipe/q.{sid}", "internal", QUERY_PIPE_CLASS, None)
        r = sb.create_conduit(f"pipe/r.{sid}", "fdpipe", REPLY_PIPE_CLASS, None)
        return SessionPipes(
            sb.install_handle(worker, q.conduit_id, "w"),
            sb.install_handle(engine, q.conduit_id, "r"),
            sb.install_handle(engine, r.conduit_id, "w"),
            sb.install_handle(worker, r.conduit_id, "r"),
        )

    def make_egress(self, sb: Sandbox, sid: str) -> Conduit:
        self.ensure_class(sb, PENDING_EGRESS_CLASS, PENDING_EGRESS_POLICY)
        return sb.create_conduit(f"net/{sid}", "egress", PENDING_EGRESS_CLASS, None)

    def bind_egress(self, sb: Sandbox, conduit_id: str, principal: str, region: str | None) -> Policy:
        pol = egress_policy(principal, region)
        self.ensure_class(sb, pol.name, pol)
        sb.store.get(conduit_id).conduit_class = pol.name
        return pol

    @staticmethod
    def principal_of(credential: str) -> str | None:
        kind, _, who = credential.partition(":")
        return who if kind == "cred" and who else None

    # -- hooks called by the sandbox (defaults: allow, uncounted) -----------------

    def on_open(self, sb, task, conduit, mode) -> Verdict:
        return ALLOWED

    def on_create(self, sb, task, conduit, policy) -> Verdict:
        return ALLOWED

    def on_read(self, sb, task, conduit) -> None:
        return None

    def on_write(self, sb, task, conduit) -> Verdict | None:
        return None

    def on_transfer(self, sb, sender, receiver, conduit, pipe) -> Verdict:
        return ALLOWED

    def on_kv(self, sb, task, conduit, op) -> Verdict:
        return ALLOWED

    def on_metadata_change(self, sb, change) -> list:
        apply_change(sb, change)
        return []


def apply_change(sb: Sandbox, change: tuple) -> tuple:
    """Apply ``("list-add"|"list-remove", list, entry)`` or ``("policy-set", class, policy)``.

    Returns the dependency key touched by the change.
    """
    view = sb.store.view
    kind = change[0]
    if kind in ("list-add", "list-remove"):
        _, lid, entry = change
        old = view.lists.get(lid, MetaList(lid))
        entries = old.entries | {entry} if kind == "list-add" else old.entries - {entry}
        sb.store.view = view.with_list(MetaList(lid, frozenset(entries), view.clock))
        return ("list", lid)
    if kind == "policy-set":
        _, cls, pol = change
        sb.store.view = view.with_policy(cls, pol)
        return ("class", cls)
    if kind == "clock":
        sb.store.view = view.with_clock(change[1])
        return ("clock",)
    raise ValueError(f"unknown metadata change {kind!r}")


class BaselineMonitor(MonitorBase):
    """No enforcement at all; pair with ``Sandbox(enforce=False)``."""

    name = "baseline"

    def register(self, sb, task, instance, *, peer=None):
        return (self.make_pipes(sb, task, peer, sb.session) if peer else None), ALLOWED

    def accept(self, sb, task):
        return self.make_egress(sb, sb.session).conduit_id

    def authenticate(self, sb, task, credential, region, egress_id):
        who = self.principal_of(credential)
        self.bind_egress(sb, egress_id, who, region)
        self.sessions[task] = SessionContext(who, region, sb.store.view.clock)
        sb.install_handle(task, egress_id, "w")
        return ALLOWED

    def reset(self, sb, task):
        sb.wipe(task)
        self.sessions.pop(task, None)


# ---------------------------------------------------------------------------
# The hybrid reference monitor
# ---------------------------------------------------------------------------


@dataclass
class RegisteredTask:
    handle: str
    instance: str | None
    taint: Taint
    session: SessionContext | None = None
    region_mispredicted: bool = False

    def writer(self, inst: TaskInstance | None, clock: int) -> SessionContext:
        if self.session is not None:
            return self.session
        if inst is None:
            return SessionContext(None, None, clock)
        return inst.session(clock)


class ReferenceMonitor(MonitorBase):
    name = "shai"

    def __init__(
        self,
        manifest: Manifest,
        policies: Mapping[str, Policy],
        oa: OAOutput,
        view,
        *,
        ticks: TickCosts = TickCosts(),
        patch_slowpath: bool = False,
    ) -> None:
        super().__init__(manifest, policies, ticks=ticks)
        self.oa = oa
        self.patch_slowpath = patch_slowpath
        self.registered: dict = {}
        self.predictions: list = []
        self.certified: dict = {}  # (task, mode, class) -> CertifiedAccess
        self.valid: dict = defaultdict(set)  # task -> {(mode, class)}
        self.deps: dict = defaultdict(set)  # dependency key -> {(task, mode, class)}
        for ca in oa.certified:
            key = (ca.task, ca.mode, ca.conduit_class)
            self.certified[key] = ca
            for c in ca.conds:
                self.deps[c.depends_on].add(key)
        self._kv_keys = {
            cid: c.members[3:] for cid, c in manifest.classes.items() if c.members.startswith("kv/")
        }
        self.revalidate_all(view)

    # -- valid access lists --------------------------------------------------------

    def revalidate_all(self, view) -> None:
        """Recompute every valid access list from scratch."""
        self.valid = defaultdict(set)
        for (task, mode, cls), ca in self.certified.items():
            if conds_hold(ca.conds, view):
                self.valid[task].add((mode, cls))

    def on_metadata_change(self, sb: Sandbox, change) -> list:
        """Apply the change, then re-evaluate only the entries that depend on it.

        Returns ``(task, mode, class, "valid"|"invalid")`` transitions. Already
        granted capabilities are left alone.
        """
        dep = apply_change(sb, change)
        report = []
        for key in sorted(self.deps.get(dep, ())):
            task, mode, cls = key
            now = conds_hold(self.certified[key].conds, sb.store.view)
            was = (mode, cls) in self.valid[task]
            if now and not was:
                self.valid[task].add((mode, cls))
                report.append((task, mode, cls, "valid"))
            elif was and not now:
                self.valid[task].discard((mode, cls))
                report.append((task, mode, cls, "invalid"))
        return report

    def valid_accesses(self, task: str) -> set:
        return set(self.valid.get(task, ()))

    def grant_for(self, instance: str) -> tuple[CapabilitySet, KvFilter]:
        entries, ops, keys = [], set(), set()
        for mode, cls in self.valid.get(instance, ()):
            entries.append(CapEntry(cls, mode.lower()))
            if cls in self._kv_keys:
                keys.add(self._kv_keys[cls])
                ops.add("GET" if mode == "R" else "PUT")
        return CapabilitySet(entries), KvFilter(frozenset(ops), frozenset(keys))

    # -- session lifecycle ------------------------------------------------------------

    def register(self, sb: Sandbox, task: str, instance: str, *, peer: str | None = None):
        """Bind ``task`` to ``instance`` and grant its valid accesses.

        With ``peer`` set (a worker registering), the query and reply pipes to
        the peer are created inside the same interception.
        """
        inst = self.instance(instance)
        if inst is None:
            self.registered[task] = RegisteredTask(task, None, Taint())
            sb.grant(task, CapabilitySet(), KvFilter())
            return None, self.intercept(sb, "register", task, instance, denied("unknown-instance"))
        taint = self.instance_taint(instance)
        self.registered[task] = RegisteredTask(task, instance, taint)
        caps, kv = self.grant_for(instance)
        sb.grant(task, caps, kv)
        pipes = None
        if peer is not None:
            pipes = self._pipes(sb, task, peer)
        return pipes, self.intercept(sb, "register", task, instance, ALLOWED)

    def _pipes(self, sb: Sandbox, worker: str, engine: str) -> SessionPipes | None:
        view = sb.store.view
        w, e = self.registered[worker], self.registered.get(engine)
        if e is None:
            return None
        w_inst, e_inst = self.instance(w.instance), self.instance(e.instance)
        ok = (
            check_write(w.taint, QUERY_PIPE_CLASS, QUERY_PIPE_POLICY, w.writer(w_inst, view.clock), view)
            and check_read(e.taint, QUERY_PIPE_CLASS, QUERY_PIPE_POLICY, view)
            and check_write(e.taint, REPLY_PIPE_CLASS, REPLY_PIPE_POLICY, e.writer(e_inst, view.clock), view)
        )
        if not ok:
            return None
        return self.make_pipes(sb, worker, engine, sb.session)

    def accept(self, sb: Sandbox, task: str) -> str:
        c = self.make_egress(sb, sb.session)
        self.intercept(sb, "accept", task, c.conduit_id, ALLOWED)
        return c.conduit_id

    def authenticate(self, sb: Sandbox, task: str, credential: str, region: str | None, egress_id: str) -> Verdict:
        rt = self.registered.get(task)
        inst = self.instance(rt.instance) if rt and rt.instance else None
        who = self.principal_of(credential)
        if inst is None or who is None or who != inst.principal:
            return self.intercept(sb, "authenticate", task, egress_id, denied("session-refused"))
        view = sb.store.view
        if region != inst.region:
            # withhold everything whose certification assumed the predicted region
            regional = [
                cls for cls in sb.task(task).caps.classes()
                if view.policies.get(cls) is not None and view.policies[cls].mentions_region()
            ]
            sb.grant(task, sb.task(task).caps.with_faults(regional))
            if inst.region is not None and region is not None:
                rt.taint = Taint.of(p.rebind_region(inst.region, region) for p in rt.taint.components)
            rt.region_mispredicted = True
            self.predictions.append((who, region))
        rt.session = SessionContext(who, region, view.clock)
        self.sessions[task] = rt.session
        pol = self.bind_egress(sb, egress_id, who, region)
        view = sb.store.view
        if not check_write(rt.taint, pol.name, pol, rt.session, view):
            return self.intercept(sb, "authenticate", task, egress_id, denied("egress-write-denied"))
        sb.install_handle(task, egress_id, "w")
        return self.intercept(sb, "authenticate", task, egress_id, ALLOWED)

    def reset(self, sb: Sandbox, task: str) -> None:
        sb.wipe(task)
        self.registered.pop(task, None)
        self.sessions.pop(task, None)
        self.reset_ticks[sb.session] += self.ticks.lwc_reset
        self.intercept(sb, "reset", task, "-", ALLOWED)

    def reregister(self, sb: Sandbox, task: str, new_instance: str) -> Verdict:
        """Raise a running task's taint by binding it to another instance."""
        rt = self.registered.get(task)
        inst = self.instance(new_instance)
        if rt is None or inst is None:
            return self.intercept(sb, "register", task, new_instance, denied("unknown-instance"))
        view = sb.store.view
        new_taint = self.instance_taint(new_instance)
        if not taint_dominates(new_taint, rt.taint, view):
            return self.intercept(sb, "register", task, new_instance, denied("taint-decrease"))
        for h in sb.task(task).handles.values():
            if "w" not in h.rights:
                continue
            c = sb.store.get(h.conduit_id)
            target = ConduitFacts(c.conduit_class, view.policies[c.conduit_class])
            if c.kind != "fdpipe" and not is_as_restr_with_declass(target, new_taint, view):
                return self.intercept(sb, "register", task, new_instance, denied("open-write-leak"))
        rt.instance, rt.taint = new_instance, new_taint
        caps, kv = self.grant_for(new_instance)
        sb.grant(task, caps, kv)
        return self.intercept(sb, "register", task, new_instance, ALLOWED)

    # -- slow path ----------------------------------------------------------------------

    def _ctx(self, task: str) -> tuple[Taint, SessionContext]:
        rt = self.registered.get(task)
        clock = 0
        if rt is None:
            return Taint(), SessionContext(None, None, clock)
        inst = self.instance(rt.instance) if rt.instance else None
        return rt.taint, rt.writer(inst, clock)

    def decide(self, sb: Sandbox, task: str, conduit_class: str, mode: str) -> Verdict:
        """The analyzer's check for one access, evaluated against live metadata."""
        view = sb.store.view
        policy = view.policies.get(conduit_class)
        if policy is None:
            return denied("no-policy")
        taint, writer = self._ctx(task)
        writer = SessionContext(writer.principal, writer.region, view.clock)
        if mode == "r":
            return ALLOWED if check_read(taint, conduit_class, policy, view) else denied("read-not-implied")
        if check_write(taint, conduit_class, policy, writer, view):
            return ALLOWED
        return denied(deny_reason_for_write(taint, conduit_class, policy, writer, view))

    def _patch(self, sb: Sandbox, task: str, cls: str, mode: str, v: Verdict) -> None:
        if v and self.patch_slowpath and task in sb.tasks:
            sb.grant(task, sb.task(task).caps.with_entry(cls, mode))

    def on_open(self, sb, task, conduit, mode) -> Verdict:
        v = self.decide(sb, task, conduit.conduit_class, mode)
        self._patch(sb, task, conduit.conduit_class, mode, v)
        return self.intercept(sb, "slow-path-open", task, conduit.conduit_id, v)

    def on_create(self, sb, task, conduit, policy) -> Verdict:
        view = sb.store.view
        if conduit.conduit_class not in view.policies:
            sb.store.view = view.with_policy(conduit.conduit_class, policy)
        v = self.decide(sb, task, conduit.conduit_class, "w")
        if not v and conduit.conduit_class not in view.policies:
            sb.store.view = view
        return self.intercept(sb, "slow-path-open", task, conduit.conduit_id, v)

    def on_transfer(self, sb, sender, receiver, conduit, pipe) -> Verdict:
        v = self.decide(sb, receiver, conduit.conduit_class, "r")
        if not v:
            v = denied("no-receiver-capability")
        self._patch(sb, receiver, conduit.conduit_class, "r", v)
        return self.intercept(sb, "slow-path-open", receiver, conduit.conduit_id, v)

    def on_kv(self, sb, task, conduit, op) -> Verdict:
        v = self.decide(sb, task, conduit.conduit_class, "r" if op == "GET" else "w")
        return self.intercept(sb, "slow-path-open", task, conduit.conduit_id, v)


__all__ = [
    "BaselineMonitor",
    "INTERCEPTION_KINDS",
    "Interception",
    "MonitorBase",
    "QUERY_PIPE_POLICY",
    "REPLY_PIPE_POLICY",
    "ReferenceMonitor",
    "RegisteredTask",
    "SessionPipes",
    "TickCosts",
    "apply_change",
    "credential_for",
    "egress_class",
    "egress_policy",
]
