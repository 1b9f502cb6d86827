"""Simulated capability sandbox.

Every conduit access goes through :meth:`Sandbox.syscall`. An access is
decided either by the task's capability set (fast path) or by the active
monitor (slow path); there is no third route. The sandbox also keeps shadow
provenance tags that the monitors never see, used to detect leaks end to end.
"""

from __future__ import annotations

import itertools
from bisect import bisect_left
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable

from flowcap.policy import MetadataView, Policy

KINDS = ("ingress", "internal", "egress", "fdpipe")
RIGHTS = ("r", "w", "rw")


@dataclass(frozen=True)
class Verdict:
    allow: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.allow


ALLOWED = Verdict(True)


def denied(reason: str) -> Verdict:
    return Verdict(False, reason)


# ---------------------------------------------------------------------------
# Conduits
# ---------------------------------------------------------------------------


@dataclass
class Conduit:
    conduit_id: str
    kind: str
    conduit_class: str
    versions: list = field(default_factory=list)
    tags: list = field(default_factory=list)  # provenance per version, shadow only

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown conduit kind {self.kind!r}")

    def append(self, content: str, tag: frozenset) -> int:
        """Add a new immutable version; returns its index."""
        self.versions.append(content)
        self.tags.append(tag)
        return len(self.versions) - 1

    @property
    def content(self) -> str:
        return "".join(self.versions)

    @property
    def provenance(self) -> frozenset:
        return frozenset().union(*self.tags) if self.tags else frozenset()


class ConduitStore:
    """All conduits plus the authoritative metadata view."""

    def __init__(self, view: MetadataView | None = None, principals=(), regions=()) -> None:
        self.conduits: dict = {}
        self.view = view or MetadataView()
        self.principals = tuple(principals)
        self.regions = tuple(regions)

    def add(self, c: Conduit, policy: Policy | None = None) -> Conduit:
        if c.conduit_id in self.conduits:
            raise ValueError(f"conduit {c.conduit_id!r} exists")
        self.conduits[c.conduit_id] = c
        if policy is not None:
            self.view = self.view.with_policy(c.conduit_class, policy)
        return c

    def get(self, conduit_id: str) -> Conduit:
        return self.conduits[conduit_id]

    def policy_of(self, conduit_id: str) -> Policy:
        return self.view.policies[self.conduits[conduit_id].conduit_class]

    def __contains__(self, conduit_id: str) -> bool:
        return conduit_id in self.conduits


# ---------------------------------------------------------------------------
# Capabilities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CapEntry:
    conduit_class: str
    rights: str
    fault: bool = False  # present but withheld: accesses fault to the monitor


class CapabilitySet:
    """Immutable sorted capability entries with an instrumented binary search."""

    def __init__(self, entries=()) -> None:
        merged: dict = {}
        for e in entries:
            prev = merged.get(e.conduit_class)
            if prev is not None:
                rights = "".join(r for r in "rw" if r in prev.rights + e.rights)
                e = CapEntry(e.conduit_class, rights, prev.fault and e.fault)
            merged[e.conduit_class] = e
        self.entries = tuple(merged[k] for k in sorted(merged))
        self._keys = tuple(e.conduit_class for e in self.entries)
        self.last_ops = 0

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, conduit_class: str, right: str) -> str:
        """Returns "hit", "fault" or "miss"; ``last_ops`` records comparisons."""
        lo, hi, ops = 0, len(self._keys), 0
        while lo < hi:
            mid = (lo + hi) // 2
            ops += 1
            if self._keys[mid] < conduit_class:
                lo = mid + 1
            else:
                hi = mid
        # the equality test reuses the element the search converged on, so it
        # is not counted as another probe
        self.last_ops = ops
        if lo < len(self._keys) and self._keys[lo] == conduit_class:
            e = self.entries[lo]
            if right not in e.rights:
                return "miss"
            return "fault" if e.fault else "hit"
        return "miss"

    def with_faults(self, classes) -> "CapabilitySet":
        classes = set(classes)
        return CapabilitySet(
            CapEntry(e.conduit_class, e.rights, e.fault or e.conduit_class in classes)
            for e in self.entries
        )

    def with_entry(self, conduit_class: str, rights: str) -> "CapabilitySet":
        kept = [e for e in self.entries if e.conduit_class != conduit_class or not e.fault]
        i = bisect_left(self._keys, conduit_class)
        if i < len(self._keys) and self._keys[i] == conduit_class and not self.entries[i].fault:
            rights = self.entries[i].rights + rights
        return CapabilitySet(kept + [CapEntry(conduit_class, "".join(r for r in "rw" if r in rights))])

    def classes(self) -> tuple:
        return self._keys


EMPTY_CAPS = CapabilitySet()


@dataclass(frozen=True)
class KvFilter:
    ops: frozenset = frozenset()
    keys: frozenset = frozenset()  # exact keys or prefixes ending in "*"

    def allows(self, op: str, key: str) -> bool:
        if op not in self.ops:
            return False
        if key in self.keys:
            return True
        return any(k.endswith("*") and key.startswith(k[:-1]) for k in self.keys)


NO_KV = KvFilter()


@dataclass(frozen=True)
class Handle:
    hid: int
    conduit_id: str
    rights: str
    owner: str


@dataclass
class SandboxTask:
    name: str
    caps: CapabilitySet = EMPTY_CAPS
    kv: KvFilter = NO_KV
    handles: dict = field(default_factory=dict)
    prov: set = field(default_factory=set)
    inbox: list = field(default_factory=list)  # received descriptors not yet claimed


@dataclass(frozen=True)
class AccessRecord:
    session: str
    task: str
    op: str
    conduit: str
    decision: str

    def data_plane(self) -> tuple:
        return (self.session, self.op, self.conduit, self.decision)


# ---------------------------------------------------------------------------
# The sandbox
# ---------------------------------------------------------------------------


class Sandbox:
    """Capability-checked access to a :class:`ConduitStore`.

    ``monitor`` must implement the hook methods used below (see
    :class:`flowcap.monitor.MonitorBase`). With ``enforce=False`` nothing is
    checked, which models an unprotected pipeline.
    """

    OPS = ("open", "create", "read", "write", "transfer", "recv", "kv")

    def __init__(self, store: ConduitStore, monitor=None, *, enforce: bool = True) -> None:
        self.store = store
        self.monitor = monitor
        self.enforce = enforce
        self.tasks: dict = {}
        self.session = "setup"
        self.log: list = []
        self.stats: dict = defaultdict(Counter)
        self.leaks: list = []
        self.kv_values: dict = {}
        self._hids = itertools.count(1)
        self.egress_observer: Callable | None = None
        self.max_lookup_ops = 0

    # -- task management (driven by the monitor) -----------------------------

    def spawn(self, name: str) -> SandboxTask:
        t = SandboxTask(name)
        self.tasks[name] = t
        return t

    def task(self, name: str) -> SandboxTask:
        return self.tasks[name]

    def grant(self, name: str, caps: CapabilitySet, kv: KvFilter | None = None) -> None:
        t = self.tasks[name]
        t.caps = caps
        if kv is not None:
            t.kv = kv

    def install_handle(self, name: str, conduit_id: str, rights: str) -> Handle:
        h = Handle(next(self._hids), conduit_id, rights, name)
        self.tasks[name].handles[h.hid] = h
        return h

    def wipe(self, name: str) -> None:
        """Drop everything a task holds (session reset)."""
        self.tasks[name] = SandboxTask(name)

    def create_conduit(self, conduit_id: str, kind: str, conduit_class: str, policy: Policy | None):
        return self.store.add(Conduit(conduit_id, kind, conduit_class), policy)

    # -- bookkeeping --------------------------------------------------------

    def _record(self, task: str, op: str, conduit: str, v: Verdict) -> Verdict:
        self.log.append(AccessRecord(self.session, task, op, conduit, "allow" if v else "deny"))
        if not v:
            self.stats[self.session]["denials"] += 1
        return v

    def _fast(self) -> None:
        self.stats[self.session]["fastpath"] += 1

    def _lookup(self, t: SandboxTask, cls: str, right: str) -> str:
        status = t.caps.lookup(cls, right)
        self.max_lookup_ops = max(self.max_lookup_ops, t.caps.last_ops)
        return status

    # -- single entry point -------------------------------------------------

    def syscall(self, task: str, op: str, *args):
        if op not in self.OPS:
            raise ValueError(f"unknown operation {op!r}")
        if task not in self.tasks:
            raise KeyError(f"unknown task {task!r}")
        return getattr(self, f"_sys_{op}")(self.tasks[task], *args)

    def open(self, task: str, conduit_id: str, mode: str):
        return self.syscall(task, "open", conduit_id, mode)

    def create(self, task: str, conduit_id: str, kind: str, conduit_class: str, policy=None):
        return self.syscall(task, "create", conduit_id, kind, conduit_class, policy)

    def read(self, task: str, handle: Handle):
        return self.syscall(task, "read", handle)

    def write(self, task: str, handle: Handle, data: str):
        return self.syscall(task, "write", handle, data)

    def transfer(self, sender: str, handle: Handle, pipe: Handle, receiver: str):
        return self.syscall(sender, "transfer", handle, pipe, receiver)

    def recv(self, task: str, pipe: Handle):
        return self.syscall(task, "recv", pipe)

    def kv(self, task: str, op: str, key: str, value: str | None = None):
        return self.syscall(task, "kv", op, key, value)

    # -- operations ----------------------------------------------------------

    def _sys_open(self, t: SandboxTask, conduit_id: str, mode: str):
        if conduit_id not in self.store:
            return self._record(t.name, f"open-{mode}", conduit_id, denied("no-such-conduit"))
        c = self.store.get(conduit_id)
        if not self.enforce:
            v = ALLOWED
        elif c.kind == "fdpipe":
            v = denied("fd-only-pipe")
        else:
            status = self._lookup(t, c.conduit_class, mode)
            if status == "hit":
                self._fast()
                v = ALLOWED
            else:
                v = self.monitor.on_open(self, t.name, c, mode)
        self._record(t.name, f"open-{mode}", conduit_id, v)
        if not v:
            return v
        return self.install_handle(t.name, conduit_id, mode)

    def _sys_create(self, t: SandboxTask, conduit_id: str, kind: str, conduit_class: str, policy):
        if conduit_id in self.store:
            return self._record(t.name, "create", conduit_id, denied("exists"))
        if policy is None:
            policy = self.store.view.policies.get(conduit_class)
        if policy is None:
            return self._record(t.name, "create", conduit_id, denied("no-policy"))
        c = Conduit(conduit_id, kind, conduit_class)
        v = ALLOWED if not self.enforce else self.monitor.on_create(self, t.name, c, policy)
        self._record(t.name, "create", conduit_id, v)
        if not v:
            return v
        self.store.add(c, policy if conduit_class not in self.store.view.policies else None)
        return self.install_handle(t.name, conduit_id, "w")

    def _owned(self, t: SandboxTask, h: Handle, right: str) -> bool:
        return t.handles.get(h.hid) == h and right in h.rights

    def _sys_read(self, t: SandboxTask, h: Handle):
        c = self.store.get(h.conduit_id)
        if not self._owned(t, h, "r"):
            return self._record(t.name, "read", c.conduit_id, denied("no-handle"))
        if self.enforce and c.kind == "fdpipe":
            return self._record(t.name, "read", c.conduit_id, denied("fd-only-pipe"))
        if self.enforce:
            self.monitor.on_read(self, t.name, c)
        self._record(t.name, "read", c.conduit_id, ALLOWED)
        t.prov |= c.provenance
        if c.kind == "ingress":
            t.prov.add(c.conduit_id)
        return c.content

    def _sys_write(self, t: SandboxTask, h: Handle, data: str):
        c = self.store.get(h.conduit_id)
        if not self._owned(t, h, "w"):
            return self._record(t.name, "write", c.conduit_id, denied("no-handle"))
        if self.enforce and c.kind == "fdpipe":
            self.stats[self.session]["blocked_leaks"] += 1
            return self._record(t.name, "write", c.conduit_id, denied("fd-only-pipe"))
        v = ALLOWED
        if self.enforce:
            hook = self.monitor.on_write(self, t.name, c)
            v = ALLOWED if hook is None else hook
        self._record(t.name, "write", c.conduit_id, v)
        if v:
            tag = frozenset(t.prov)
            c.append(data, tag)
            if c.kind == "egress" and self.egress_observer is not None:
                self.egress_observer(self, t.name, c, tag)
        return v

    def _sys_transfer(self, t: SandboxTask, h: Handle, pipe: Handle, receiver: str):
        c = self.store.get(h.conduit_id)
        if not self._owned(t, h, "r") or not self._owned(t, pipe, "w"):
            return self._record(t.name, "transfer", c.conduit_id, denied("no-handle"))
        if not self.enforce:
            v = ALLOWED
        else:
            p = self.store.get(pipe.conduit_id)
            if p.kind != "fdpipe":
                v = denied("not-an-fd-pipe")
            else:
                r = self.tasks[receiver]
                status = self._lookup(r, c.conduit_class, "r")
                if status == "hit" and not self.monitor.checks_every_transfer:
                    self._fast()
                    v = ALLOWED
                else:
                    v = self.monitor.on_transfer(self, t.name, receiver, c, p)
        self._record(t.name, "transfer", c.conduit_id, v)
        if v:
            self.tasks[receiver].inbox.append(c.conduit_id)
        return v

    def _sys_recv(self, t: SandboxTask, pipe: Handle):
        """Claim every descriptor waiting for this task."""
        got = [self.install_handle(t.name, cid, "r") for cid in t.inbox]
        t.inbox = []
        return got

    def _sys_kv(self, t: SandboxTask, op: str, key: str, value: str | None):
        if op not in ("GET", "PUT"):
            raise ValueError(op)
        conduit_id = f"kv/{key}"
        if conduit_id not in self.store:
            return self._record(t.name, f"kv-{op.lower()}", conduit_id, denied("no-such-key"))
        c = self.store.get(conduit_id)
        if not self.enforce:
            v = ALLOWED
        elif t.kv.allows(op, key):
            self._fast()
            v = ALLOWED
        else:
            v = self.monitor.on_kv(self, t.name, c, op)
        self._record(t.name, f"kv-{op.lower()}", conduit_id, v)
        if not v:
            return v
        if op == "GET":
            if self.enforce:
                self.monitor.on_read(self, t.name, c)
            t.prov |= c.provenance
            t.prov.add(c.conduit_id)
            return c.content
        c.append(value or "", frozenset(t.prov))
        return v


__all__ = [
    "ALLOWED",
    "AccessRecord",
    "CapEntry",
    "CapabilitySet",
    "Conduit",
    "ConduitStore",
    "EMPTY_CAPS",
    "Handle",
    "KvFilter",
    "Sandbox",
    "SandboxTask",
    "Verdict",
    "denied",
]
