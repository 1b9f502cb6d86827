"""Purely dynamic taint tracking, the comparison point for the hybrid monitor.

Reads are never blocked. They are logged and folded into the task's taint
at its next write, and every write is checked against the folded taint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from flowcap.analyzer import Manifest
from flowcap.policy import Policy, SessionContext, Taint
from flowcap.monitor import MonitorBase, TickCosts
from flowcap.restrict import ConduitFacts, check_read, is_as_restr_with_declass, policy_eval
from flowcap.sandbox import ALLOWED, Sandbox, Verdict, denied


@dataclass
class DynTaskState:
    taint: Taint = field(default_factory=Taint)
    open_log: list = field(default_factory=list)  # conduit classes read since the last fold
    ceiling: Taint = field(default_factory=Taint)  # what the task's user may see
    writer: SessionContext = field(default_factory=lambda: SessionContext(None))

    def fold(self, policies: Mapping[str, Policy]) -> Taint:
        """Conjoin logged reads into the taint; idempotent and order-free."""
        if self.open_log:
            self.taint = self.taint.join(*(policies[c] for c in self.open_log))
            self.open_log = []
        return self.taint


class DynamicMonitor(MonitorBase):
    name = "dynamic"
    checks_every_transfer = True

    def __init__(self, manifest: Manifest, policies: Mapping[str, Policy], *, ticks: TickCosts = TickCosts()) -> None:
        super().__init__(manifest, policies, ticks=ticks)
        self.state: dict = {}
        self._verdicts: dict = {}
        self._verdicts_view = None

    # -- lifecycle ---------------------------------------------------------

    def register(self, sb: Sandbox, task: str, instance: str, *, peer: str | None = None):
        """Record who the task works for; not an interception in this scheme."""
        inst = self.instance(instance)
        st = DynTaskState()
        if inst is not None:
            st.ceiling = self.instance_taint(instance)
            st.writer = inst.session(sb.store.view.clock)
        self.state[task] = st
        pipes = self.make_pipes(sb, task, peer, sb.session) if peer else None
        return pipes, ALLOWED

    def accept(self, sb: Sandbox, task: str) -> str:
        c = self.make_egress(sb, sb.session)
        self.intercept(sb, "accept", task, c.conduit_id, ALLOWED)
        return c.conduit_id

    def authenticate(self, sb: Sandbox, task: str, credential: str, region, egress_id: str) -> Verdict:
        st = self.state.get(task)
        inst_principal = st.writer.principal if st else None
        who = self.principal_of(credential)
        if st is None or who is None or who != inst_principal:
            return self.intercept(sb, "authenticate", task, egress_id, denied("session-refused"))
        old_region = st.writer.region
        if old_region is not None and region is not None and region != old_region:
            st.ceiling = Taint.of(p.rebind_region(old_region, region) for p in st.ceiling.components)
        st.writer = SessionContext(who, region, sb.store.view.clock)
        self.sessions[task] = st.writer
        self.bind_egress(sb, egress_id, who, region)
        sb.install_handle(task, egress_id, "w")
        return self.intercept(sb, "authenticate", task, egress_id, ALLOWED)

    def reset(self, sb: Sandbox, task: str) -> None:
        """Tear down by re-exec: charged as a reset cost, not a monitor entry."""
        sb.wipe(task)
        self.state.pop(task, None)
        self.sessions.pop(task, None)
        self.reset_ticks[sb.session] += self.ticks.exec_reset

    # -- checks --------------------------------------------------------------

    def _state(self, task: str) -> DynTaskState:
        return self.state.setdefault(task, DynTaskState())

    def write_verdict(self, sb: Sandbox, task: str, conduit_class: str) -> Verdict:
        view = sb.store.view
        st = self._state(task)
        taint = st.fold(view.policies)
        policy = view.policies.get(conduit_class)
        if policy is None:
            return denied("no-policy")
        writer = SessionContext(st.writer.principal, st.writer.region, view.clock)
        if not all(self._component_ok(c, conduit_class, policy, view) for c in taint.components):
            return denied("declass-failed")
        if not policy_eval(policy.update, writer, view):
            return denied("update-rule-failed")
        return ALLOWED

    def _component_ok(self, comp: Policy, cls: str, policy: Policy, view) -> bool:
        # A taint is a conjunction, so the write check splits per component;
        # memoizing per component keeps long-lived, heavily tainted tasks cheap.
        # keys carry policy hashes, so only list contents and the clock can
        # change a verdict
        stamp = (view.lists, view.clock)
        if self._verdicts_view is None or stamp[0] is not self._verdicts_view[0] or stamp[1] != self._verdicts_view[1]:
            self._verdicts = {}
            self._verdicts_view = stamp
        key = (comp.class_id, cls, policy.class_id)
        hit = self._verdicts.get(key)
        if hit is None:
            hit = bool(is_as_restr_with_declass(ConduitFacts(cls, policy), Taint((comp,)), view))
            self._verdicts[key] = hit
        return hit

    def on_open(self, sb, task, conduit, mode) -> Verdict:
        if mode == "r":
            return ALLOWED  # logged when data is actually read
        v = self.write_verdict(sb, task, conduit.conduit_class)
        return self.intercept(sb, "write-check", task, conduit.conduit_id, v)

    def on_create(self, sb, task, conduit, policy) -> Verdict:
        view = sb.store.view
        added = conduit.conduit_class not in view.policies
        if added:
            sb.store.view = view.with_policy(conduit.conduit_class, policy)
        v = self.write_verdict(sb, task, conduit.conduit_class)
        if not v and added:
            sb.store.view = view
        return self.intercept(sb, "write-check", task, conduit.conduit_id, v)

    def on_read(self, sb, task, conduit) -> None:
        self._state(task).open_log.append(conduit.conduit_class)

    def on_write(self, sb, task, conduit) -> Verdict:
        v = self.write_verdict(sb, task, conduit.conduit_class)
        return self.intercept(sb, "write-check", task, conduit.conduit_id, v)

    def on_transfer(self, sb, sender, receiver, conduit, pipe) -> Verdict:
        """A descriptor send is a write by the sender into the pipe.

        The receiver's ceiling must also admit the referenced conduit, so the
        descriptor never reaches a task whose user may not read it.
        """
        v = self.write_verdict(sb, sender, pipe.conduit_class)
        if v:
            view = sb.store.view
            ceiling = self._state(receiver).ceiling
            if not check_read(ceiling, conduit.conduit_class, view.policies[conduit.conduit_class], view):
                v = denied("no-receiver-capability")
        return self.intercept(sb, "write-check", sender, conduit.conduit_id, v)

    def on_kv(self, sb, task, conduit, op) -> Verdict:
        if op == "GET":
            return ALLOWED
        v = self.write_verdict(sb, task, conduit.conduit_class)
        return self.intercept(sb, "write-check", task, conduit.conduit_id, v)


__all__ = ["DynTaskState", "DynamicMonitor"]
