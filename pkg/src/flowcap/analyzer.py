"""Offline analysis: certify expected accesses ahead of time.

Conduit classes that share a structurally identical policy are analyzed once
and the verdict is fanned out to every member class. Certified accesses are
then compiled into per-task capability groups (the analog of link
directories) and persisted in a line-oriented text format.
"""

from __future__ import annotations

import fnmatch
import hashlib
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from flowcap.policy import MetadataView, MetaList, Policy, SessionContext, Taint
from flowcap.restrict import (
    CheckResult,
    PolicyEquals,
    check_read,
    check_write,
    parse_cond,
)

OA_VERSION = "oa-v1"


class ManifestError(ValueError):
    pass


class OAFormatError(ValueError):
    def __init__(self, msg: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConduitClass:
    class_id: str
    policy_name: str
    members: str = "*"

    def matches(self, conduit_id: str) -> bool:
        return fnmatch.fnmatchcase(conduit_id, self.members)


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    principal: str | None
    region: str | None
    taint_names: tuple
    expected_reads: tuple = ()
    expected_writes: tuple = ()
    active: bool = True

    def session(self, clock: int = 0) -> SessionContext:
        return SessionContext(self.principal, self.region, clock)


@dataclass
class Manifest:
    tasks: dict = field(default_factory=dict)  # task id -> TaskInstance
    classes: dict = field(default_factory=dict)  # class id -> ConduitClass

    def taint_of(self, task_id: str, policies: Mapping[str, Policy]) -> Taint:
        return Taint.of(policies[n] for n in self.tasks[task_id].taint_names)

    def class_policies(self, policies: Mapping[str, Policy]) -> dict:
        return {cid: policies[c.policy_name] for cid, c in self.classes.items()}

    def class_of(self, conduit_id: str) -> str | None:
        for cid in sorted(self.classes):
            if self.classes[cid].matches(conduit_id):
                return cid
        return None

    def validate(self, policies: Mapping[str, Policy]) -> None:
        for c in self.classes.values():
            if c.policy_name not in policies:
                raise ManifestError(f"class {c.class_id}: unknown policy {c.policy_name!r}")
        for t in self.tasks.values():
            for n in t.taint_names:
                if n not in policies:
                    raise ManifestError(f"task {t.task_id}: unknown taint policy {n!r}")
            for cid in t.expected_reads + t.expected_writes:
                if cid not in self.classes:
                    raise ManifestError(f"task {t.task_id}: unknown conduit class {cid!r}")


def _kv(parts: list[str], lineno: int) -> dict:
    out = {}
    for p in parts:
        k, eq, v = p.partition("=")
        if not eq:
            raise ManifestError(f"line {lineno}: expected key=value, got {p!r}")
        out[k] = v
    return out


def parse_manifest(text: str) -> Manifest:
    tasks: dict = {}
    classes: dict = {}
    reads: dict = defaultdict(list)
    writes: dict = defaultdict(list)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        head = parts[0]
        if head == "task" and len(parts) >= 2:
            kv = _kv(parts[2:], lineno)
            if "taint" not in kv:
                raise ManifestError(f"line {lineno}: task without taint")
            user = kv.get("user", "-")
            region = kv.get("region", "-")
            tasks[parts[1]] = TaskInstance(
                parts[1],
                None if user == "-" else user,
                None if region == "-" else region,
                tuple(n for n in kv["taint"].split(",") if n),
                active=kv.get("active", "1") != "0",
            )
        elif head in ("reads", "writes") and len(parts) == 3:
            (reads if head == "reads" else writes)[parts[1]].append(parts[2])
        elif head == "class" and len(parts) >= 2:
            kv = _kv(parts[2:], lineno)
            if "policy" not in kv:
                raise ManifestError(f"line {lineno}: class without policy")
            classes[parts[1]] = ConduitClass(parts[1], kv["policy"], kv.get("members", "*"))
        else:
            raise ManifestError(f"line {lineno}: cannot parse {raw!r}")
    for tid in set(reads) | set(writes):
        if tid not in tasks:
            raise ManifestError(f"access entry for unknown task {tid!r}")
    for tid, t in list(tasks.items()):
        tasks[tid] = replace(
            t,
            expected_reads=tuple(dict.fromkeys(reads.get(tid, ()))),
            expected_writes=tuple(dict.fromkeys(writes.get(tid, ()))),
        )
    return Manifest(tasks, classes)


def format_manifest(m: Manifest) -> str:
    lines = []
    for cid in sorted(m.classes):
        c = m.classes[cid]
        lines.append(f"class {cid} policy={c.policy_name} members={c.members}")
    for tid in sorted(m.tasks):
        t = m.tasks[tid]
        flag = "" if t.active else " active=0"
        lines.append(
            f"task {tid} user={t.principal or '-'} region={t.region or '-'} "
            f"taint={','.join(t.taint_names)}{flag}"
        )
    for tid in sorted(m.tasks):
        t = m.tasks[tid]
        lines.extend(f"reads {tid} {c}" for c in t.expected_reads)
        lines.extend(f"writes {tid} {c}" for c in t.expected_writes)
    return "\n".join(lines) + "\n"


def parse_metadata(text: str) -> tuple[dict, int]:
    """Returns (lists, clock) from ``clock <t>`` / ``list <id> <updated> <e,e|->`` lines."""
    lists: dict = {}
    clock = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "clock" and len(parts) == 2:
                clock = int(parts[1])
            elif parts[0] == "list" and len(parts) == 4:
                entries = frozenset() if parts[3] == "-" else frozenset(parts[3].split(","))
                lists[parts[1]] = MetaList(parts[1], entries, int(parts[2]))
            else:
                raise ValueError
        except ValueError:
            raise ManifestError(f"metadata line {lineno}: cannot parse {raw!r}") from None
    return lists, clock


def format_metadata(lists: Mapping[str, MetaList], clock: int) -> str:
    lines = [f"clock {clock}"]
    for lid in sorted(lists):
        ml = lists[lid]
        entries = ",".join(sorted(ml.entries)) or "-"
        lines.append(f"list {lid} {ml.last_updated} {entries}")
    return "\n".join(lines) + "\n"


def build_view(manifest: Manifest, policies: Mapping[str, Policy], metadata_text: str) -> MetadataView:
    lists, clock = parse_metadata(metadata_text)
    return MetadataView(manifest.class_policies(policies), lists, clock)


def apply_predictions(manifest: Manifest, predictions: Iterable[tuple[str, str]], policies: dict) -> Manifest:
    """Add worker instances for (user, region) pairs observed at runtime.

    New instances clone an existing instance of the same user with the
    region parameter rebound; rebound taint policies are added to
    ``policies`` under derived names.
    """
    tasks = dict(manifest.tasks)
    for user, region in sorted(set(predictions)):
        base = next((t for t in sorted(tasks.values(), key=lambda t: t.task_id) if t.principal == user), None)
        if base is None or base.region is None:
            continue
        new_id = f"{base.task_id.split('@')[0]}@{region}"
        if new_id in tasks:
            continue
        names = []
        for n in base.taint_names:
            rebound = policies[n].rebind_region(base.region, region)
            new_name = f"{n.split('@')[0]}@{region}"
            policies[new_name] = replace(rebound, name=new_name)
            names.append(new_name)
        tasks[new_id] = replace(base, task_id=new_id, region=region, taint_names=tuple(names))
    return Manifest(tasks, dict(manifest.classes))


# ---------------------------------------------------------------------------
# Outputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CertifiedAccess:
    mode: str  # "R" or "W"
    task: str
    conduit_class: str
    conds: frozenset = frozenset()

    def render(self) -> str:
        cs = " ".join(sorted(c.render() for c in self.conds))
        return f"{self.mode} {self.task} {self.conduit_class}" + (f" {cs}" if cs else "")

    def __lt__(self, other: "CertifiedAccess") -> bool:  # conds are not orderable
        return (self.task, self.mode, self.conduit_class) < (other.task, other.mode, other.conduit_class)


@dataclass
class OAOutput:
    certified: list = field(default_factory=list)
    policy_snapshot: dict = field(default_factory=dict)  # conduit class -> class id (hash)
    generated_at: int = 0
    checks: int = 0  # kernel invocations, not persisted

    def for_task(self, task: str) -> list:
        return [c for c in self.certified if c.task == task]

    def body(self) -> str:
        lines = [f"P {cls} {h}" for cls, h in sorted(self.policy_snapshot.items())]
        lines += [c.render() for c in self.certified]
        return "".join(line + "\n" for line in lines)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, OAOutput):
            return NotImplemented
        return (
            self.certified == other.certified
            and self.policy_snapshot == other.policy_snapshot
            and self.generated_at == other.generated_at
        )


def dedup_by_policy_class(class_policies: Mapping[str, Policy]) -> dict:
    """Partition conduit classes by policy hash: hash -> sorted member classes."""
    groups: dict = defaultdict(list)
    for cid in sorted(class_policies):
        groups[class_policies[cid].class_id].append(cid)
    return {h: tuple(m) for h, m in sorted(groups.items())}


def _fan_out(mode: str, task: str, res: CheckResult, members: Iterable[str], h: str, rep: str) -> list:
    base = frozenset(c for c in res.conds if not (isinstance(c, PolicyEquals) and c.conduit_class == rep))
    return [CertifiedAccess(mode, task, m, base | {PolicyEquals(m, h)}) for m in members]


def _analyze_task(args) -> tuple[list, int]:
    task, taint, class_policies, view = args
    out: list = []
    checks = 0
    for mode, wanted in (("R", task.expected_reads), ("W", task.expected_writes)):
        by_hash: dict = defaultdict(list)
        for cid in wanted:
            by_hash[class_policies[cid].class_id].append(cid)
        for h in sorted(by_hash):
            members = sorted(by_hash[h])
            rep = members[0]
            pol = class_policies[rep]
            checks += 1
            if mode == "R":
                res = check_read(taint, rep, pol, view)
            else:
                res = check_write(taint, rep, pol, task.session(view.clock), view)
            if res.okay:
                out.extend(_fan_out(mode, task.task_id, res, members, h, rep))
    return out, checks


def run_oa(
    manifest: Manifest,
    policies: Mapping[str, Policy],
    view: MetadataView,
    *,
    parallel: int = 1,
    active_only: bool = False,
    generated_at: int | None = None,
) -> OAOutput:
    """Certify every expected read and write of every (active) task instance."""
    manifest.validate(policies)
    class_policies = manifest.class_policies(policies)
    tasks = [manifest.tasks[t] for t in sorted(manifest.tasks)]
    if active_only:
        tasks = [t for t in tasks if t.active]
    jobs = [(t, manifest.taint_of(t.task_id, policies), class_policies, view) for t in tasks]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_analyze_task, jobs, chunksize=max(1, len(jobs) // (4 * parallel))))
    else:
        results = [_analyze_task(j) for j in jobs]
    certified = sorted(c for part, _ in results for c in part)
    referenced = {c.conduit_class for c in certified}
    snapshot = {cid: class_policies[cid].class_id for cid in sorted(referenced)}
    return OAOutput(
        certified,
        snapshot,
        view.clock if generated_at is None else generated_at,
        checks=sum(n for _, n in results),
    )


# ---------------------------------------------------------------------------
# Capability compilation
# ---------------------------------------------------------------------------


def _signature(conds: Iterable) -> tuple:
    sig = set()
    for c in conds:
        if isinstance(c, PolicyEquals):
            continue
        kind = c.render().split(":", 1)[0]
        sig.add(f"{kind}:{c.list_id.split('.')[0]}")
    return tuple(sorted(sig))


@dataclass(frozen=True)
class CapabilityGroup:
    """One granted capability covering many conduit classes.

    Every member keeps its own state conditions, so invalidating one member
    never over-grants the others.
    """

    group_id: str
    rights: str  # "r", "w" or "rw"
    signature: tuple
    members: tuple  # ((conduit class, conds), ...) sorted by class

    @property
    def classes(self) -> tuple:
        return tuple(m for m, _ in self.members)

    @property
    def conds(self) -> frozenset:
        return frozenset(c for _, cs in self.members for c in cs)


@dataclass(frozen=True)
class CapabilityBlueprint:
    task: str
    groups: tuple = ()

    def accesses(self) -> set:
        out = set()
        for g in self.groups:
            for cls, _ in g.members:
                for r in g.rights:
                    out.add(("R" if r == "r" else "W", cls))
        return out


def compile_capabilities(out: OAOutput) -> dict:
    """Group each task's certified accesses by rights and condition shape."""
    per_task: dict = defaultdict(lambda: defaultdict(dict))
    for ca in out.certified:
        per_task[ca.task][ca.conduit_class][ca.mode] = ca.conds
    blueprints = {}
    for task in sorted(per_task):
        buckets: dict = defaultdict(list)
        for cls in sorted(per_task[task]):
            modes = per_task[task][cls]
            r, w = modes.get("R"), modes.get("W")
            if r is not None and w is not None and _signature(r) == _signature(w):
                buckets[("rw", _signature(r))].append((cls, frozenset(r | w)))
            else:
                if r is not None:
                    buckets[("r", _signature(r))].append((cls, r))
                if w is not None:
                    buckets[("w", _signature(w))].append((cls, w))
        groups = []
        for i, key in enumerate(sorted(buckets)):
            rights, sig = key
            groups.append(CapabilityGroup(f"{task}/g{i}", rights, sig, tuple(buckets[key])))
        blueprints[task] = CapabilityBlueprint(task, tuple(groups))
    return blueprints


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _checksum(body: str) -> str:
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def dumps_oa(out: OAOutput) -> str:
    body = out.body()
    return f"{OA_VERSION} {out.generated_at} {_checksum(body)}\n{body}"


def persist_oa(out: OAOutput, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_oa(out))


def loads_oa(text: str) -> OAOutput:
    lines = text.split("\n")
    if not lines or not lines[0].strip():
        raise OAFormatError("empty file", 1)
    header = lines[0].split()
    if len(header) != 3:
        raise OAFormatError("malformed header", 1)
    if header[0] != OA_VERSION:
        raise OAFormatError(f"version mismatch: {header[0]!r} != {OA_VERSION!r}", 1)
    try:
        generated_at = int(header[1])
    except ValueError:
        raise OAFormatError("malformed timestamp in header", 1) from None
    body_lines = lines[1:]
    if body_lines and body_lines[-1] == "":
        body_lines = body_lines[:-1]
    elif body_lines:
        raise OAFormatError("truncated file: missing final newline", len(lines))
    snapshot: dict = {}
    certified = []
    for i, line in enumerate(body_lines, 2):
        parts = line.split(" ")
        if parts[0] == "P" and len(parts) == 3 and all(parts):
            snapshot[parts[1]] = parts[2]
        elif parts[0] in ("R", "W") and len(parts) >= 3 and all(parts):
            try:
                conds = frozenset(parse_cond(c) for c in parts[3:])
            except ValueError as e:
                raise OAFormatError(str(e), i) from None
            certified.append(CertifiedAccess(parts[0], parts[1], parts[2], conds))
        else:
            raise OAFormatError(f"malformed record {line!r}", i)
    body = "".join(line + "\n" for line in body_lines)
    if _checksum(body) != header[2]:
        raise OAFormatError("checksum failure (truncated or altered file)")
    for c in certified:
        if c.conduit_class not in snapshot:
            raise OAFormatError(f"class {c.conduit_class!r} has no snapshot entry")
    return OAOutput(certified, snapshot, generated_at)


def load_oa(path) -> OAOutput:
    with open(path, encoding="utf-8", newline="") as fh:
        return loads_oa(fh.read())


def format_blueprints(blueprints: Mapping[str, CapabilityBlueprint]) -> str:
    lines = ["caps-v1"]
    for task in sorted(blueprints):
        for g in blueprints[task].groups:
            lines.append(f"G {g.group_id} {g.rights} {','.join(g.signature) or '-'} {','.join(g.classes)}")
    return "\n".join(lines) + "\n"


__all__ = [
    "CapabilityBlueprint",
    "CapabilityGroup",
    "CertifiedAccess",
    "ConduitClass",
    "Manifest",
    "ManifestError",
    "OAFormatError",
    "OAOutput",
    "TaskInstance",
    "apply_predictions",
    "build_view",
    "compile_capabilities",
    "dedup_by_policy_class",
    "dumps_oa",
    "format_blueprints",
    "format_manifest",
    "format_metadata",
    "load_oa",
    "loads_oa",
    "parse_manifest",
    "parse_metadata",
    "persist_oa",
    "run_oa",
]
