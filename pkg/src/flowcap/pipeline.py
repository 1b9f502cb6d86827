"""A small search pipeline: indexer, search engine and per-user workers.

Documents are public, private or shared with friends; a few public documents
are blacklisted in some regions. The engine answers queries by passing
descriptors over fd-only pipes; workers read snippets through the received
descriptors, fetch the user's profile from a KV store and write results to
the user's connection.
"""

from __future__ import annotations

import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from flowcap.analyzer import (
    ConduitClass,
    Manifest,
    OAOutput,
    TaskInstance,
    format_manifest,
    format_metadata,
    parse_manifest,
    parse_metadata,
)
from flowcap.dynamic import DynamicMonitor
from flowcap.lang import parse_policies, serialize_policies
from flowcap.monitor import BaselineMonitor, ReferenceMonitor, TickCosts, credential_for
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
    Policy,
    RegionIs,
    Rule,
    SessionContext,
    conj,
    eval_rule,
)
from flowcap.sandbox import Conduit, ConduitStore, Handle, Sandbox

MODES = ("baseline", "dynamic", "shai")
FAULTS = ("F1", "F2", "F3", "F4", "F5", "F6")

ENGINE = "engine"
INDEXER = "indexer"
LOGGER = "logger"
PUBLIC_LOG = "log/public"


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    users: int = 200
    friends_per_user: int = 100
    docs: int = 5000
    mix: tuple = (0.5, 0.3, 0.2)  # public, private, friends-only
    censored_fraction: float = 0.011
    regions: int = 3
    seed: int = 7
    vocab: int = 200
    doc_tokens: int = 30

    def effective_friends(self) -> int:
        return min(self.friends_per_user, self.users // 4)

    def validate(self) -> None:
        if len(self.mix) != 3 or any(m < 0 for m in self.mix) or abs(sum(self.mix) - 1) > 1e-9:
            raise CorpusError("mix proportions must be three non-negative numbers summing to 1")
        if self.users < 0 or self.docs < 0 or self.regions < 1:
            raise CorpusError("users and docs must be non-negative, regions positive")
        if not 0 <= self.censored_fraction <= self.mix[0]:
            raise CorpusError("censored fraction must lie within the public share")
        f = self.effective_friends()
        if f and f % 2 and self.users % 2:
            raise CorpusError(f"{self.users} users cannot each have an odd number ({f}) of friends")
        if self.docs and not self.users and sum(self.mix[1:]) > 0:
            raise CorpusError("private and friends-only documents need owners")


@dataclass(frozen=True)
class DocInfo:
    conduit_id: str
    kind: str  # public | censored | private | friends
    owner: str | None
    conduit_class: str
    tokens: tuple

    @property
    def content(self) -> str:
        return f"{self.conduit_id.rsplit('/', 1)[-1]} {' '.join(self.tokens[:6])}\n{' '.join(self.tokens)}\n"


FD_ESCAPE = Escape(frozenset({FdOnly()}), TRUE)


def _fd_policy(name: str, read: Rule, update: Rule) -> Policy:
    return Policy(read, update, DeclassRule.of([FD_ESCAPE]), name=name)


def censorship_rule(regions: Sequence[str], tag: str) -> Rule:
    """Readable from any region whose blacklist does not list ``tag``."""
    return Rule.of({RegionIs(r), ListLacks(f"blacklist.{r}", tag)} for r in regions)


@dataclass
class Corpus:
    spec: CorpusSpec
    users: tuple
    regions: tuple
    home: dict
    friends: dict
    blacklists: dict
    docs: dict  # conduit id -> DocInfo
    policies: dict  # policy name -> Policy
    manifest: Manifest
    lists: dict  # list id -> MetaList
    clock: int = 0

    def view(self) -> MetadataView:
        return MetadataView(self.manifest.class_policies(self.policies), dict(self.lists), self.clock)

    def docs_of_kind(self, kind: str) -> list:
        return [d for d in sorted(self.docs) if self.docs[d].kind == kind]

    def profile_id(self, user: str) -> str:
        return f"kv/profile/{user}"

    def token_ranking(self) -> list:
        freq = Counter(t for d in self.docs.values() for t in set(d.tokens))
        return [t for t, _ in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))]


def _friend_graph(users: list, f: int, rng: random.Random) -> dict:
    n = len(users)
    friends = {u: set() for u in users}
    if f == 0 or n == 0:
        return {u: frozenset() for u in users}
    if f >= n:
        raise CorpusError(f"{f} friends per user needs more than {n} users")
    order = users[:]
    rng.shuffle(order)
    for i, u in enumerate(order):
        for step in range(1, f // 2 + 1):
            v = order[(i + step) % n]
            friends[u].add(v)
            friends[v].add(u)
        if f % 2:
            v = order[(i + n // 2) % n]
            friends[u].add(v)
            friends[v].add(u)
    return {u: frozenset(s) for u, s in friends.items()}


def generate_corpus(spec: CorpusSpec = CorpusSpec()) -> Corpus:
    spec.validate()
    rng = random.Random(spec.seed)
    width = max(3, len(str(max(spec.users - 1, 0))))
    users = [f"u{i:0{width}d}" for i in range(spec.users)]
    regions = tuple(f"r{i}" for i in range(spec.regions))
    home = {u: rng.choice(regions) for u in users}
    friends = _friend_graph(users, spec.effective_friends(), rng)

    n = spec.docs
    n_pub = round(n * spec.mix[0])
    n_priv = round(n * spec.mix[1])
    n_cen = min(round(n * spec.censored_fraction), n_pub)
    kinds = ["censored"] * n_cen + ["public"] * (n_pub - n_cen) + ["private"] * n_priv
    kinds += ["friends"] * (n - len(kinds))
    rng.shuffle(kinds)

    vocab = [f"t{i:03d}" for i in range(spec.vocab)]
    weights = [1.0 / (i + 1) for i in range(spec.vocab)]
    dwidth = max(5, len(str(n)))
    docs: dict = {}
    blacklists: dict = {r: set() for r in regions}
    for i, kind in enumerate(kinds):
        did = f"d{i:0{dwidth}d}"
        tokens = tuple(rng.choices(vocab, weights, k=spec.doc_tokens)) if spec.vocab else ()
        owner = rng.choice(users) if kind in ("private", "friends") else None
        if kind == "public":
            cid, cls = f"doc/pub/{did}", "public"
        elif kind == "censored":
            cid, cls = f"doc/cen/{did}", f"cen.{did}"
            blacklists[rng.choice(regions)].add(did)
        elif kind == "private":
            cid, cls = f"doc/{owner}/priv/{did}", f"priv.{owner}"
        else:
            cid, cls = f"doc/{owner}/fr/{did}", f"fr.{owner}"
        docs[cid] = DocInfo(cid, kind, owner, cls, tokens)

    policies: dict = {}
    classes: dict = {}

    def add_class(cls: str, policy: Policy, members: str) -> None:
        policies[policy.name] = policy
        classes[cls] = ConduitClass(cls, policy.name, members)

    update_admin = conj(KeyIs("admin"))
    add_class("public", _fd_policy("public", censorship_rule(regions, "public"), update_admin), "doc/pub/*")
    for cid in sorted(docs):
        d = docs[cid]
        if d.kind == "censored":
            did = cid.rsplit("/", 1)[-1]
            add_class(d.conduit_class, _fd_policy(d.conduit_class, censorship_rule(regions, did), update_admin), cid)
    for u in users:
        own = conj(KeyIs(u))
        add_class(f"priv.{u}", _fd_policy(f"priv.{u}", own, own), f"doc/{u}/priv/*")
        shared = Rule.of([{KeyIs(u)}, {KeyIs("X"), ListHas(f"friends.{u}", "X")}])
        add_class(f"fr.{u}", _fd_policy(f"fr.{u}", shared, own), f"doc/{u}/fr/*")
        add_class(f"prof.{u}", _fd_policy(f"prof.{u}", own, own), f"kv/profile/{u}")
        policies[f"taint.{u}"] = _fd_policy(f"taint.{u}", conj(KeyIs(u), RegionIs(home[u])), FALSE)
    add_class("index", _fd_policy("index", FALSE, conj(KeyIs("svc-indexer"))), "index/*")
    add_class("log", Policy(TRUE, TRUE, DeclassRule(), name="log"), PUBLIC_LOG)
    policies["taint.svc"] = _fd_policy("taint.svc", FALSE, FALSE)

    content_classes = sorted(c for c in classes if c not in ("index", "log") and not c.startswith("prof."))
    tasks: dict = {}
    tasks[INDEXER] = TaskInstance(INDEXER, "svc-indexer", None, ("taint.svc",), tuple(content_classes), ())
    tasks[ENGINE] = TaskInstance(
        ENGINE, "svc-engine", None, ("taint.svc",), tuple(content_classes + ["index"]), ()
    )
    tasks[LOGGER] = TaskInstance(LOGGER, "svc-logger", None, (), (), ("log",))
    censored_classes = sorted(c for c in classes if c.startswith("cen."))
    for u in users:
        reads = ["public"] + censored_classes + [f"priv.{u}", f"fr.{u}", f"prof.{u}"]
        reads += [f"fr.{v}" for v in sorted(friends[u])]
        tasks[f"worker.{u}"] = TaskInstance(
            f"worker.{u}", u, home[u], (f"taint.{u}",), tuple(reads), ()
        )
    manifest = Manifest(tasks, classes)

    lists = {f"friends.{u}": MetaList(f"friends.{u}", friends[u]) for u in users}
    for r in regions:
        lists[f"blacklist.{r}"] = MetaList(f"blacklist.{r}", frozenset(blacklists[r]))
    return Corpus(
        spec,
        tuple(users),
        regions,
        home,
        friends,
        {r: frozenset(b) for r, b in blacklists.items()},
        docs,
        policies,
        manifest,
        lists,
    )


# ---------------------------------------------------------------------------
# Persistence as a directory tree
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "policies.txt").write_text(serialize_policies(corpus.policies))
    (d / "manifest.txt").write_text(format_manifest(corpus.manifest))
    (d / "metadata.txt").write_text(format_metadata(corpus.lists, corpus.clock))
    s = corpus.spec
    (d / "spec.txt").write_text(
        f"users {s.users}\nfriends_per_user {s.friends_per_user}\ndocs {s.docs}\n"
        f"mix {','.join(repr(m) for m in s.mix)}\ncensored_fraction {s.censored_fraction!r}\n"
        f"regions {s.regions}\nseed {s.seed}\nvocab {s.vocab}\ndoc_tokens {s.doc_tokens}\n"
    )
    (d / "users.txt").write_text("".join(f"{u} {corpus.home[u]}\n" for u in corpus.users))
    lines = [
        f"{cid} {doc.kind} {doc.owner or '-'} {doc.conduit_class} {' '.join(doc.tokens)}\n"
        for cid, doc in sorted(corpus.docs.items())
    ]
    (d / "docs.txt").write_text("".join(lines))
    return d


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    raw = dict(line.split(" ", 1) for line in (d / "spec.txt").read_text().splitlines() if line)
    spec = CorpusSpec(
        users=int(raw["users"]),
        friends_per_user=int(raw["friends_per_user"]),
        docs=int(raw["docs"]),
        mix=tuple(float(x) for x in raw["mix"].split(",")),
        censored_fraction=float(raw["censored_fraction"]),
        regions=int(raw["regions"]),
        seed=int(raw["seed"]),
        vocab=int(raw["vocab"]),
        doc_tokens=int(raw["doc_tokens"]),
    )
    policies = parse_policies((d / "policies.txt").read_text())
    manifest = parse_manifest((d / "manifest.txt").read_text())
    lists, clock = parse_metadata((d / "metadata.txt").read_text())
    home = dict(line.split() for line in (d / "users.txt").read_text().splitlines() if line)
    users = tuple(sorted(home))
    regions = tuple(f"r{i}" for i in range(spec.regions))
    docs = {}
    for line in (d / "docs.txt").read_text().splitlines():
        parts = line.split(" ")
        cid, kind, owner, cls = parts[:4]
        docs[cid] = DocInfo(cid, kind, None if owner == "-" else owner, cls, tuple(parts[4:]))
    friends = {u: lists[f"friends.{u}"].entries for u in users}
    blacklists = {r: lists[f"blacklist.{r}"].entries for r in regions}
    return Corpus(spec, users, regions, home, friends, blacklists, docs, policies, manifest, lists, clock)


# ---------------------------------------------------------------------------
# Session scripts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionScript:
    user: str
    region: str
    queries: tuple = ()  # tuple of keyword tuples

    @property
    def query_count(self) -> int:
        return len(self.queries)

    def render(self) -> str:
        qs = ";".join(",".join(q) for q in self.queries) or "-"
        return f"session {self.user} {self.region} {qs}"


def parse_scripts(text: str) -> list:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "session" or len(parts) not in (3, 4):
            raise ValueError(f"line {lineno}: expected 'session <user> <region> <q1;q2;...>'")
        qs = () if len(parts) == 3 or parts[3] == "-" else tuple(
            tuple(k for k in q.split(",") if k) for q in parts[3].split(";")
        )
        out.append(SessionScript(parts[1], parts[2], qs))
    return out


def format_scripts(scripts: Iterable[SessionScript]) -> str:
    return "".join(s.render() + "\n" for s in scripts)


def query_pool(corpus: Corpus, lo: int = 15, hi: int = 60) -> list:
    """Moderately frequent tokens: selective, yet matching plenty of documents."""
    ranked = corpus.token_ranking()
    pool = ranked[lo:hi] or ranked
    return pool


def make_scripts(
    corpus: Corpus,
    count: int,
    length: int,
    rng: random.Random,
    *,
    mispredicted: int = 0,
    users: Sequence[str] | None = None,
) -> list:
    """``count`` sessions of ``length`` queries; the first ``mispredicted`` connect from elsewhere."""
    pool = query_pool(corpus)
    users = list(users or corpus.users)
    out = []
    for i in range(count):
        u = users[i % len(users)] if users else rng.choice(corpus.users)
        region = corpus.home[u]
        if i < mispredicted and len(corpus.regions) > 1:
            region = corpus.regions[(corpus.regions.index(region) + 1) % len(corpus.regions)]
        qs = tuple((rng.choice(pool),) for _ in range(length)) if pool else tuple(() for _ in range(length))
        out.append(SessionScript(u, region, qs))
    return out


def random_traces(corpus: Corpus, n: int, seed: int, *, max_len: int = 4) -> list:
    """Randomized (script, engine bug) pairs for cross-monitor comparisons."""
    rng = random.Random(seed)
    pool = query_pool(corpus)
    out = []
    for _ in range(n):
        u = rng.choice(corpus.users)
        region = corpus.home[u] if rng.random() < 0.7 else rng.choice(corpus.regions)
        qs = tuple(
            tuple(rng.sample(pool, rng.choice((1, 1, 1, 2)))) for _ in range(rng.randint(0, max_len))
        )
        bug = rng.choice((None, None, None, "skip-acl"))
        out.append((SessionScript(u, region, qs), bug))
    return out


# ---------------------------------------------------------------------------
# The running pipeline
# ---------------------------------------------------------------------------


@dataclass
class SessionMetrics:
    session_id: str
    user: str
    region: str
    queries: int
    interceptions: Counter = field(default_factory=Counter)
    fastpath: int = 0
    denials: int = 0
    reset_ticks: int = 0
    rm_ticks: int = 0
    transfers_ok: int = 0
    results: tuple = ()  # per query: tuple of doc conduit ids delivered

    @property
    def interceptions_total(self) -> int:
        return sum(self.interceptions.values())

    @property
    def slowpath(self) -> int:
        return self.interceptions["slow-path-open"]


@dataclass(frozen=True)
class Leak:
    session: str
    task: str
    egress: str
    ingress: str


class Pipeline:
    """One simulated deployment in a given enforcement mode."""

    def __init__(
        self,
        corpus: Corpus,
        mode: str,
        oa: OAOutput | None = None,
        *,
        ticks: TickCosts = TickCosts(),
        patch_slowpath: bool = False,
        top_k: int = 10,
        index_batches: int = 4,
        index_buckets: int = 16,
        manifest: Manifest | None = None,
    ) -> None:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "shai" and oa is None:
            raise ValueError("the hybrid monitor needs an offline analysis")
        self.corpus = corpus
        self.mode = mode
        self.top_k = top_k
        self.index_batches = max(1, index_batches)
        self.index_buckets = index_buckets
        manifest = manifest or corpus.manifest
        view = corpus.view()
        self.store = ConduitStore(view, corpus.users, corpus.regions)
        for cid in sorted(corpus.docs):
            doc = corpus.docs[cid]
            c = self.store.add(Conduit(cid, "ingress", doc.conduit_class))
            c.append(doc.content, frozenset())
        for u in corpus.users:
            c = self.store.add(Conduit(corpus.profile_id(u), "ingress", f"prof.{u}"))
            c.append(f"lang=en sort=relevance user={u}\n", frozenset())
        self.store.add(Conduit(PUBLIC_LOG, "egress", "log"))
        if mode == "shai":
            self.monitor = ReferenceMonitor(manifest, corpus.policies, oa, view, ticks=ticks, patch_slowpath=patch_slowpath)
        elif mode == "dynamic":
            self.monitor = DynamicMonitor(manifest, corpus.policies, ticks=ticks)
        else:
            self.monitor = BaselineMonitor(manifest, corpus.policies, ticks=ticks)
        self.sb = Sandbox(self.store, self.monitor, enforce=mode != "baseline")
        self.sb.egress_observer = self._observe_egress
        self.leaks: list = []
        self.egress_writes = 0
        self.engine_bug: str | None = None
        self.injected_doc: str | None = None
        self._index_cache: dict = {}
        self._postings: dict = {}
        self._index_handles: dict = {}
        self._session_no = 0
        self._reader_cache: dict = {}
        self.started = False

    # -- setup ---------------------------------------------------------------

    def bucket(self, token: str) -> str:
        return f"index/b{sum(map(ord, token)) % self.index_buckets:02d}"

    def run_indexer(self) -> dict:
        """Build the inverted index; returns setup interception statistics."""
        sb = self.sb
        sb.session = "setup"
        sb.spawn(INDEXER)
        self.monitor.register(sb, INDEXER, INDEXER)
        docs = sorted(self.corpus.docs)
        per = -(-len(docs) // self.index_batches) if docs else 0
        handles: dict = {}
        postings_written = 0
        for b in range(self.index_batches):
            batch = docs[b * per:(b + 1) * per] if per else []
            lines: dict = defaultdict(list)
            for cid in batch:
                h = sb.open(INDEXER, cid, "r")
                if not isinstance(h, Handle):
                    continue
                text = sb.read(INDEXER, h)
                counts = Counter(text.splitlines()[1].split()) if "\n" in text else Counter()
                for tok, cnt in sorted(counts.items()):
                    lines[self.bucket(tok)].append(f"{tok} {cid} {cnt}\n")
            for i in range(self.index_buckets):
                name = f"index/b{i:02d}"
                if name not in handles:
                    h = sb.create(INDEXER, name, "internal", "index")
                    if not isinstance(h, Handle):
                        continue
                    handles[name] = h
                if sb.write(INDEXER, handles[name], "".join(lines.get(name, ()))):
                    postings_written += len(lines.get(name, ()))
        intercepts = sum(1 for r in self.monitor.log if r.task == INDEXER)
        return {"files": len(handles), "postings": postings_written, "interceptions": intercepts}

    def start(self) -> dict:
        stats = self.run_indexer()
        sb = self.sb
        sb.session = "setup"
        sb.spawn(ENGINE)
        self.monitor.register(sb, ENGINE, ENGINE)
        for i in range(self.index_buckets):
            name = f"index/b{i:02d}"
            if name in self.store:
                h = sb.open(ENGINE, name, "r")
                if isinstance(h, Handle):
                    self._index_handles[name] = h
        self.started = True
        return stats

    # -- search engine ---------------------------------------------------------

    def _postings_for(self, token: str) -> list:
        """Ranked postings for one token, read through the engine's index handle."""
        name = self.bucket(token)
        h = self._index_handles.get(name)
        if h is None:
            return []
        text = self.sb.read(ENGINE, h)
        if not isinstance(text, str):
            return []
        key = (name, len(text))
        if self._index_cache.get(name) != key:
            by_tok: dict = defaultdict(list)
            for line in text.splitlines():
                tok, cid, cnt = line.split()
                by_tok[tok].append((-int(cnt), cid))
            for tok in by_tok:
                by_tok[tok].sort()
            self._postings[name] = by_tok
            self._index_cache[name] = key
        return self._postings[name].get(token, [])

    def _ranked(self, keywords: Sequence[str]) -> list:
        if not keywords:
            return []
        lists = [self._postings_for(k) for k in keywords]
        if len(lists) == 1:
            return [cid for _, cid in lists[0]]
        scores: Counter = Counter()
        present: Counter = Counter()
        for lst in lists:
            for neg, cid in lst:
                scores[cid] += -neg
                present[cid] += 1
        hits = [cid for cid in scores if present[cid] == len(lists)]
        return sorted(hits, key=lambda c: (-scores[c], c))

    def engine_answer(self, pipes) -> list:
        """Handle the newest query on the pipe; returns the conduits sent."""
        sb = self.sb
        text = sb.read(ENGINE, pipes.query_r)
        if not isinstance(text, str) or not text:
            return []
        user, region, kw = text.splitlines()[-1].split(" ", 2)
        keywords = [k for k in kw.split(",") if k]
        view = self.store.view
        sess = SessionContext(user, region, view.clock)
        chosen = []
        for cid in self._ranked(keywords):
            if len(chosen) >= self.top_k:
                break
            if self.engine_bug is None:
                pol = view.policies[self.store.get(cid).conduit_class]
                if not eval_rule(pol.read, sess, view, fail_closed=True):
                    continue
            chosen.append(cid)
        if self.engine_bug == "wrong-user" and self.injected_doc:
            chosen = [self.injected_doc] + chosen[: self.top_k - 1]
        sent = []
        for cid in chosen:
            h = sb.open(ENGINE, cid, "r")
            if not isinstance(h, Handle):
                continue
            if self.engine_bug == "leak-bytes":
                snippet = sb.read(ENGINE, h)
                sb.write(ENGINE, pipes.reply_w, snippet if isinstance(snippet, str) else "")
            if sb.transfer(ENGINE, h, pipes.reply_w, self._worker):
                sent.append(cid)
        return sent

    # -- sessions ----------------------------------------------------------------

    def _egress_handle(self, task: str, egress_id: str) -> Handle | None:
        for h in self.sb.task(task).handles.values():
            if h.conduit_id == egress_id and "w" in h.rights:
                return h
        return None

    def open_session(self, user: str, region: str, *, instance: str | None = None, credential: str | None = None):
        """Register, accept and authenticate a fresh worker; returns its context."""
        if not self.started:
            self.start()
        self._session_no += 1
        sid = f"s{self._session_no:05d}"
        sb = self.sb
        sb.session = sid
        worker = f"w.{sid}"
        self._worker = worker
        sb.spawn(worker)
        pipes, _ = self.monitor.register(sb, worker, instance or f"worker.{user}", peer=ENGINE)
        egress = self.monitor.accept(sb, worker)
        self.monitor.authenticate(sb, worker, credential or credential_for(user), region, egress)
        return sid, worker, pipes, egress

    def query(self, worker: str, user: str, region: str, pipes, egress: str, keywords: Sequence[str]) -> list:
        sb = self.sb
        if pipes is None:
            return []
        sb.write(worker, pipes.query_w, f"{user} {region} {','.join(keywords)}\n")
        sent = self.engine_answer(pipes)
        if self.engine_bug == "leak-bytes" and self.mode == "baseline":
            sb.read(worker, pipes.reply_r)
        fds = sb.recv(worker, pipes.reply_r)
        snippets = []
        for h in fds:
            text = sb.read(worker, h)
            if isinstance(text, str):
                snippets.append(text.split("\n", 1)[0])
        profile = sb.kv(worker, "GET", f"profile/{user}")
        prefs = profile.strip() if isinstance(profile, str) else ""
        out = self._egress_handle(worker, egress)
        body = f"[{prefs}] " + " | ".join(snippets) + "\n"
        if out is not None:
            sb.write(worker, out, body)
        else:
            sb.syscall(worker, "write", Handle(-1, egress, "w", worker), body)
        return sent

    def close_session(self, worker: str) -> None:
        self.monitor.reset(self.sb, worker)

    def run_session(self, script: SessionScript, *, engine_bug: str | None = None) -> SessionMetrics:
        self.engine_bug = engine_bug
        sid, worker, pipes, egress = self.open_session(script.user, script.region)
        results = []
        for q in script.queries:
            results.append(tuple(self.query(worker, script.user, script.region, pipes, egress, q)))
        self.close_session(worker)
        self.engine_bug = None
        return self.metrics_for(sid, script, tuple(results))

    def run_sessions(self, scripts: Iterable, *, bugs: Iterable | None = None) -> list:
        scripts = list(scripts)
        bugs = list(bugs) if bugs is not None else [None] * len(scripts)
        return [self.run_session(s, engine_bug=b) for s, b in zip(scripts, bugs)]

    def metrics_for(self, sid: str, script: SessionScript, results: tuple = ()) -> SessionMetrics:
        counts = Counter(self.monitor.counts.get(sid, Counter()))
        st = self.sb.stats[sid]
        return SessionMetrics(
            sid,
            script.user,
            script.region,
            script.query_count,
            counts,
            st["fastpath"],
            st["denials"],
            self.monitor.reset_ticks.get(sid, 0),
            sum(counts.values()) * self.monitor.ticks.rm_entry,
            sum(len(r) for r in results),
            results,
        )

    def records(self, session: str | None = None) -> list:
        return [r.data_plane() for r in self.sb.log if session is None or r.session == session]

    # -- leak detection (shadow provenance, invisible to the monitors) ------------

    def readers_of(self, rule: Rule) -> list:
        """Sessions (principal, region) that may read a conduit with ``rule``."""
        key = (rule, id(self.store.view.lists))
        hit = self._reader_cache.get(key)
        if hit is not None:
            return hit
        view = self.store.view
        if len(rule.disjuncts) == 1:
            (d,) = rule.disjuncts
            keys = [a.term for a in d if isinstance(a, KeyIs) and not a.term[:1].isupper()]
            regs = [a.region for a in d if isinstance(a, RegionIs)]
            if len(d) == len(keys) + len(regs) and len(keys) == 1:
                out = [(keys[0], r) for r in (regs or self.corpus.regions)]
                self._reader_cache[key] = out
                return out
        out = [
            (p, r)
            for p in self.corpus.users
            for r in self.corpus.regions
            if eval_rule(rule, SessionContext(p, r, view.clock), view, fail_closed=True)
        ]
        self._reader_cache[key] = out
        return out

    def _observe_egress(self, sb: Sandbox, task: str, conduit: Conduit, tag: frozenset) -> None:
        self.egress_writes += 1
        view = self.store.view
        readers = self.readers_of(view.policies[conduit.conduit_class].read)
        for ingress in sorted(tag):
            pol = view.policies[self.store.get(ingress).conduit_class]
            for p, r in readers:
                if not eval_rule(pol.read, SessionContext(p, r, view.clock), view, fail_closed=True):
                    self.leaks.append(Leak(sb.session, task, conduit.conduit_id, ingress))
                    break


# ---------------------------------------------------------------------------
# Fault injection
# ---------------------------------------------------------------------------


@dataclass
class FaultOutcome:
    scenario: str
    mode: str
    blocked: bool
    denials: int
    leaks: list
    detail: str = ""

    @property
    def status(self) -> str:
        return "blocked" if self.blocked else "leaked"


def _victim(corpus: Corpus, user: str, kind: str = "private") -> str:
    """A document of ``kind`` owned by someone ``user`` may not read."""
    for cid in corpus.docs_of_kind(kind):
        owner = corpus.docs[cid].owner
        if owner != user and user not in corpus.friends.get(owner, ()):
            return cid
    raise CorpusError(f"no {kind} document unreadable by {user}")


def _own_private(corpus: Corpus, user: str) -> str | None:
    for cid in corpus.docs_of_kind("private"):
        if corpus.docs[cid].owner == user:
            return cid
    return None


def _fault_user(corpus: Corpus) -> str:
    """A user who owns at least one private document."""
    for u in corpus.users:
        if _own_private(corpus, u):
            return u
    raise CorpusError("corpus has no private documents")


def inject_fault(pipeline: Pipeline, scenario: str) -> FaultOutcome:
    """Run one misbehaviour against a started pipeline and judge the outcome.

    A scenario is blocked when the misbehaving step is denied somewhere
    along the way and the shadow provenance shows no unauthorized flow.
    """
    if scenario not in FAULTS:
        raise ValueError(f"unknown fault scenario {scenario!r}")
    corpus = pipeline.corpus
    sb = pipeline.sb
    if not pipeline.started:
        pipeline.start()
    leaks_before = len(pipeline.leaks)
    log_before = len(sb.log)
    user = _fault_user(corpus)
    region = corpus.home[user]
    pool = query_pool(corpus) or ["t000"]
    detail = ""

    if scenario in ("F1", "F2", "F5"):
        keywords = (pool[0],)
        if scenario == "F1":
            pipeline.engine_bug = "wrong-user"
            pipeline.injected_doc = _victim(corpus, user)
            detail = pipeline.injected_doc
        elif scenario == "F2":
            pipeline.engine_bug = "leak-bytes"
        else:
            cen = [c for c in corpus.docs_of_kind("censored")]
            if not cen:
                raise CorpusError("corpus has no censored documents")
            cid = cen[0]
            did = cid.rsplit("/", 1)[-1]
            region = next(r for r in corpus.regions if did in corpus.blacklists[r])
            rare = Counter(corpus.docs[cid].tokens).most_common()[-1][0]
            keywords = (rare,)
            pipeline.engine_bug = "wrong-user"
            pipeline.injected_doc = cid
            detail = f"{cid}@{region}"
        sid, worker, pipes, egress = pipeline.open_session(user, region)
        pipeline.query(worker, user, region, pipes, egress, keywords)
        pipeline.close_session(worker)
        pipeline.engine_bug = None
        pipeline.injected_doc = None
    elif scenario == "F3":
        victim = _victim(corpus, user)
        detail = victim
        sid, worker, pipes, egress = pipeline.open_session(user, region)
        h = sb.open(worker, victim, "r")
        text = sb.read(worker, h) if isinstance(h, Handle) else ""
        out = pipeline._egress_handle(worker, egress)
        if out is not None:
            sb.write(worker, out, str(text))
        pipeline.close_session(worker)
    elif scenario == "F4":
        sb.session = "fault-F4"
        own = _own_private(corpus, user)
        detail = own
        sb.spawn(LOGGER)
        pipeline.monitor.register(sb, LOGGER, LOGGER)
        log = sb.open(LOGGER, PUBLIC_LOG, "w")
        if isinstance(pipeline.monitor, ReferenceMonitor):
            pipeline.monitor.reregister(sb, LOGGER, f"worker.{user}")
        h = sb.open(LOGGER, own, "r")
        text = sb.read(LOGGER, h) if isinstance(h, Handle) else ""
        if isinstance(log, Handle):
            sb.write(LOGGER, log, str(text))
        pipeline.monitor.reset(sb, LOGGER)
    else:  # F6
        own = _own_private(corpus, user)
        detail = own
        sid, worker, pipes, egress = pipeline.open_session(user, region)
        h = sb.open(worker, own, "r")
        text = sb.read(worker, h) if isinstance(h, Handle) else ""
        log = sb.open(worker, PUBLIC_LOG, "w")
        if isinstance(log, Handle):
            sb.write(worker, log, str(text))
        pipeline.close_session(worker)

    new_leaks = pipeline.leaks[leaks_before:]
    denials = sum(1 for r in sb.log[log_before:] if r.decision == "deny")
    blocked = not new_leaks and denials > 0
    return FaultOutcome(scenario, pipeline.mode, blocked, denials, list(new_leaks), detail)


def run_fault_suite(corpus: Corpus, mode: str, oa: OAOutput | None = None, **kw) -> list:
    """Each scenario on a fresh pipeline so one cannot mask another."""
    out = []
    for f in FAULTS:
        p = Pipeline(corpus, mode, oa, **kw)
        p.start()
        out.append(inject_fault(p, f))
    return out


__all__ = [
    "FAULTS",
    "MODES",
    "Corpus",
    "CorpusError",
    "CorpusSpec",
    "DocInfo",
    "FaultOutcome",
    "Leak",
    "Pipeline",
    "SessionMetrics",
    "SessionScript",
    "censorship_rule",
    "format_scripts",
    "generate_corpus",
    "inject_fault",
    "load_corpus",
    "make_scripts",
    "parse_scripts",
    "query_pool",
    "random_traces",
    "run_fault_suite",
    "save_corpus",
]
