"""Textual policy language.

Grammar (one policy per block, ``#`` starts a comment)::

    policy NAME { read :- DNF ; update :- DNF ; declassify :- propagate [until CONJ => DNF]* ; }
    DNF  := CONJ ('|' CONJ)*
    CONJ := ATOM ('&' ATOM)*
    ATOM := true | false | key(TERM) | region(ID) | in(LIST, TERM)
          | notin(LIST, TERM) | after(TIMESTAMP) | fdonly

A bare body (without ``policy NAME { }``) is accepted by :func:`parse_policy`.
Terms starting with an upper-case letter are variables.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime, timezone

from flowcap.policy import (
    FALSE,
    DeclassRule,
    Escape,
    FdOnly,
    KeyIs,
    ListHas,
    ListLacks,
    Policy,
    PolicyError,
    RegionIs,
    Rule,
    TimeAfter,
    check_conjunct,
    is_variable,
    normalize_conjunct,
)

KEYWORDS = {"policy", "read", "update", "declassify", "propagate", "until"}
ATOM_NAMES = {"true", "false", "key", "region", "in", "notin", "after", "fdonly"}

_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<op>:-|=>|[(){};,|&])
  | (?P<word>[A-Za-z0-9_.@/+-]+(?::\d\w*)*)
    """,
    re.VERBOSE,
)


class PolicySyntaxError(PolicyError):
    def __init__(self, msg: str, line: int, col: int) -> None:
        super().__init__(f"{line}:{col}: {msg}")
        self.line = line
        self.col = col


@dataclass
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(text: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise PolicySyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind in ("op", "word"):
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        chunk = m.group()
        nl = chunk.count("\n")
        if nl:
            line += nl
            line_start = pos + chunk.rfind("\n") + 1
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


def parse_timestamp(text: str) -> int:
    if text.isdigit():
        return int(text)
    iso = text[:-1] + "+00:00" if text.endswith("Z") else text
    dt = datetime.fromisoformat(iso)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


class _Parser:
    def __init__(self, text: str) -> None:
        self.toks = tokenize(text)
        self.i = 0

    @property
    def cur(self) -> Token:
        return self.toks[self.i]

    def error(self, msg: str, tok: Token | None = None) -> PolicySyntaxError:
        tok = tok or self.cur
        return PolicySyntaxError(msg, tok.line, tok.col)

    def take(self, text: str | None = None, kind: str | None = None) -> Token:
        tok = self.cur
        if (text is not None and tok.text != text) or (kind is not None and tok.kind != kind):
            want = text if text is not None else kind
            got = tok.text or "end of input"
            raise self.error(f"expected {want!r}, got {got!r}")
        self.i += 1
        return tok

    def at(self, text: str) -> bool:
        return self.cur.text == text

    def ident(self, what: str) -> str:
        tok = self.cur
        if tok.kind != "word":
            raise self.error(f"expected {what}")
        self.i += 1
        return tok.text

    # -- grammar -----------------------------------------------------------

    def atom(self):
        tok = self.cur
        name = self.ident("predicate")
        if name not in ATOM_NAMES:
            raise self.error(f"unknown predicate {name!r}", tok)
        if name == "true":
            return None
        if name == "false":
            return False
        if name == "fdonly":
            return FdOnly()
        self.take("(")
        if name == "key":
            a = KeyIs(self.ident("term"))
        elif name == "region":
            r = self.ident("region")
            if is_variable(r):
                raise self.error("region must be a constant", tok)
            a = RegionIs(r)
        elif name in ("in", "notin"):
            lst = self.ident("list id")
            self.take(",")
            term = self.ident("term")
            a = ListHas(lst, term) if name == "in" else ListLacks(lst, term)
        else:
            ts_tok = self.cur
            raw = self.ident("timestamp")
            try:
                a = TimeAfter(parse_timestamp(raw))
            except ValueError:
                raise self.error(f"bad timestamp {raw!r}", ts_tok) from None
        self.take(")")
        return a

    def conj(self):
        """Returns a set of atoms, or None when the conjunct contains false."""
        start = self.cur
        atoms: set | None = set()
        while True:
            a = self.atom()
            if a is False:
                atoms = None
            elif a is not None and atoms is not None:
                atoms.add(a)
            if not self.at("&"):
                break
            self.take("&")
        if atoms is not None:
            try:
                check_conjunct(atoms)
            except PolicyError as e:
                raise self.error(str(e), start) from None
        return atoms

    def dnf(self) -> Rule:
        disjuncts = []
        while True:
            c = self.conj()
            if c is not None:
                disjuncts.append(c)
            if not self.at("|"):
                break
            self.take("|")
        return Rule.of(disjuncts)

    def body(self, name: str = "") -> Policy:
        self.take("read")
        self.take(":-")
        read = self.dnf()
        self.take(";")
        self.take("update")
        self.take(":-")
        update = self.dnf()
        self.take(";")
        self.take("declassify")
        self.take(":-")
        self.take("propagate")
        escapes = []
        while self.at("until"):
            self.take("until")
            trig_tok = self.cur
            trig = self.conj()
            self.take("=>")
            result = self.dnf()
            if trig is None:
                continue  # a trigger that can never fire
            trig = normalize_conjunct(trig)
            if trig is None:
                continue
            if any(is_variable(t) for a in trig for t in _terms(a)):
                raise self.error("declassification triggers must be ground", trig_tok)
            escapes.append(Escape(trig, result))
        self.take(";")
        return Policy(read, update, DeclassRule.of(escapes), name=name)

    def block(self) -> Policy:
        self.take("policy")
        name = self.ident("policy name")
        self.take("{")
        p = self.body(name)
        self.take("}")
        return p


def _terms(a) -> tuple:
    if isinstance(a, (KeyIs, ListHas, ListLacks)):
        return (a.term,)
    return ()


def parse_policy(text: str) -> Policy:
    """Parse one policy, either a bare body or a single ``policy`` block."""
    p = _Parser(text)
    pol = p.block() if p.at("policy") else p.body()
    p.take(kind="eof")
    return pol


def parse_policies(text: str) -> dict[str, Policy]:
    p = _Parser(text)
    out: dict[str, Policy] = {}
    while not p.cur.kind == "eof":
        tok = p.cur
        pol = p.block()
        if pol.name in out:
            raise p.error(f"duplicate policy {pol.name!r}", tok)
        out[pol.name] = pol
    return out


def parse_rule(text: str) -> Rule:
    p = _Parser(text)
    r = p.dnf()
    p.take(kind="eof")
    return r


# ---------------------------------------------------------------------------
# Canonical serialization
# ---------------------------------------------------------------------------


def format_conjunct(conj) -> str:
    if not conj:
        return "true"
    return " & ".join(str(a) for a in sorted(conj, key=lambda a: a.key()))


def format_rule(rule: Rule) -> str:
    if rule.is_false or rule == FALSE:
        return "false"
    return " | ".join(format_conjunct(d) for d in rule.ordered())


def serialize_policy(p: Policy) -> str:
    declass = "propagate" + "".join(
        f" until {format_conjunct(e.trigger)} => {format_rule(e.result)}" for e in p.escapes
    )
    return f"read :- {format_rule(p.read)}; update :- {format_rule(p.update)}; declassify :- {declass};"


def serialize_block(p: Policy) -> str:
    return f"policy {p.name} {{ {serialize_policy(p)} }}"


def serialize_policies(policies: dict[str, Policy]) -> str:
    return "".join(serialize_block(policies[n]) + "\n" for n in sorted(policies))
