"""Benchmark orchestration and report rendering.

Overheads are reported as interception counts and modeled ticks; wall time
is printed for information only.
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from flowcap.analyzer import Manifest, OAOutput
from flowcap.monitor import TickCosts
from flowcap.pipeline import MODES, Corpus, Pipeline, make_scripts

METRIC_COLUMNS = (
    "mode",
    "session_len",
    "sessions",
    "interceptions_total",
    "interceptions_per_query",
    "fastpath_opens",
    "slowpath_opens",
    "denials",
    "reset_ticks",
    "rm_ticks",
)
SWEEP_COLUMNS = ("mispredict", "mode", "session_len", "sessions", "slowpath_opens", "interceptions_total")


@dataclass(frozen=True)
class RunConfig:
    mode: str = "shai"
    session_lengths: tuple = (1, 2, 4, 8, 16, 32)
    sessions_per_length: int = 20
    mispredict_fraction: float = 0.0
    seed: int = 7
    ticks: TickCosts = TickCosts()
    patch_slowpath: bool = False
    top_k: int = 10

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not self.session_lengths:
            raise ValueError("at least one session length is needed")
        if not 0 <= self.mispredict_fraction <= 1:
            raise ValueError("mispredict fraction must lie in [0, 1]")
        if self.sessions_per_length < 0 or any(n < 0 for n in self.session_lengths):
            raise ValueError("session counts and lengths must be non-negative")


def parse_sessions(spec: str) -> list:
    """``"8x100,16x50"`` -> ``[(8, 100), (16, 50)]``."""
    out = []
    for part in spec.split(","):
        length, sep, count = part.strip().partition("x")
        if not sep:
            raise ValueError(f"expected <len>x<count>, got {part!r}")
        n, c = int(length), int(count)
        if n < 0 or c < 0:
            raise ValueError(f"session length and count must be non-negative, got {part!r}")
        out.append((n, c))
    return out


@dataclass(frozen=True)
class MetricsRow:
    mode: str
    session_len: int
    sessions: int
    interceptions_total: int
    interceptions_per_query: Fraction | None
    fastpath_opens: int
    slowpath_opens: int
    denials: int
    reset_ticks: int
    rm_ticks: int

    @property
    def queries(self) -> int:
        return self.session_len * self.sessions

    def ticks_per_query(self, include_reset: bool = True) -> Fraction | None:
        if not self.queries:
            return None
        return Fraction(self.rm_ticks + (self.reset_ticks if include_reset else 0), self.queries)

    def cells(self) -> list:
        ipq = self.interceptions_per_query
        return [
            self.mode,
            str(self.session_len),
            str(self.sessions),
            str(self.interceptions_total),
            "n/a" if ipq is None else str(ipq),
            str(self.fastpath_opens),
            str(self.slowpath_opens),
            str(self.denials),
            str(self.reset_ticks),
            str(self.rm_ticks),
        ]

    @classmethod
    def from_cells(cls, cells: Sequence[str]) -> "MetricsRow":
        if len(cells) != len(METRIC_COLUMNS):
            raise ValueError(f"expected {len(METRIC_COLUMNS)} columns, got {len(cells)}")
        ipq = None if cells[4] == "n/a" else Fraction(cells[4])
        ints = [int(c) for c in cells[1:4]] + [int(c) for c in cells[5:]]
        return cls(cells[0], ints[0], ints[1], ints[2], ipq, *ints[3:])


@dataclass(frozen=True)
class SweepPoint:
    mispredict: float
    mode: str
    session_len: int
    sessions: int
    slowpath_opens: int
    interceptions_total: int


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    sweep: list = field(default_factory=list)
    wall_seconds: float | None = None

    def row(self, mode: str, session_len: int) -> MetricsRow:
        for r in self.rows:
            if r.mode == mode and r.session_len == session_len:
                return r
        raise KeyError((mode, session_len))

    def sorted_rows(self) -> list:
        order = {"baseline": 0, "dynamic": 1, "shai": 2}
        return sorted(self.rows, key=lambda r: (order.get(r.mode, 9), r.mode, r.session_len))


def aggregate(mode: str, session_len: int, sessions: list) -> MetricsRow:
    total = sum(s.interceptions_total for s in sessions)
    queries = session_len * len(sessions)
    return MetricsRow(
        mode,
        session_len,
        len(sessions),
        total,
        Fraction(total, queries) if queries else None,
        sum(s.fastpath for s in sessions),
        sum(s.slowpath for s in sessions),
        sum(s.denials for s in sessions),
        sum(s.reset_ticks for s in sessions),
        sum(s.rm_ticks for s in sessions),
    )


def new_pipeline(corpus: Corpus, oa: OAOutput | None, config: RunConfig, manifest: Manifest | None = None) -> Pipeline:
    p = Pipeline(
        corpus,
        config.mode,
        oa,
        ticks=config.ticks,
        patch_slowpath=config.patch_slowpath,
        top_k=config.top_k,
        manifest=manifest,
    )
    p.start()
    return p


def run_benchmark(
    corpus: Corpus,
    oa: OAOutput | None,
    config: RunConfig,
    plan: Sequence | None = None,
    *,
    manifest: Manifest | None = None,
) -> tuple:
    """Run ``plan`` = [(length, count), ...] sessions; returns (rows, pipeline)."""
    plan = list(plan) if plan is not None else [(n, config.sessions_per_length) for n in config.session_lengths]
    p = new_pipeline(corpus, oa, config, manifest)
    rows = []
    for length, count in plan:
        rng = random.Random(f"{config.seed}:{length}:{count}")
        scripts = make_scripts(corpus, count, length, rng, mispredicted=round(config.mispredict_fraction * count))
        rows.append(aggregate(config.mode, length, p.run_sessions(scripts)))
    return rows, p


def run_sweep(
    corpus: Corpus,
    oa: OAOutput,
    fractions: Sequence[float],
    *,
    session_len: int = 8,
    sessions: int = 40,
    seed: int = 7,
    modes: Sequence[str] = ("shai", "dynamic"),
    ticks: TickCosts = TickCosts(),
) -> list:
    """Same scripts at every point; the first round(f*N) sessions connect from elsewhere."""
    out = []
    for f in fractions:
        for mode in modes:
            cfg = RunConfig(mode=mode, session_lengths=(session_len,), sessions_per_length=sessions,
                            mispredict_fraction=f, seed=seed, ticks=ticks)
            (row,), _ = run_benchmark(corpus, oa, cfg)
            out.append(SweepPoint(f, mode, session_len, sessions, row.slowpath_opens, row.interceptions_total))
    return out


def linear_r2(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Coefficient of determination of a least-squares line through the points."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if len(x) < 2:
        return 1.0
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _csv(header: Sequence[str], rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def metrics_csv(report: MetricsReport) -> str:
    return _csv(METRIC_COLUMNS, [r.cells() for r in report.sorted_rows()])


def sweep_csv(points: Sequence[SweepPoint]) -> str:
    rows = [[repr(p.mispredict), p.mode, p.session_len, p.sessions, p.slowpath_opens, p.interceptions_total]
            for p in sorted(points, key=lambda p: (p.mispredict, p.mode))]
    return _csv(SWEEP_COLUMNS, rows)


def parse_metrics_csv(text: str) -> MetricsReport:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != METRIC_COLUMNS:
        raise ValueError("not a metrics CSV (unexpected header)")
    return MetricsReport([MetricsRow.from_cells(r) for r in reader if r])


def parse_sweep_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != SWEEP_COLUMNS:
        raise ValueError("not a sweep CSV (unexpected header)")
    return [SweepPoint(float(r[0]), r[1], int(r[2]), int(r[3]), int(r[4]), int(r[5])) for r in reader if r]


def _fmt_frac(f: Fraction | None) -> str:
    if f is None:
        return "n/a"
    return f"{float(f):.4f}" if f.denominator != 1 else str(f.numerator)


def metrics_text(report: MetricsReport) -> str:
    lines = []
    rows = report.sorted_rows()
    head = f"{'mode':<9} {'L':>5} {'sessions':>8} {'icpt':>7} {'icpt/q':>9} {'fast':>8} {'slow':>6} {'deny':>5} {'ticks/q':>9}"
    lines.append(head)
    lines.append("-" * len(head))
    for r in rows:
        lines.append(
            f"{r.mode:<9} {r.session_len:>5} {r.sessions:>8} {r.interceptions_total:>7} "
            f"{_fmt_frac(r.interceptions_per_query):>9} {r.fastpath_opens:>8} {r.slowpath_opens:>6} "
            f"{r.denials:>5} {_fmt_frac(r.ticks_per_query()):>9}"
        )
    shai = [r for r in rows if r.mode == "shai" and r.session_len > 0]
    if shai:
        lines.append("")
        lines.append("Amortization (hybrid monitor): interceptions per query against 4/L")
        lines.append(f"{'L':>5} {'measured':>12} {'4/L':>10} {'match':>6}")
        for r in shai:
            expect = Fraction(4, r.session_len)
            lines.append(
                f"{r.session_len:>5} {str(r.interceptions_per_query):>12} {str(expect):>10} "
                f"{'yes' if r.interceptions_per_query == expect else 'no':>6}"
            )
    if report.sweep:
        lines.append("")
        lines.append("Misprediction sweep")
        lines.append(f"{'fraction':>9} {'mode':<9} {'slow-path':>9} {'icpt':>7}")
        for p in sorted(report.sweep, key=lambda p: (p.mispredict, p.mode)):
            lines.append(f"{p.mispredict:>9.2f} {p.mode:<9} {p.slowpath_opens:>9} {p.interceptions_total:>7}")
        shai_pts = [p for p in report.sweep if p.mode == "shai"]
        if len(shai_pts) >= 2:
            r2 = linear_r2([p.mispredict for p in shai_pts], [p.slowpath_opens for p in shai_pts])
            lines.append(f"linear fit of slow-path count: R^2 = {r2:.4f}")
    if report.wall_seconds is not None:
        lines.append("")
        lines.append(f"wall time {report.wall_seconds:.2f}s (informational)")
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, fmt: str = "csv") -> str:
    if fmt == "csv":
        return metrics_csv(report)
    if fmt == "text":
        return metrics_text(report)
    raise ValueError(f"unknown format {fmt!r}")


__all__ = [
    "METRIC_COLUMNS",
    "MetricsReport",
    "MetricsRow",
    "RunConfig",
    "SWEEP_COLUMNS",
    "SweepPoint",
    "aggregate",
    "emit_report",
    "linear_r2",
    "metrics_csv",
    "metrics_text",
    "new_pipeline",
    "parse_metrics_csv",
    "parse_sessions",
    "parse_sweep_csv",
    "run_benchmark",
    "run_sweep",
    "sweep_csv",
]
