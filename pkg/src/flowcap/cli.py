"""``flowcap`` command line: generate a corpus, analyze it, run and report.

Exit status: 0 on success, 2 for usage or input errors, 1 when a benchmark
run denies a flow the workload expects (or an internal consistency check
fails), and 3 when the fault suite observes a leak.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from flowcap.analyzer import (
    ManifestError,
    OAFormatError,
    apply_predictions,
    build_view,
    compile_capabilities,
    format_blueprints,
    load_oa,
    parse_manifest,
    persist_oa,
    run_oa,
)
from flowcap.bench import (
    MetricsReport,
    RunConfig,
    emit_report,
    linear_r2,
    parse_metrics_csv,
    parse_sessions,
    parse_sweep_csv,
    run_benchmark,
    run_sweep,
    sweep_csv,
)
from flowcap.lang import parse_policies
from flowcap.monitor import TickCosts
from flowcap.pipeline import MODES, CorpusError, CorpusSpec, generate_corpus, load_corpus, run_fault_suite, save_corpus
from flowcap.policy import PolicyError

SEED_ENV = "SHAI_SIM_SEED"
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_LEAK = 0, 1, 2, 3


class UsageError(Exception):
    pass


def effective_seed(cli_seed: int) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cli_seed
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _fractions(text: str) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad fraction list {text!r}") from None
    if not vals or any(not 0 <= v <= 1 for v in vals):
        raise UsageError("fractions must lie in [0, 1]")
    return vals


def _modes(text: str) -> list:
    modes = list(MODES) if text == "all" else [m.strip() for m in text.split(",")]
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise UsageError(f"unknown mode(s): {', '.join(bad)}")
    return modes


def _write(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _ticks(args) -> TickCosts:
    if min(args.tick_lwc, args.tick_exec, args.tick_rm) < 0:
        raise UsageError("tick costs must be non-negative")
    return TickCosts(lwc_reset=args.tick_lwc, exec_reset=args.tick_exec, rm_entry=args.tick_rm)


def _inputs(args):
    """Resolve (manifest, policies, metadata text) from explicit paths or a corpus dir."""
    base = Path(args.corpus) if getattr(args, "corpus", None) else None

    def pick(explicit, name):
        if explicit:
            return Path(explicit)
        if base is None:
            raise UsageError(f"--{name} or --corpus is required")
        return base / f"{name}.txt"

    policies = parse_policies(pick(args.policies, "policies").read_text())
    manifest = parse_manifest(pick(args.manifest, "manifest").read_text())
    metadata = pick(args.metadata, "metadata").read_text()
    return manifest, policies, metadata


def _corpus_and_oa(args):
    corpus = load_corpus(args.corpus)
    manifest = parse_manifest(Path(args.manifest).read_text()) if getattr(args, "manifest", None) else None
    if args.oa:
        oa = load_oa(args.oa)
    else:
        oa = run_oa(manifest or corpus.manifest, corpus.policies, corpus.view())
    return corpus, oa, manifest


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = CorpusSpec(
        users=args.users,
        friends_per_user=args.friends,
        docs=args.docs,
        censored_fraction=args.censored,
        regions=args.regions,
        seed=effective_seed(args.seed),
    )
    corpus = generate_corpus(spec)
    out = save_corpus(corpus, args.out)
    print(
        f"wrote {out}: {len(corpus.users)} users, {len(corpus.docs)} docs, "
        f"{len(corpus.manifest.tasks)} task instances, {len(corpus.manifest.classes)} conduit classes"
    )
    return EXIT_OK


def cmd_oa(args) -> int:
    manifest, policies, metadata = _inputs(args)
    if args.predictions:
        pairs = [tuple(line.split()[:2]) for line in Path(args.predictions).read_text().splitlines() if line.strip()]
        if any(len(p) != 2 for p in pairs):
            raise UsageError("prediction lines must read '<user> <region>'")
        manifest = apply_predictions(manifest, pairs, policies)
    view = build_view(manifest, policies, metadata)
    t0 = time.perf_counter()
    out = run_oa(manifest, policies, view, parallel=args.parallel, active_only=args.active_only)
    elapsed = time.perf_counter() - t0
    persist_oa(out, args.out)
    if args.caps:
        Path(args.caps).write_text(format_blueprints(compile_capabilities(out)))
    print(f"certified {len(out.certified)} accesses with {out.checks} checks in {elapsed:.2f}s -> {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    plan = parse_sessions(args.sessions)
    modes = _modes(args.mode)
    corpus, oa, manifest = _corpus_and_oa(args)
    seed = effective_seed(args.seed)
    report = MetricsReport()
    failed = False
    t0 = time.perf_counter()
    log_parts, predictions = [], []
    for mode in modes:
        cfg = RunConfig(
            mode=mode,
            session_lengths=tuple(n for n, _ in plan),
            mispredict_fraction=args.mispredict,
            seed=seed,
            ticks=_ticks(args),
            patch_slowpath=args.patch_slowpath,
        )
        rows, pipeline = run_benchmark(corpus, oa, cfg, plan, manifest=manifest)
        report.rows.extend(rows)
        if pipeline.leaks:
            print(f"{mode}: {len(pipeline.leaks)} unauthorized flow(s) observed", file=sys.stderr)
            failed = True
        if any(r.denials for r in rows):
            print(f"{mode}: {sum(r.denials for r in rows)} expected flow(s) denied", file=sys.stderr)
            failed = True
        log_parts.append(pipeline.monitor.export_csv())
        predictions.extend(getattr(pipeline.monitor, "predictions", []))
    report.wall_seconds = time.perf_counter() - t0
    _write(emit_report(report, args.format), args.out)
    if args.interceptions:
        header, *_ = log_parts[0].splitlines(keepends=True) or [""]
        body = "".join("".join(p.splitlines(keepends=True)[1:]) for p in log_parts)
        Path(args.interceptions).write_text(header + body)
    if args.predictions_out:
        Path(args.predictions_out).write_text("".join(f"{u} {r}\n" for u, r in sorted(set(predictions))))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_sweep(args) -> int:
    (length, count), *rest = parse_sessions(args.sessions)
    if rest:
        raise UsageError("sweep takes a single <len>x<count>")
    fractions = _fractions(args.mispredict)
    corpus, oa, _ = _corpus_and_oa(args)
    points = run_sweep(corpus, oa, fractions, session_len=length, sessions=count, seed=effective_seed(args.seed),
                       ticks=_ticks(args))
    if args.format == "csv":
        _write(sweep_csv(points), args.out)
    else:
        _write(emit_report(MetricsReport(sweep=points), "text"), args.out)
    by = {(p.mispredict, p.mode): p for p in points}
    worst = max(fractions)
    if by[(worst, "shai")].interceptions_total > by[(worst, "dynamic")].interceptions_total:
        print("hybrid monitor intercepted more than the dynamic one at the worst point", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_faults(args) -> int:
    corpus, oa, _ = _corpus_and_oa(args)
    leaked = False
    for mode in _modes(args.mode):
        for o in run_fault_suite(corpus, mode, oa):
            print(f"{mode:<8} {o.scenario} {o.status:<7} denials={o.denials} leaks={len(o.leaks)} {o.detail}")
            leaked |= not o.blocked
    return EXIT_LEAK if leaked else EXIT_OK


def cmd_report(args) -> int:
    report = parse_metrics_csv(Path(args.metrics).read_text()) if args.metrics else MetricsReport()
    if args.sweep:
        report.sweep = parse_sweep_csv(Path(args.sweep).read_text())
    if args.format == "csv":
        text = emit_report(report, "csv")
        if report.sweep:
            text += "\n" + sweep_csv(report.sweep)
    else:
        text = emit_report(report, "text")
    _write(text, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowcap", description="Information-flow pipeline simulator and benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    def io_flags(p, *, need_oa=False):
        p.add_argument("--corpus", default="corpus", help="corpus directory (default: %(default)s)")
        p.add_argument("--manifest", help="manifest file overriding the corpus one")
        if need_oa:
            p.add_argument("--oa", help="persisted analysis; computed in-process when omitted")

    def tick_flags(p):
        p.add_argument("--tick-lwc", type=int, default=2, help="cost of a lightweight-context reset")
        p.add_argument("--tick-exec", type=int, default=20, help="cost of a full re-exec")
        p.add_argument("--tick-rm", type=int, default=1, help="cost of one monitor entry")

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--users", type=int, default=200)
    g.add_argument("--docs", type=int, default=5000)
    g.add_argument("--friends", type=int, default=100)
    g.add_argument("--regions", type=int, default=3)
    g.add_argument("--censored", type=float, default=0.011)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", default="corpus")
    g.set_defaults(func=cmd_gen)

    o = sub.add_parser("oa", help="run the offline analysis")
    o.add_argument("--corpus", help="take manifest/policies/metadata from this directory")
    o.add_argument("--manifest")
    o.add_argument("--policies")
    o.add_argument("--metadata")
    o.add_argument("--out", default="oa.txt")
    o.add_argument("--parallel", type=int, default=1)
    o.add_argument("--active-only", action="store_true")
    o.add_argument("--predictions", help="runtime prediction log to fold in before analysis")
    o.add_argument("--caps", help="also write compiled capability blueprints here")
    o.set_defaults(func=cmd_oa)

    r = sub.add_parser("run", help="run benchmark sessions")
    io_flags(r, need_oa=True)
    r.add_argument("--mode", default="shai", help="baseline, dynamic, shai, a comma list, or all")
    r.add_argument("--sessions", default="1x20,2x20,4x20,8x20,16x20,32x20", help="<len>x<count>[,...]")
    r.add_argument("--mispredict", type=float, default=0.0)
    r.add_argument("--seed", type=int, default=7)
    r.add_argument("--patch-slowpath", action="store_true")
    r.add_argument("--format", choices=("csv", "text"), default="csv")
    r.add_argument("--out", help="metrics destination (default stdout)")
    r.add_argument("--interceptions", help="write the interception log CSV here")
    r.add_argument("--predictions-out", help="write observed (user, region) pairs here")
    tick_flags(r)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep the misprediction fraction")
    io_flags(s, need_oa=True)
    s.add_argument("--mispredict", default="0,0.25,0.5,0.75,1.0")
    s.add_argument("--sessions", default="8x40")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--format", choices=("csv", "text"), default="csv")
    s.add_argument("--out")
    tick_flags(s)
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("faults", help="run the six fault-injection scenarios")
    io_flags(f, need_oa=True)
    f.add_argument("--mode", default="dynamic,shai")
    f.set_defaults(func=cmd_faults)

    rp = sub.add_parser("report", help="re-render saved metrics")
    rp.add_argument("--metrics", help="metrics CSV")
    rp.add_argument("--sweep", help="sweep CSV")
    rp.add_argument("--format", choices=("csv", "text"), default="text")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv: list | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "mispredict", None) is not None and isinstance(args.mispredict, float):
        if not 0 <= args.mispredict <= 1:
            parser.error("--mispredict must lie in [0, 1]")
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError, ManifestError, OAFormatError, PolicyError, CorpusError) as e:
        print(f"flowcap {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
