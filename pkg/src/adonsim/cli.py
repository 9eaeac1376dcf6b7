"""Command line front end: run scenarios, optimize gains, replay transcripts.

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error (bad
flags, missing or malformed input files). Every artifact except
manifest.json is byte-reproducible for a given scenario and seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__, envs, optimize, runner as runner_mod
from . import scenario as scenario_mod, twin as twin_mod
from .agent import backends, modes, planner

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

FLOAT_FMT = "{:.10g}"


class UsageError(ValueError):
    pass


class ParseError(ValueError):
    """A transcript file that stops mid-record; byte_offset points at the
    first byte the decoder could not consume."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(message)
        self.byte_offset = byte_offset


# -- shared helpers -------------------------------------------------------------

def _resolve_scenario(spec: str, seed: int) -> scenario_mod.Scenario:
    if spec.startswith("cut:"):
        try:
            return scenario_mod.cut_scenario(int(spec.split(":", 1)[1]))
        except ValueError:
            raise UsageError(f"bad cut scenario spec {spec!r}; "
                             "expected cut:<seed>") from None
    if os.path.sep in spec or spec.endswith(".scn") or os.path.exists(spec):
        if not os.path.exists(spec):
            raise UsageError(f"scenario file not found: {spec}")
        with open(spec) as fh:
            text = fh.read()
        name = os.path.splitext(os.path.basename(spec))[0]
        return scenario_mod.load_scenario(text, seed=seed, name=name)
    try:
        return scenario_mod.builtin_scenario(spec, seed=seed)
    except FileNotFoundError:
        raise UsageError(f"no scenario named {spec!r} and no such file"
                         ) from None


def _parse_mode_table(raw: str) -> dict:
    table = {}
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise UsageError(f"bad mode-table entry {part!r}; "
                             "expected kind=Mode")
        kind, mode_name = part.split("=", 1)
        kind = kind.strip()
        if kind not in modes.DEFAULT_MODE_TABLE:
            raise UsageError(f"unknown event kind {kind!r} in mode table")
        try:
            table[kind] = modes.parse_mode(mode_name.strip())
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return table


def _build_backend(name: str):
    if name == "scripted":
        return backends.ScriptedPolicy()
    url = os.environ.get("ADONSIM_BACKEND_URL", "")
    if not url:
        raise UsageError("--backend remote needs ADONSIM_BACKEND_URL set")
    return backends.RemoteChat(url)


def _fmt(v) -> str:
    if isinstance(v, float):
        return FLOAT_FMT.format(v)
    return str(v)


# -- run ------------------------------------------------------------------------

def cmd_run(args) -> int:
    scenario = _resolve_scenario(args.scenario, args.seed)
    out_dir = args.out or f"run-{scenario.name}-s{args.seed}"
    mode_table = _parse_mode_table(args.mode_table) if args.mode_table else None
    backend = _build_backend(args.backend)
    canonical = scenario.name == "canonical"
    started = time.time()

    r = runner_mod.Runner(
        scenario, seed=args.seed, backend=backend, mode_table=mode_table,
        compute_oracle_gap=not args.no_oracle_gap,
        stage_ticks=runner_mod.CANONICAL_STAGE_TICKS if canonical else None,
        aging_windows=runner_mod.CANONICAL_AGING_WINDOWS if canonical
        else None,
        wire_server=args.serve)
    try:
        summary = r.run()
        r.write_artifacts(out_dir)
    finally:
        r.close()

    manifest = {
        "command": "run",
        "scenario": args.scenario,
        "scenario_name": scenario.name,
        "seed": args.seed,
        "backend": args.backend,
        "mode_table": {k: m.value for k, m in (mode_table or {}).items()},
        "serve": bool(args.serve),
        "oracle_gap": not args.no_oracle_gap,
        "package_version": __version__,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ",
                                     time.gmtime(started)),
        "wall_time_s": round(time.time() - started, 3),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    n_failed = sum(1 for t in summary["tasks"]
                   if t["outcome"].startswith("failed"))
    gap = summary.get("mean_add_drop_gap_db")
    print(f"{scenario.name}: {summary['ticks']} ticks, "
          f"{len(summary['tasks'])} tasks ({n_failed} failed), "
          + (f"mean add/drop gap {gap:.3f} dB, " if gap is not None else "")
          + f"artifacts in {out_dir}")
    return EXIT_OK


# -- optimize --------------------------------------------------------------------

def _operating_load(scenario: scenario_mod.Scenario) -> int:
    for ev in scenario.events:
        if ev.kind == "establish-batches":
            return ev.n_batches * scenario_mod.BATCH_SIZE
        if ev.kind == "set-load":
            return ev.target_load
    return 20


def _truth_env(scenario: scenario_mod.Scenario, seed: int) -> envs.TwinEnv:
    """Optimization environment whose model carries the true hidden plant
    parameters, at the scenario's first operating load."""
    root = np.random.SeedSequence(seed)
    truth_s = root.spawn(1)[0]
    state = scenario_mod.SimulatorState(scenario, truth_s)
    state.apply_wavelength_change(_operating_load(scenario))
    params = twin_mod.TwinParameters(
        extra_loss_db=state.truth.hidden_extra_loss_db
        + state.truth.aging_offset_db,
        nf_db=state.truth.hidden_nf_db)
    twin = twin_mod.DigitalTwin(state.nominal_link(), params=params)
    return envs.TwinEnv(twin, state.grid.active, state.grid.is_real,
                        initial_gains=state.gains_db(),
                        initial_tilts=state.tilts_db())


def cmd_optimize(args) -> int:
    scenario = _resolve_scenario(args.scenario, args.seed)
    out_dir = args.out or f"opt-{scenario.name}-{args.method}-s{args.seed}"
    env = _truth_env(scenario, args.seed)

    if args.method == "brute":
        report = optimize.brute_force(env)
    elif args.method == "coord":
        report = optimize.coordinate_ascent(env, include_tilts=False)
    elif args.method == "bo":
        report = optimize.bayes_opt(env, budget=args.budget or 50,
                                    seed=args.seed)
    elif args.method == "react":
        backend = _build_backend(args.backend)
        report = planner.react_optimize(env, backend,
                                        max_iters=args.budget or 10 ** 6)
    else:
        raise UsageError(f"unknown method {args.method!r}")

    if args.method == "brute":
        oracle = report
    else:
        oracle = optimize.brute_force(env)
    gap = oracle.best_value - report.best_value

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eval", "tick"]
                   + [f"gain{a}_db" for a in range(6)]
                   + [f"tilt{a}_db" for a in range(6)]
                   + ["min_q_db"])
        for i, s in enumerate(report.trace):
            w.writerow([i, s.tick]
                       + [_fmt(g) for g in s.config.gains]
                       + [_fmt(t) for t in s.config.tilts]
                       + [_fmt(s.value)])
        # footer: gap to the exhaustive-grid oracle, eval column marks it
        w.writerow(["gap", ""] + [""] * 12 + [_fmt(gap)])
    with open(os.path.join(out_dir, "optimize_summary.json"), "w") as fh:
        json.dump({
            "method": args.method,
            "scenario": scenario.name,
            "seed": args.seed,
            "budget": args.budget,
            "evaluations": report.evaluations,
            "best_gains_db": list(report.best_config.gains),
            "best_tilts_db": list(report.best_config.tilts),
            "best_min_q_db": report.best_value,
            "oracle_best_db": oracle.best_value,
            "gap_db": gap,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")

    print(f"{args.method}: best min-Q {report.best_value:.4f} dB in "
          f"{report.evaluations} evaluations; exhaustive-grid best "
          f"{oracle.best_value:.4f} dB (gap {gap:+.4f} dB); "
          f"trace in {out_dir}")
    return EXIT_OK


# -- replay ----------------------------------------------------------------------

def iter_transcripts(path: str):
    """Yield (byte_offset, record) per line; raise ParseError on a record
    that cannot be decoded, naming where it broke."""
    with open(path, "rb") as fh:
        blob = fh.read()
    offset = 0
    while offset < len(blob):
        nl = blob.find(b"\n", offset)
        end = len(blob) if nl < 0 else nl
        line = blob[offset:end]
        if line.strip():
            try:
                yield offset, json.loads(line.decode("utf-8"))
            except json.JSONDecodeError as exc:
                raise ParseError(
                    f"transcript record truncated or corrupt at byte "
                    f"{offset + exc.pos} (record starting at byte {offset})",
                    offset + exc.pos) from None
            except UnicodeDecodeError as exc:
                raise ParseError(
                    f"transcript is not valid UTF-8 at byte "
                    f"{offset + exc.start}", offset + exc.start) from None
        if nl < 0:
            break
        offset = nl + 1


def render_transcripts(path: str, out=None) -> int:
    if out is None:
        out = sys.stdout  # bound late so redirection works
    n = 0
    for _, rec in iter_transcripts(path):
        n += 1
        out.write(f"task {n}: tick {rec.get('tick')} {rec.get('kind')} "
                  f"[{rec.get('mode')}] -> {rec.get('outcome')}\n")
        for i, entry in enumerate(rec.get("entries", []), start=1):
            kind = entry.get("kind", "?")
            if kind == "action":
                args_s = json.dumps(entry.get("args", {}), sort_keys=True)
                out.write(f"  step {i} action: {entry.get('tool')} "
                          f"{args_s} (tick {entry.get('tick')})\n")
            else:
                out.write(f"  step {i} {kind}: {entry.get('text', '')}\n")
    return n


def cmd_replay(args) -> int:
    path = args.path
    if os.path.isdir(path):
        path = os.path.join(path, "transcripts.jsonl")
    if not os.path.exists(path):
        raise UsageError(f"no transcript file at {path}")
    n = render_transcripts(path)
    print(f"replayed {n} task transcripts from {path}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="adonsim",
        description="Deterministic optical-link simulator with an "
                    "autonomous operations agent.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario end to end")
    run_p.add_argument("--scenario", default="canonical",
                       help="builtin name, cut:<seed>, or path to a .scn file")
    run_p.add_argument("--seed", type=int, default=7)
    run_p.add_argument("--out", default=None, help="artifact directory")
    run_p.add_argument("--mode-table", default=None,
                       help="overrides, e.g. set-load=LlmNative,qdrop=RuleCentric")
    run_p.add_argument("--backend", choices=("scripted", "remote"),
                       default="scripted")
    run_p.add_argument("--serve", action="store_true",
                       help="expose the control service over TCP and drive "
                            "all config writes through it")
    run_p.add_argument("--no-oracle-gap", action="store_true",
                       help="skip the exhaustive-grid comparison after each "
                            "optimization")
    run_p.set_defaults(fn=cmd_run)

    opt_p = sub.add_parser("optimize", help="tune gains on a known-truth model")
    opt_p.add_argument("--scenario", default="canonical")
    opt_p.add_argument("--seed", type=int, default=7)
    opt_p.add_argument("--out", default=None)
    opt_p.add_argument("--method", choices=("brute", "coord", "bo", "react"),
                       default="coord")
    opt_p.add_argument("--budget", type=int, default=None,
                       help="evaluation budget (bayes) or iteration cap (react)")
    opt_p.add_argument("--backend", choices=("scripted", "remote"),
                       default="scripted")
    opt_p.set_defaults(fn=cmd_optimize)

    rep_p = sub.add_parser("replay",
                           help="render a transcripts.jsonl deterministically")
    rep_p.add_argument("path", help="artifact directory or transcript file")
    rep_p.set_defaults(fn=cmd_replay)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except scenario_mod.ParseError as exc:
        print(f"error: scenario parse failure: {exc} "
              f"(line {exc.line}, column {exc.column})", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (scenario_mod.ValidationError, planner.PlanRejected,
            planner.ExecutionAborted, planner.MalformedAction) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except BrokenPipeError:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
