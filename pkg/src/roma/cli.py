"""``roma`` command line: run a task, optimize instructions, inspect traces, check configs.

Exit codes: 0 success, 1 the run or check failed, 2 configuration or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import (
    METRICS,
    ConfigError,
    ConfigFile,
    build_budget,
    build_engine,
    build_instructions,
    build_pool,
    build_templates,
    build_verifiers,
    build_weights,
    load_config,
)
from .context_store import ArtifactStore, StorageError
from .gepa.edits import ModuleInstruction
from .gepa.optimizer import optimize
from .task_model import NodeStatus
from .trace import (
    Trace,
    TraceError,
    check_trace_shape,
    format_breakdown,
    max_observed_parallelism,
    render_tree,
    role_breakdown,
    schedule_records,
)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("roma")


def _err(msg: str) -> None:
    print(f"roma: {msg}", file=sys.stderr)


def _load(path: str | None) -> ConfigFile:
    if path is None:
        return ConfigFile()
    return load_config(path)


def instruction_filename(module_id: str) -> str:
    return module_id.replace(":", ".") + ".txt"


# -- run ------------------------------------------------------------------------


def cmd_run(args) -> int:
    if args.config is None and not args.mock:
        _err("--config is required unless --mock is given")
        return EXIT_CONFIG
    trace_out = Path(args.trace_out)
    artifacts_dir = Path(args.artifacts) if args.artifacts else trace_out.with_name(trace_out.name + ".artifacts")
    try:
        cfg = _load(args.config)
        store = ArtifactStore(artifacts_dir)
        engine = build_engine(
            cfg, mock=args.mock, store=store, max_depth=args.max_depth, concurrency_limit=args.concurrency
        )
    except (ConfigError, StorageError, OSError) as e:
        _err(str(e))
        return EXIT_CONFIG
    outcome = engine.run(args.task)
    try:
        trace_out.parent.mkdir(parents=True, exist_ok=True)
        trace_out.write_text(outcome.trace.export(), encoding="utf-8")
    except OSError as e:
        _err(f"cannot write trace {trace_out}: {e.strerror or e}")
        return EXIT_CONFIG
    result = outcome.result
    if result.ok:
        print(result.summary)
    else:
        _err(f"run failed: {result.diagnostic}")
    print()
    print(format_breakdown(role_breakdown(outcome.trace)))
    return EXIT_OK if result.status is NodeStatus.DONE else EXIT_FAILED


# -- optimize -------------------------------------------------------------------


def load_devset(path: str | Path) -> list[dict]:
    """JSON list or JSON-lines file of examples."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        data = json.loads(text)
    else:
        data = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not all(isinstance(ex, dict) for ex in data):
        raise ValueError("devset entries must be JSON objects")
    return data


def cmd_optimize(args) -> int:
    out = Path(args.out)
    try:
        cfg = load_config(args.config)
        if cfg.gepa is None:
            raise ConfigError("config has no [gepa] section")
        g = cfg.gepa
        devset = load_devset(args.devset)
        pool, judge, merger = build_pool(cfg)
        instructions = build_instructions(cfg)
        templates = build_templates(cfg)
        modules = g.modules or sorted({ex["module"] for ex in devset if "module" in ex})
        missing = [m for m in modules if m not in instructions]
        if missing:
            raise ConfigError(f"no instruction text for modules {missing}")
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".roma-write-check"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except (ConfigError, ValueError, OSError) as e:
        _err(str(e))
        return EXIT_CONFIG
    state = {m: ModuleInstruction(m, instructions[m]) for m in modules}
    final, report = optimize(
        state,
        devset,
        build_budget(g),
        METRICS[g.metric],
        pool,
        judge,
        merger=merger,
        verifiers=build_verifiers(g),
        weights=build_weights(g),
        merge_enabled=g.merge,
        patience=g.patience,
        target_utility=g.target_utility,
        seed=g.seed,
        minibatch_size=g.minibatch_size,
        templates=templates,
    )
    try:
        for m, ins in final.items():
            (out / instruction_filename(m)).write_text(ins.instruction_text, encoding="utf-8")
        (out / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    except OSError as e:
        _err(f"cannot write outputs to {out}: {e.strerror or e}")
        return EXIT_CONFIG
    print(
        f"utility {report.initial_utility} -> {report.final_utility} "
        f"in {report.metric_calls} metric calls ({report.stop_reason})"
    )
    return EXIT_OK


# -- trace ----------------------------------------------------------------------


def _read_trace(path: str) -> Trace:
    try:
        return Trace.load(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError) as e:
        raise TraceError(f"cannot read {path}: {e}") from e


def cmd_trace(args) -> int:
    try:
        run = _read_trace(args.file)
    except TraceError as e:
        _err(str(e))
        return EXIT_CONFIG
    if args.action == "show":
        print(render_tree(run))
        return EXIT_OK
    if args.action == "check":
        violations = check_trace_shape(run)
        for v in violations:
            print(v)
        if violations:
            _err(f"{len(violations)} trace-shape violation(s)")
            return EXIT_FAILED
        print("ok")
        return EXIT_OK
    print(format_breakdown(role_breakdown(run)))
    print(f"\nmax observed parallelism: {max_observed_parallelism(schedule_records(run))}")
    return EXIT_OK


# -- config ---------------------------------------------------------------------


def cmd_config(args) -> int:
    try:
        cfg = load_config(args.file)
        build_engine(cfg, mock=not cfg.assignments)
        if cfg.gepa is not None:
            build_pool(cfg)
    except ConfigError as e:
        _err(str(e))
        return EXIT_CONFIG
    print("config ok")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roma", description="Recursive task decomposition runner.")
    p.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="solve one task")
    r.add_argument("--task", required=True)
    r.add_argument("--config")
    r.add_argument("--max-depth", type=int)
    r.add_argument("--concurrency", type=int)
    r.add_argument("--trace-out", default="roma_trace.ndjson")
    r.add_argument("--artifacts", help="artifact directory (default: <trace-out>.artifacts)")
    r.add_argument("--mock", action="store_true", help="use the built-in arithmetic mock agents")
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("optimize", help="optimize module instructions against a devset")
    o.add_argument("--config", required=True)
    o.add_argument("--devset", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_optimize)

    t = sub.add_parser("trace", help="inspect a trace file")
    t.add_argument("action", choices=["show", "check", "stats"])
    t.add_argument("file")
    t.set_defaults(func=cmd_trace)

    c = sub.add_parser("config", help="configuration utilities")
    c.add_argument("action", choices=["check"])
    c.add_argument("file")
    c.set_defaults(func=cmd_config)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
