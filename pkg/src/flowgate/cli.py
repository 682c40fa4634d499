"""Command-line entry point: submit, inspect, and decide on workflows.

Every command is scriptable: stable exit codes (0 ok, 1 diagnostics or
failed instances, 2 usage), line-oriented output, and a ``--json`` mode
emitting the same data as the HTTP API.  The default run root comes from
FLOWGATE_WORKDIR (falling back to ./runs).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from . import runstate
from .config import SpecError, parse_spec, validate_acyclic
from .graph import InstanceId, build_initial, to_dot
from .hitl import Decision, DecisionError, DuplicateDecision, inbox_path
from .orchestrator import RunConfig, new_run_id, resume_run, run_workflow
from .registry import TERMINAL, TaskState

log = logging.getLogger("flowgate.cli")

WORKDIR_ENV = "FLOWGATE_WORKDIR"


def default_workdir() -> Path:
    return Path(os.environ.get(WORKDIR_ENV, "runs"))


# ------------------------------------------------------------------ validate


def cmd_validate(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        print(f"file={path} table= key= msg=no such file", file=sys.stderr)
        return 1
    try:
        spec = parse_spec(path.read_text(encoding="utf-8"))
        validate_acyclic(spec)
    except SpecError as exc:
        if args.json:
            print(json.dumps({"file": str(path), **exc.as_dict()}))
        else:
            print(f"file={path} table={exc.table} key={exc.key} msg={exc.message}",
                  file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps({
            "file": str(path), "ok": True,
            "tasks": len(spec.tasks), "initial_active": list(spec.initial_active),
        }))
    else:
        print(f"{path}: ok ({len(spec.tasks)} tasks, "
              f"{len(spec.initial_active)} initially active)")
    return 0


# ----------------------------------------------------------------------- run


def _print_event(event) -> None:
    frm = event.from_state.value if event.from_state else "-"
    print(f"[{event.seq:4d}] {event.instance}: {frm} -> {event.to_state.value}"
          + (f"  ({event.detail})" if event.detail else ""), flush=True)


def _final_table(final_states) -> str:
    width = max((len(str(i)) for i in final_states), default=8)
    lines = [f"{'INSTANCE':<{width}}  STATE"]
    for instance in sorted(final_states, key=str):
        lines.append(f"{str(instance):<{width}}  {final_states[instance].value}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    path = Path(args.path)
    try:
        source = path.read_text(encoding="utf-8")
        spec = parse_spec(source)
        validate_acyclic(spec)
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return 1
    except SpecError as exc:
        print(f"file={path} table={exc.table} key={exc.key} msg={exc.message}",
              file=sys.stderr)
        return 1

    workdir = Path(args.workdir)
    run_id = args.run_id or new_run_id()

    if args.detach:
        child_args = [sys.executable, "-m", "flowgate", "run", str(path),
                      "--workdir", str(workdir), "--run-id", run_id]
        if args.seed is not None:
            child_args += ["--seed", str(args.seed)]
        workdir.mkdir(parents=True, exist_ok=True)
        child_log = open(workdir / f"{run_id}.log", "ab")
        subprocess.Popen(child_args, stdout=child_log, stderr=child_log,
                         start_new_session=True)
        child_log.close()
        print(run_id)
        return 0

    config = RunConfig(
        workdir=workdir,
        run_id=run_id,
        seed=args.seed,
        event_sink=None if args.quiet else _print_event,
    )
    result = run_workflow(spec, config, source_text=source)
    if not args.quiet:
        print()
        print(_final_table(result.final_states))
        print(f"\nrun {result.run_id} finished in {result.wall_time_s:.1f}s "
              f"(events: {result.event_log})")
    else:
        print(result.run_id)
    bad = [s for s in result.final_states.values()
           if s in (TaskState.Failed, TaskState.Cancelled)]
    return 1 if bad else 0


def cmd_resume(args) -> int:
    workdir = Path(args.workdir)
    try:
        run_dir = runstate.run_dir_for(workdir, args.run_id)
    except runstate.UnknownRun:
        print(f"unknown run {args.run_id!r} in {workdir}", file=sys.stderr)
        return 1
    config = RunConfig(workdir=workdir, run_id=args.run_id,
                       event_sink=None if args.quiet else _print_event)
    result = resume_run(run_dir, config)
    if not args.quiet:
        print()
        print(_final_table(result.final_states))
    bad = [s for s in result.final_states.values()
           if s in (TaskState.Failed, TaskState.Cancelled)]
    return 1 if bad else 0


# -------------------------------------------------------------------- status


def _load_run(workdir: Path, run_id: str) -> runstate.RunState | None:
    try:
        return runstate.load(runstate.run_dir_for(workdir, run_id))
    except runstate.UnknownRun:
        return None


def cmd_status(args) -> int:
    workdir = Path(args.workdir)
    state = _load_run(workdir, args.run_id)
    if state is None:
        print(f"unknown run {args.run_id!r} in {workdir}", file=sys.stderr)
        return 1
    while True:
        if args.json:
            print(json.dumps({
                "run": runstate.run_summary_json(state),
                "tasks": runstate.tasks_json(state),
            }))
        else:
            table = {i: s for i, s in state.states.items()}
            print(_final_table(table))
            for prompt in state.prompts:
                print(f"awaiting decision: {prompt.instance} — {prompt.message.strip()}")
        if not args.watch or state.terminal:
            return 0
        time.sleep(args.interval)
        state = _load_run(workdir, args.run_id)
        if state is None:
            return 1
        print()


# -------------------------------------------------------------------- decide


def _parse_overrides(pairs: list[str]) -> dict[str, dict[str, str]]:
    overrides: dict[str, dict[str, str]] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--set expects task.key=value, got {pair!r}")
        target, value = pair.split("=", 1)
        if "." not in target:
            raise ValueError(f"--set expects task.key=value, got {pair!r}")
        task, key = target.split(".", 1)
        overrides.setdefault(task, {})[key] = value
    return overrides


def cmd_decide(args) -> int:
    verdict = "approve" if args.approve else ("reject" if args.reject else "abort")
    try:
        overrides = _parse_overrides(args.set or [])
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    decision = Decision(
        instance=InstanceId.parse(args.instance),
        verdict=verdict,
        add_tasks=tuple(args.add_task or ()),
        param_overrides=overrides,
        message=args.message or "",
        actor=args.actor,
        skip_tasks=tuple(args.skip_task or ()),
    )

    if args.remote:
        return _decide_remote(args.remote, args.run_id, decision, json_mode=args.json)

    workdir = Path(args.workdir)
    state = _load_run(workdir, args.run_id)
    if state is None:
        print(f"unknown run {args.run_id!r} in {workdir}", file=sys.stderr)
        return 1
    from .api import _validate_against
    try:
        _validate_against(state, decision)
    except DecisionError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    spool = inbox_path(state.run_dir, decision.instance)
    spool.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(spool, "x", encoding="utf-8") as fh:
            fh.write(json.dumps(decision.as_dict(), indent=2) + "\n")
    except FileExistsError:
        print(f"DuplicateDecision: {decision.instance} already has a queued decision",
              file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(decision.as_dict()))
    else:
        print(f"decision recorded for {decision.instance}: {verdict}"
              + (f" add_tasks={list(decision.add_tasks)}" if decision.add_tasks else ""))
    return 0


def _decide_remote(base_url: str, run_id: str, decision: Decision, *, json_mode: bool) -> int:
    import httpx

    url = f"{base_url.rstrip('/')}/runs/{run_id}/tasks/{decision.instance}/decision"
    headers = {}
    token = os.environ.get("FLOWGATE_API_TOKEN")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    response = httpx.post(url, json=decision.as_dict(), headers=headers, timeout=30.0)
    if response.status_code == 200:
        if json_mode:
            print(response.text)
        else:
            print(f"decision recorded for {decision.instance}: {decision.verdict}")
        return 0
    print(f"HTTP {response.status_code}: {response.json().get('detail', response.text)}",
          file=sys.stderr)
    return 1


# --------------------------------------------------------------------- graph


def cmd_graph(args) -> int:
    target = Path(args.target)
    if target.is_file():
        try:
            spec = parse_spec(target.read_text(encoding="utf-8"))
            validate_acyclic(spec)
        except SpecError as exc:
            print(f"file={target} table={exc.table} key={exc.key} msg={exc.message}",
                  file=sys.stderr)
            return 1
        graph = build_initial(spec)
        inactive = [name for name in spec.tasks if name not in spec.initial_active]
        if args.format == "json":
            print(json.dumps({
                "nodes": [{"id": str(i), "base": i.base, "generation": i.generation,
                           "state": "Pending"} for i in sorted(graph.instances)]
                         + [{"id": name, "base": name, "generation": 0,
                             "state": "declared"} for name in inactive],
                "edges": [{"from": str(a), "to": str(b)} for a, b in sorted(graph.edges)],
            }))
        else:
            print(to_dot(graph, inactive_declared=inactive), end="")
        return 0

    state = _load_run(Path(args.workdir), args.target)
    if state is None:
        print(f"{args.target!r} is neither a workflow file nor a run id", file=sys.stderr)
        return 1
    if args.format == "json":
        print(json.dumps(runstate.graph_json(state)))
    else:
        states = {i: s.value for i, s in state.states.items()}
        print(to_dot(state.graph, states), end="")
    return 0


# --------------------------------------------------------------------- serve


def cmd_serve(args) -> int:
    import uvicorn

    from .api import create_app

    app = create_app(Path(args.workdir))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowgate",
        description="Declarative task-graph orchestration with asynchronous "
                    "human-in-the-loop checkpoints.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a workflow file")
    p.add_argument("path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute a workflow")
    p.add_argument("path")
    p.add_argument("--workdir", default=str(default_workdir()))
    p.add_argument("--detach", action="store_true", help="start the run and return its id")
    p.add_argument("--seed", type=int, default=None, help="override batch-site seeds")
    p.add_argument("--run-id", default=None, help=argparse.SUPPRESS)
    p.add_argument("--quiet", action="store_true", help="print only the run id")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue a crashed run")
    p.add_argument("run_id")
    p.add_argument("--workdir", default=str(default_workdir()))
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("status", help="show instance states for a run")
    p.add_argument("run_id")
    p.add_argument("--workdir", default=str(default_workdir()))
    p.add_argument("--watch", action="store_true")
    p.add_argument("--interval", type=float, default=1.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("decide", help="answer a pending checkpoint")
    p.add_argument("run_id")
    p.add_argument("instance")
    verdict = p.add_mutually_exclusive_group(required=True)
    verdict.add_argument("--approve", action="store_true")
    verdict.add_argument("--reject", action="store_true")
    verdict.add_argument("--abort", action="store_true")
    p.add_argument("--add-task", action="append", metavar="NAME",
                   help="activate a declared task (repeatable)")
    p.add_argument("--set", action="append", metavar="TASK.KEY=VALUE",
                   help="override an input of a task being added (repeatable)")
    p.add_argument("--skip-task", action="append", metavar="INSTANCE",
                   help="cancel a pending instance (repeatable)")
    p.add_argument("--message", default="")
    p.add_argument("--actor", default=os.environ.get("USER", "cli"))
    p.add_argument("--workdir", default=str(default_workdir()))
    p.add_argument("--remote", metavar="URL", default=None,
                   help="submit via a flowgate API instead of the local workdir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("graph", help="render a workflow file or run as DOT")
    p.add_argument("target", help="workflow file path or run id")
    p.add_argument("--workdir", default=str(default_workdir()))
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("serve", help="serve the HTTP API for a workdir")
    p.add_argument("--workdir", default=str(default_workdir()))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
