"""Reconstructing run state from a run directory.

Everything observable about a run lives in files: ``spec.toml``,
``events.log``, ``prompts/``, ``decisions/``.  Replaying the event log plus
the decision files reproduces the registry states *and* the live graph, so
the status CLI, the HTTP API, and crash recovery all read through here
without touching a live orchestrator.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .config import WorkflowSpec, parse_spec
from .graph import InstanceId, LiveGraph, apply_additions, build_initial
from .hitl import Decision, PendingPrompt, load_decisions, load_prompts
from .registry import EVENTS_FILE, TERMINAL, Event, TaskState, fold, read_log

log = logging.getLogger("flowgate.runstate")

SPEC_FILE = "spec.toml"
PID_FILE = "orchestrator.pid"
RUN_PREFIX = "run-"

_ACTIVATED_BY = re.compile(r"^activated by (.+)$")


class UnknownRun(Exception):
    pass


@dataclass
class RunState:
    run_id: str
    run_dir: Path
    spec: WorkflowSpec
    events: list[Event]
    states: dict[InstanceId, TaskState]
    graph: LiveGraph
    prompts: list[PendingPrompt] = field(default_factory=list)
    decisions: dict[InstanceId, Decision] = field(default_factory=dict)
    activators: dict[InstanceId, InstanceId] = field(default_factory=dict)

    @property
    def terminal(self) -> bool:
        return bool(self.states) and all(s in TERMINAL for s in self.states.values())


def run_dir_for(workdir: Path, run_id: str) -> Path:
    path = Path(workdir) / run_id
    if not (path / EVENTS_FILE).exists() and not (path / SPEC_FILE).exists():
        raise UnknownRun(run_id)
    return path


def list_runs(workdir: Path) -> list[str]:
    workdir = Path(workdir)
    if not workdir.is_dir():
        return []
    return sorted(p.name for p in workdir.iterdir()
                  if p.is_dir() and p.name.startswith(RUN_PREFIX))


def rebuild_graph(spec: WorkflowSpec, events: list[Event]) -> LiveGraph:
    """Replay registrations against the spec to recover the live graph.

    Initial instances come from ``build_initial``; each batch of consecutive
    ``activated by X`` registrations replays the corresponding task addition,
    which recomputes the same generations and edges the orchestrator created.
    """
    graph = build_initial(spec)
    batch: list[str] = []
    batch_after: InstanceId | None = None

    def flush() -> None:
        nonlocal batch, batch_after
        if batch_after is not None and batch:
            created = apply_additions(graph, spec, batch, batch_after)
            for instance, name in zip(created, batch):
                if instance.base != name:  # pragma: no cover - defensive
                    log.warning("graph replay mismatch: %s vs %s", instance, name)
        batch = []
        batch_after = None

    for event in events:
        if event.from_state is not None:
            continue
        match = _ACTIVATED_BY.match(event.detail)
        if match is None:
            # initial activation; build_initial already created it
            flush()
            if event.instance not in graph.instances:
                graph.instances.add(event.instance)
                graph.active.add(event.instance)
            continue
        after = InstanceId.parse(match.group(1))
        if after != batch_after:
            flush()
            batch_after = after
        if event.instance in graph.instances:
            continue  # already replayed (defensive)
        batch.append(event.instance.base)
    flush()
    return graph


def load(run_dir: Path) -> RunState:
    """Full run state from disk; safe to call while the run is live."""
    run_dir = Path(run_dir)
    spec_path = run_dir / SPEC_FILE
    if not spec_path.exists():
        raise UnknownRun(str(run_dir))
    spec = parse_spec(spec_path.read_text(encoding="utf-8"))
    events = read_log(run_dir / EVENTS_FILE)
    states = fold(events)
    graph = rebuild_graph(spec, events)
    for instance, state in states.items():
        if state in TERMINAL:
            graph.mark_terminal(instance)
    activators = {}
    for event in events:
        if event.from_state is None:
            match = _ACTIVATED_BY.match(event.detail)
            if match is not None:
                activators[event.instance] = InstanceId.parse(match.group(1))
    return RunState(
        run_id=run_dir.name,
        run_dir=run_dir,
        spec=spec,
        events=events,
        states=states,
        graph=graph,
        prompts=load_prompts(run_dir),
        decisions=load_decisions(run_dir),
        activators=activators,
    )


def read_pid(run_dir: Path) -> int | None:
    path = Path(run_dir) / PID_FILE
    try:
        return int(path.read_text(encoding="utf-8").strip())
    except (OSError, ValueError):
        return None


# -- JSON projections shared by the CLI --json mode and the HTTP API ---------


def run_summary_json(state: RunState) -> dict:
    counts: dict[str, int] = {}
    for task_state in state.states.values():
        counts[task_state.value] = counts.get(task_state.value, 0) + 1
    return {
        "id": state.run_id,
        "instances": len(state.states),
        "terminal": state.terminal,
        "states": dict(sorted(counts.items())),
        "last_seq": state.events[-1].seq if state.events else 0,
        "pending_prompts": len(state.prompts),
    }


def tasks_json(state: RunState) -> list[dict]:
    out = []
    for instance in sorted(state.states):
        decl = state.spec.tasks.get(instance.base)
        out.append({
            "id": str(instance),
            "base": instance.base,
            "generation": instance.generation,
            "state": state.states[instance].value,
            "execsite": decl.execsite if decl else None,
            "checkpoint": bool(decl and decl.is_checkpoint),
        })
    return out


def graph_json(state: RunState) -> dict:
    nodes = [
        {
            "id": str(instance),
            "base": instance.base,
            "generation": instance.generation,
            "state": state.states.get(instance, TaskState.Pending).value,
        }
        for instance in sorted(state.graph.instances)
    ]
    edges = [
        {"from": str(src), "to": str(dst)}
        for src, dst in sorted(state.graph.edges)
    ]
    return {"nodes": nodes, "edges": edges}


def events_json(state: RunState, since: int = 0) -> list[dict]:
    return [e.as_dict() for e in state.events if e.seq > since]


def prompts_json(state: RunState) -> list[dict]:
    return [p.as_dict() for p in state.prompts]
