"""HTTP surface over run directories: state, events, prompts, decisions.

The API is a pure view plus an event injector.  Reads are folds of the
persisted log (never a live registry reference), so nothing here can block
an orchestrator loop; the only write, POST decision, validates against the
current fold and drops the decision into the run's inbox, where the loop
picks it up — observationally equivalent to the CLI decide command.

POSTs can be protected with a shared token: set FLOWGATE_API_TOKEN and
clients must send ``Authorization: Bearer <token>``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.responses import FileResponse, JSONResponse

from . import runstate
from .graph import InstanceId
from .hitl import (
    Decision,
    DecisionError,
    DuplicateDecision,
    NotPermitted,
    UnknownOverrideTarget,
    inbox_path,
)
from .registry import TaskState

TOKEN_ENV = "FLOWGATE_API_TOKEN"

LONG_POLL_STEP_S = 0.1


def _load(workdir: Path, run_id: str) -> runstate.RunState:
    try:
        run_dir = runstate.run_dir_for(workdir, run_id)
        return runstate.load(run_dir)
    except runstate.UnknownRun:
        raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")


def create_app(workdir: Path | str) -> FastAPI:
    workdir = Path(workdir)
    app = FastAPI(title="flowgate", version="0.1.0")

    @app.get("/runs")
    def list_runs() -> list[dict]:
        out = []
        for run_id in runstate.list_runs(workdir):
            try:
                out.append(runstate.run_summary_json(runstate.load(workdir / run_id)))
            except Exception:
                out.append({"id": run_id, "error": "unreadable"})
        return out

    @app.get("/runs/{run_id}")
    def run_summary(run_id: str) -> dict:
        return runstate.run_summary_json(_load(workdir, run_id))

    @app.get("/runs/{run_id}/tasks")
    def run_tasks(run_id: str) -> list[dict]:
        return runstate.tasks_json(_load(workdir, run_id))

    @app.get("/runs/{run_id}/graph")
    def run_graph(run_id: str) -> dict:
        return runstate.graph_json(_load(workdir, run_id))

    @app.get("/runs/{run_id}/events")
    def run_events(
        run_id: str,
        since: int = Query(default=0, ge=0),
        wait: float = Query(default=0.0, ge=0.0, le=30.0),
    ) -> list[dict]:
        """Events with seq > since; ``wait`` long-polls until new ones arrive."""
        import time as _time
        deadline = _time.monotonic() + wait
        while True:
            state = _load(workdir, run_id)
            events = runstate.events_json(state, since=since)
            if events or _time.monotonic() >= deadline:
                return events
            _time.sleep(LONG_POLL_STEP_S)

    @app.get("/runs/{run_id}/prompts")
    def run_prompts(run_id: str) -> list[dict]:
        return runstate.prompts_json(_load(workdir, run_id))

    @app.get("/runs/{run_id}/prompts/{instance}/artifact")
    def prompt_artifact(run_id: str, instance: str):
        state = _load(workdir, run_id)
        target = InstanceId.parse(instance)
        prompt = next((p for p in state.prompts if p.instance == target), None)
        if prompt is None:
            if target in state.decisions:
                raise HTTPException(status_code=409, detail=f"{instance} already decided")
            raise HTTPException(status_code=404, detail=f"no pending prompt for {instance}")
        artifact = Path(prompt.input_artifact)
        if not artifact.is_absolute():
            artifact = state.run_dir / artifact
        if not artifact.is_file():
            raise HTTPException(status_code=404, detail=f"artifact missing: {prompt.input_artifact}")
        return FileResponse(artifact)

    @app.post("/runs/{run_id}/tasks/{instance}/decision")
    async def post_decision(run_id: str, instance: str, request: Request):
        _check_token(request)
        state = _load(workdir, run_id)
        target = InstanceId.parse(instance)
        try:
            body = await request.json()
        except json.JSONDecodeError:
            raise HTTPException(status_code=400, detail="body must be JSON")
        body["instance"] = str(target)
        decision = Decision.from_dict(body)
        try:
            _validate_against(state, decision)
        except DuplicateDecision as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except (NotPermitted, UnknownOverrideTarget) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except DecisionError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        spool = inbox_path(state.run_dir, target)
        spool.parent.mkdir(parents=True, exist_ok=True)
        try:
            with open(spool, "x", encoding="utf-8") as fh:
                fh.write(json.dumps(decision.as_dict(), indent=2) + "\n")
        except FileExistsError:
            raise HTTPException(status_code=409, detail=f"{instance} already has a queued decision")
        return JSONResponse(status_code=200, content=decision.as_dict())

    def _check_token(request: Request) -> None:
        token = os.environ.get(TOKEN_ENV)
        if not token:
            return
        header = request.headers.get("authorization", "")
        if header != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or bad bearer token")

    return app


def _validate_against(state: runstate.RunState, decision: Decision) -> None:
    """Mirror of the engine-side validation, evaluated on the persisted fold.

    The orchestrator revalidates inside its serialized loop; this pre-check
    exists so HTTP clients get the right status code synchronously.
    """
    from .hitl import InvalidVerdict, NotAwaiting, VERDICTS, apply_overrides

    if decision.verdict not in VERDICTS:
        raise InvalidVerdict(f"verdict must be one of {VERDICTS}")
    if decision.instance in state.decisions:
        raise DuplicateDecision(f"{decision.instance} already decided")
    current = state.states.get(decision.instance)
    if current is None:
        raise NotAwaiting(f"unknown instance {decision.instance}")
    if current != TaskState.AwaitingDecision:
        raise NotAwaiting(f"{decision.instance} is {current.value}, not AwaitingDecision")
    decl = state.spec.tasks[decision.instance.base]
    allowed = set(decl.add_tasks)
    illegal = [t for t in decision.add_tasks if t not in allowed]
    if illegal:
        raise NotPermitted(
            f"add_tasks {illegal} not declared on {decl.name} (allowed: {sorted(allowed)})")
    for target in decision.param_overrides:
        if target not in decision.add_tasks:
            raise UnknownOverrideTarget(
                f"override target {target!r} is not among the tasks being added")
    apply_overrides(state.spec, decision.param_overrides)
