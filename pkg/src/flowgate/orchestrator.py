"""The per-run coordination loop: parse, schedule, execute, review, adapt.

One serialized loop owns the registry and the live graph.  Task execution,
batch simulation, directory watching and decision entry all run elsewhere
and interact with the loop only through an ordered channel (or files), so
the loop never blocks on a task and interleaving-sensitive logic stays in
one place.

Run directory layout:

    run-<id>/
      spec.toml            workflow as submitted
      events.log           append-only registry log (JSON lines)
      state.json           latest snapshot, for fast status display
      orchestrator.pid     while the loop is alive
      prompts/             one JSON per open checkpoint
      decisions/           one JSON per recorded decision (+ inbox/ spool)
      tasks/<base>#<k>/    per-instance workdir, stdout.log / stderr.log
      status/<site>/       completion markers (<base>#<k>.done / .exit)
"""

from __future__ import annotations

import json
import logging
import os
import queue
import secrets
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable

from .config import ExecSiteDecl, WorkflowSpec, to_toml, with_defaults_for_run
from .executors import marker_path, read_exit_code
from .executors.batchsim import BatchSimulator
from .executors.local import (
    LocalHandle,
    MissingInput,
    SpawnError,
    build_plan,
    launch,
    resolve_status_dir,
    verify_outputs,
)
from .graph import InstanceId, LiveGraph, build_initial, ready_set
from .hitl import Decision, DecisionError, HitlEngine, PendingPrompt
from .registry import (
    EVENTS_FILE,
    STATE_FILE,
    Event,
    IllegalTransition,
    JobRegistry,
    TERMINAL,
    TaskState,
    recover,
)
from .runstate import PID_FILE, SPEC_FILE, load as load_run_state
from .watcher import Completion, SiteHealth, SitePoller, Watcher

log = logging.getLogger("flowgate.orchestrator")

BATCH_KINDS = {"batch_sim", "remote_batch"}


class SiteUnavailable(Exception):
    pass


class InternalInvariantViolation(Exception):
    """The registry refused a transition the loop believed legal."""


@dataclass
class RunConfig:
    workdir: Path = Path("runs")
    run_id: str | None = None
    seed: int | None = None
    local_max_concurrent: int = field(default_factory=lambda: os.cpu_count() or 4)
    loop_tick: float = 0.05
    sim_tick: float = 0.05
    decider: Callable[[PendingPrompt, "Orchestrator"], None] | None = None
    event_sink: Callable[[Event], None] | None = None


@dataclass
class RunResult:
    run_id: str
    run_dir: Path
    final_states: dict[InstanceId, TaskState]
    event_log: Path
    wall_time_s: float

    @property
    def all_succeeded(self) -> bool:
        return all(s == TaskState.Succeeded for s in self.final_states.values())


@dataclass(frozen=True)
class _BatchStarted:
    instance: InstanceId
    job_id: int
    site: str
    occurred_at: float


@dataclass(frozen=True)
class _DecisionMsg:
    decision: Decision


@dataclass(frozen=True)
class _CancelMsg:
    instance: InstanceId
    reason: str = "cancel requested"


def new_run_id() -> str:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return f"run-{stamp}-{secrets.token_hex(2)}"


class Orchestrator:
    """Owns one run from activation to a fully terminal instance set."""

    def __init__(self, spec: WorkflowSpec, config: RunConfig, source_text: str | None = None):
        self.spec = with_defaults_for_run(spec, seed=config.seed)
        self.config = config
        self.run_id = config.run_id or new_run_id()
        self.run_dir = Path(config.workdir) / self.run_id
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / SPEC_FILE).write_text(
            source_text if source_text is not None else to_toml(self.spec), encoding="utf-8")

        self.registry = JobRegistry(
            log_path=self.run_dir / EVENTS_FILE, on_event=config.event_sink)
        self.graph = LiveGraph()
        self.hitl = HitlEngine(self.spec, self.registry, self.run_dir)
        self.channel: queue.Queue = queue.Queue()

        self._local: dict[InstanceId, LocalHandle] = {}
        self._local_running: set[InstanceId] = set()
        self._batch: dict[str, BatchSimulator] = {}
        self._batch_cursor: dict[str, int] = {}
        self._batch_jobs: dict[InstanceId, tuple[str, int]] = {}
        self._expected: dict[str, set[InstanceId]] = {}
        self._expected_lock = threading.Lock()
        self._overrides: dict[InstanceId, dict[str, str]] = {}
        self._watcher: Watcher | None = None
        self._stopping = False
        self._resumed = False

    # ------------------------------------------------------------------ setup

    def _used_sites(self) -> list[ExecSiteDecl]:
        names = {decl.execsite for decl in self.spec.tasks.values()}
        return [self.spec.execsites[name] for name in sorted(names)]

    def _prepare_sites(self) -> list[SitePoller]:
        pollers = []
        for site in self._used_sites():
            status_dir = resolve_status_dir(site, self.run_dir)
            try:
                status_dir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                raise SiteUnavailable(f"{site.name}: cannot create {status_dir}: {exc}") from exc
            self._expected.setdefault(site.name, set())
            pollers.append(SitePoller(
                site=site.name,
                status_dir=status_dir,
                poll_interval=site.poll_interval,
            ))
            if site.kind in BATCH_KINDS:
                self._batch[site.name] = BatchSimulator(
                    site, status_dir, tick=self.config.sim_tick)
                self._batch_cursor[site.name] = 0
        return pollers

    def _expected_for(self, site_name: str) -> set[InstanceId]:
        with self._expected_lock:
            return set(self._expected.get(site_name, ()))

    def _expect(self, site_name: str, instance: InstanceId) -> None:
        with self._expected_lock:
            self._expected.setdefault(site_name, set()).add(instance)

    def _unexpect(self, site_name: str, instance: InstanceId) -> None:
        with self._expected_lock:
            self._expected.get(site_name, set()).discard(instance)

    def start(self) -> None:
        (self.run_dir / PID_FILE).write_text(str(os.getpid()), encoding="utf-8")
        pollers = self._prepare_sites()
        if not self._resumed:
            self.graph = build_initial(self.spec)
            for name in self.spec.initial_active:
                self.registry.register(InstanceId(name, 1), detail="activated: initial")
        self._watcher = Watcher(pollers, self.channel, self._expected_for)
        self._watcher.start()

    # ------------------------------------------------------------- main loop

    def run(self) -> RunResult:
        started = time.monotonic()
        self.start()
        try:
            self._loop()
        except IllegalTransition as exc:
            self._abort(f"internal invariant violation: {exc}")
            raise InternalInvariantViolation(str(exc)) from exc
        finally:
            self._shutdown()
        final = self.registry.snapshot()
        return RunResult(
            run_id=self.run_id,
            run_dir=self.run_dir,
            final_states=final,
            event_log=self.run_dir / EVENTS_FILE,
            wall_time_s=time.monotonic() - started,
        )

    def _loop(self) -> None:
        self._dispatch_ready()
        self._write_state(terminal=False)
        while True:
            observations = self._drain_channel()
            observations.extend(self._poll_batch_starts())
            observations.sort(key=self._occurrence_key)
            for obs in observations:
                self._handle(obs)
            self._sweep_inbox()
            self._expire_prompts()
            self._dispatch_ready()
            self._write_state(terminal=False)
            if not self.registry.non_terminal():
                break
        self._write_state(terminal=True)

    def _drain_channel(self) -> list:
        items = []
        try:
            items.append(self.channel.get(timeout=self.config.loop_tick))
        except queue.Empty:
            return items
        while True:
            try:
                items.append(self.channel.get_nowait())
            except queue.Empty:
                return items

    @staticmethod
    def _occurrence_key(obs) -> tuple:
        if isinstance(obs, Completion):
            return (0, obs.marker_mtime, str(obs.instance))
        if isinstance(obs, _BatchStarted):
            return (0, obs.occurred_at, str(obs.instance))
        return (1, 0.0, "")  # decisions/cancels/health after timed observations

    def _poll_batch_starts(self) -> list[_BatchStarted]:
        out = []
        for site_name, sim in self._batch.items():
            cursor, entries = sim.started_since(self._batch_cursor[site_name])
            self._batch_cursor[site_name] = cursor
            for start_time, job_id, instance in entries:
                out.append(_BatchStarted(
                    instance=instance, job_id=job_id, site=site_name,
                    occurred_at=start_time))
        return out

    def _handle(self, obs) -> None:
        if isinstance(obs, Completion):
            self._handle_completion(obs)
        elif isinstance(obs, _BatchStarted):
            self._handle_batch_started(obs)
        elif isinstance(obs, _DecisionMsg):
            self._handle_decision(obs.decision)
        elif isinstance(obs, _CancelMsg):
            self._handle_cancel(obs.instance, obs.reason)
        elif isinstance(obs, SiteHealth):
            log.error("execsite %s unhealthy: %s", obs.site, obs.error)
        else:  # pragma: no cover - defensive
            log.warning("unknown observation %r", obs)

    # -------------------------------------------------------------- handlers

    def _handle_completion(self, comp: Completion) -> None:
        instance = comp.instance
        snapshot = self.registry.snapshot()
        state = snapshot.get(instance)
        if state is None:
            log.warning("completion for unknown instance %s ignored", instance)
            return
        if state in TERMINAL:
            log.debug("duplicate completion for %s ignored", instance)
            return
        if state == TaskState.Submitted:
            # the backend started it but the mirror observation lost the race
            self.registry.transition(instance, TaskState.Running, "running (inferred)")
        decl = self.spec.tasks[instance.base]
        if comp.exit_code == 0:
            missing = verify_outputs(decl, self.run_dir)
            if missing:
                self.registry.transition(
                    instance, TaskState.Failed,
                    f"exit 0 but missing output(s): {', '.join(missing)}")
            else:
                self.registry.transition(instance, TaskState.Succeeded, "exit 0")
        elif comp.exit_code is None:
            self.registry.transition(instance, TaskState.Failed, "unknown exit")
        else:
            self.registry.transition(instance, TaskState.Failed, f"exit {comp.exit_code}")
        self._finalize(instance, comp.site)

    def _finalize(self, instance: InstanceId, site_name: str | None = None) -> None:
        self.graph.mark_terminal(instance)
        self._local.pop(instance, None)
        self._local_running.discard(instance)
        self._batch_jobs.pop(instance, None)
        if site_name:
            self._unexpect(site_name, instance)
        else:
            with self._expected_lock:
                for expected in self._expected.values():
                    expected.discard(instance)
        state = self.registry.state(instance)
        if state in (TaskState.Failed, TaskState.Cancelled):
            self._cancel_dependents(instance, reason=f"dependency {instance} {state.value.lower()}")

    def _cancel_dependents(self, root: InstanceId, reason: str) -> None:
        snapshot = self.registry.snapshot()
        for dep in sorted(self.graph.descendants(root), key=str):
            if snapshot.get(dep) in TERMINAL or dep == root:
                continue
            current = self.registry.state(dep)
            if current in TERMINAL:
                continue
            if current in (TaskState.Submitted, TaskState.Running):
                self._cancel_backend(dep)
            self.registry.transition(dep, TaskState.Cancelled, reason)
            self.graph.mark_terminal(dep)
            prompt = self.hitl.prompts.pop(dep, None)
            if prompt is not None:
                path = self.run_dir / "prompts" / f"{dep}.json"
                if path.exists():
                    path.unlink()

    def _handle_batch_started(self, obs: _BatchStarted) -> None:
        state = self.registry.snapshot().get(obs.instance)
        if state == TaskState.Submitted:
            self.registry.transition(
                obs.instance, TaskState.Running, f"batch job {obs.job_id} started")

    def _handle_decision(self, decision: Decision) -> None:
        try:
            created = self.hitl.submit_decision(decision, self.graph)
        except DecisionError as exc:
            log.warning("decision for %s rejected: %s", decision.instance, exc)
            return
        self._after_decision(decision, created)

    def _after_decision(self, decision: Decision, created: list[InstanceId]) -> None:
        self.graph.mark_terminal(decision.instance)
        for instance in created:
            overrides = decision.param_overrides.get(instance.base)
            if overrides:
                self._overrides[instance] = dict(overrides)
        if decision.verdict == "abort":
            self._cancel_dependents(decision.instance,
                                    reason=f"checkpoint {decision.instance} aborted")
        for name in decision.skip_tasks:
            target = InstanceId.parse(name)
            snapshot = self.registry.snapshot()
            if snapshot.get(target) == TaskState.Pending:
                self.registry.transition(target, TaskState.Cancelled,
                                         f"skipped by decision at {decision.instance}")
                self.graph.mark_terminal(target)
                self._cancel_dependents(target, reason=f"dependency {target} cancelled")
            elif target in snapshot:
                log.warning("skip ignored: %s is %s, not Pending",
                            target, snapshot[target].value)

    def _handle_cancel(self, instance: InstanceId, reason: str) -> None:
        snapshot = self.registry.snapshot()
        state = snapshot.get(instance)
        if state is None or state in TERMINAL:
            return
        if state in (TaskState.Submitted, TaskState.Running):
            self._cancel_backend(instance)
        self.registry.transition(instance, TaskState.Cancelled, reason)
        self._finalize(instance)

    def _cancel_backend(self, instance: InstanceId) -> None:
        handle = self._local.get(instance)
        if handle is not None:
            handle.cancel()
        job = self._batch_jobs.get(instance)
        if job is not None:
            site_name, job_id = job
            self._batch[site_name].cancel(job_id)

    # -------------------------------------------------------------- dispatch

    def _dispatch_ready(self) -> None:
        states = {i: s.value for i, s in self.registry.snapshot().items()}
        for instance in sorted(ready_set(self.graph, states), key=str):
            decl = self.spec.tasks[instance.base]
            site = self.spec.site_for(decl)
            if (site.kind == "local" and not decl.is_checkpoint
                    and len(self._local_running) >= self.config.local_max_concurrent):
                continue  # stays Pending; retried when a slot frees
            self.registry.transition(instance, TaskState.Ready, "dependencies satisfied")
            self._dispatch(instance, decl, site)

    def _dispatch(self, instance: InstanceId, decl, site: ExecSiteDecl) -> None:
        """Route one Ready instance to its backend (checkpoints spawn nothing)."""
        if decl.is_checkpoint:
            self.registry.transition(instance, TaskState.Submitted, "checkpoint")
            self.registry.transition(instance, TaskState.Running, "checkpoint")
            prompt = self.hitl.open_checkpoint(decl, instance)
            if self.config.decider is not None:
                threading.Thread(
                    target=self.config.decider, args=(prompt, self),
                    name=f"decider-{instance}", daemon=True,
                ).start()
            return
        if decl.is_internal_command:
            self.registry.transition(instance, TaskState.Submitted, "internal handler")
            self.registry.transition(instance, TaskState.Running, "internal handler")
            self.registry.transition(
                instance, TaskState.Failed,
                f"unknown internal module {decl.command!r} (only HITL review handlers exist)")
            self._finalize(instance)
            return
        if site.kind in BATCH_KINDS:
            self._dispatch_batch(instance, decl, site)
        else:
            self._dispatch_local(instance, decl, site)

    def _dispatch_local(self, instance: InstanceId, decl, site: ExecSiteDecl) -> None:
        self.registry.transition(instance, TaskState.Submitted, f"local launch on {site.name}")
        self._expect(site.name, instance)
        try:
            plan = build_plan(decl, instance, site, self.run_dir,
                              overrides=self._overrides.get(instance))
            handle = launch(plan)
        except (MissingInput, SpawnError) as exc:
            self._unexpect(site.name, instance)
            self.registry.transition(instance, TaskState.Running, "launch attempt")
            self.registry.transition(instance, TaskState.Failed, str(exc))
            self._finalize(instance)
            return
        self._local[instance] = handle
        self._local_running.add(instance)
        log.debug("%s running as pid %d", instance, handle.proc.pid)
        self.registry.transition(instance, TaskState.Running, "process started")

    def _dispatch_batch(self, instance: InstanceId, decl, site: ExecSiteDecl) -> None:
        sim = self._batch[site.name]
        self._expect(site.name, instance)
        try:
            plan = build_plan(decl, instance, site, self.run_dir,
                              overrides=self._overrides.get(instance))
            job_id = sim.submit(plan.command, instance,
                                workdir=plan.working_dir, env=plan.env)
        except MissingInput as exc:
            self._unexpect(site.name, instance)
            self.registry.transition(instance, TaskState.Submitted, f"submit to {site.name}")
            self.registry.transition(instance, TaskState.Running, "launch attempt")
            self.registry.transition(instance, TaskState.Failed, str(exc))
            self._finalize(instance)
            return
        except Exception as exc:  # QueueFull / SchedulerShutdown
            self._unexpect(site.name, instance)
            self.registry.transition(instance, TaskState.Submitted, f"submit to {site.name}")
            self.registry.transition(instance, TaskState.Running, "submit attempt")
            self.registry.transition(instance, TaskState.Failed, f"batch submit failed: {exc}")
            self._finalize(instance)
            return
        self._batch_jobs[instance] = (site.name, job_id)
        self.registry.transition(
            instance, TaskState.Submitted, f"submitted to {site.name} as job {job_id}")

    # ------------------------------------------------------ decisions / time

    def submit_decision(self, decision: Decision) -> None:
        """Thread-safe decision entry; the loop validates and applies it."""
        self.channel.put(_DecisionMsg(decision))

    def request_cancel(self, instance: InstanceId, reason: str = "cancel requested") -> None:
        self.channel.put(_CancelMsg(instance, reason))

    def _sweep_inbox(self) -> None:
        inbox = self.run_dir / "decisions" / "inbox"
        if not inbox.is_dir():
            return
        for path in sorted(inbox.glob("*.json")):
            try:
                decision = Decision.from_dict(json.loads(path.read_text(encoding="utf-8")))
            except (ValueError, KeyError) as exc:
                log.warning("unparseable decision file %s: %s", path.name, exc)
                path.rename(path.with_suffix(".rejected"))
                continue
            path.unlink()
            self._handle_decision(decision)

    def _expire_prompts(self) -> None:
        for instance in self.hitl.expired():
            log.warning("checkpoint %s timed out", instance)
            prompt_file = self.run_dir / "prompts" / f"{instance}.json"
            if prompt_file.exists():
                prompt_file.unlink()
            self.hitl.prompts.pop(instance, None)
            self.registry.transition(instance, TaskState.Failed, "decision timeout")
            self._finalize(instance)

    # ------------------------------------------------------------- recovery

    def _resolve_in_flight(self) -> None:
        """After a crash: settle instances that were dispatched but not final.

        A marker already on disk resolves the instance normally; without one
        the underlying process is gone, so the instance fails as unknown.
        Ready instances were never submitted and may dispatch normally.
        Nothing is ever dispatched twice.
        """
        snapshot = self.registry.snapshot()
        for instance, state in sorted(snapshot.items(), key=lambda kv: str(kv[0])):
            if state not in (TaskState.Ready, TaskState.Submitted, TaskState.Running):
                continue
            decl = self.spec.tasks[instance.base]
            site = self.spec.site_for(decl)
            if state == TaskState.Ready:
                self._dispatch(instance, decl, site)
                continue
            status_dir = resolve_status_dir(site, self.run_dir)
            if marker_path(status_dir, instance).exists():
                exit_code = read_exit_code(status_dir, instance)
                self._handle_completion(Completion(
                    site=site.name, instance=instance, exit_code=exit_code,
                    marker_mtime=marker_path(status_dir, instance).stat().st_mtime,
                    detected_at=time.time()))
                continue
            if state == TaskState.Submitted:
                self.registry.transition(instance, TaskState.Running, "running (inferred)")
            self.registry.transition(
                instance, TaskState.Failed, "unknown (crash recovery: no marker)")
            self._finalize(instance, site.name)

    def _republish_prompts(self) -> None:
        """AwaitingDecision without a prompt file (crash window): re-publish."""
        snapshot = self.registry.snapshot()
        for instance, state in snapshot.items():
            if state != TaskState.AwaitingDecision or instance in self.hitl.prompts:
                continue
            decl = self.spec.tasks[instance.base]
            if decl.is_checkpoint:
                self.hitl.publish_prompt(decl, instance)

    # ------------------------------------------------------------- shutdown

    def _write_state(self, *, terminal: bool) -> None:
        self.registry.write_state_file(
            self.run_dir / STATE_FILE, run_id=self.run_id, terminal=terminal)

    def _abort(self, reason: str) -> None:
        log.error("aborting run %s: %s", self.run_id, reason)
        snapshot = self.registry.snapshot()
        for instance, state in sorted(snapshot.items(), key=lambda kv: str(kv[0])):
            if state in TERMINAL:
                continue
            self._cancel_backend(instance)
            try:
                self.registry.transition(instance, TaskState.Cancelled, f"aborted: {reason}")
            except IllegalTransition:  # pragma: no cover - defensive
                pass
        self._write_state(terminal=True)

    def _shutdown(self) -> None:
        self._stopping = True
        if self._watcher is not None:
            self._watcher.stop()
        for sim in self._batch.values():
            sim.shutdown(kill_running=True)
        for handle in list(self._local.values()):
            if handle.running:
                handle.cancel()
        self.registry.close()
        pid_file = self.run_dir / PID_FILE
        if pid_file.exists():
            pid_file.unlink()


def run_workflow(spec: WorkflowSpec, config: RunConfig, source_text: str | None = None) -> RunResult:
    """Drive a workflow to completion; returns per-instance final states."""
    return Orchestrator(spec, config, source_text).run()


def resume_run(run_dir: Path, config: RunConfig | None = None) -> RunResult:
    """Continue a crashed run from its run directory.

    The registry is rebuilt by folding the log; the graph replays from the
    log plus decision files.  In-flight instances resolve via markers that
    already exist on disk and are otherwise marked Failed (unknown) — they
    are never dispatched a second time.
    """
    run_dir = Path(run_dir)
    state = load_run_state(run_dir)
    config = config or RunConfig()
    config.workdir = run_dir.parent
    config.run_id = run_dir.name

    orch = Orchestrator.__new__(Orchestrator)
    orch.spec = with_defaults_for_run(state.spec, seed=config.seed)
    orch.config = config
    orch.run_id = run_dir.name
    orch.run_dir = run_dir
    orch.registry = recover(run_dir)
    orch.registry._on_event = config.event_sink
    orch.graph = state.graph
    orch.hitl = HitlEngine(orch.spec, orch.registry, run_dir)
    orch.channel = queue.Queue()
    orch._local = {}
    orch._local_running = set()
    orch._batch = {}
    orch._batch_cursor = {}
    orch._batch_jobs = {}
    orch._expected = {}
    orch._expected_lock = threading.Lock()
    orch._overrides = {}
    orch._watcher = None
    orch._stopping = False
    orch._resumed = True

    # overrides for instances activated by recorded decisions
    for instance, activator in state.activators.items():
        decision = state.decisions.get(activator)
        if decision is not None:
            kv = decision.param_overrides.get(instance.base)
            if kv:
                orch._overrides[instance] = dict(kv)

    started = time.monotonic()
    orch.start()
    try:
        orch._resolve_in_flight()
        # decisions recorded but whose effects never hit the log
        for decision in list(orch.hitl.decisions.values()):
            if orch.registry.snapshot().get(decision.instance) == TaskState.AwaitingDecision:
                log.warning("re-applying recorded decision for %s", decision.instance)
                created = orch.hitl.apply_recorded(decision, orch.graph)
                orch._after_decision(decision, created)
        orch._republish_prompts()
        if config.decider is not None:
            for prompt in list(orch.hitl.prompts.values()):
                threading.Thread(
                    target=config.decider, args=(prompt, orch),
                    name=f"decider-{prompt.instance}", daemon=True,
                ).start()
        orch._loop()
    except IllegalTransition as exc:
        orch._abort(f"internal invariant violation: {exc}")
        raise InternalInvariantViolation(str(exc)) from exc
    finally:
        orch._shutdown()
    final = orch.registry.snapshot()
    return RunResult(
        run_id=orch.run_id,
        run_dir=run_dir,
        final_states=final,
        event_log=run_dir / EVENTS_FILE,
        wall_time_s=time.monotonic() - started,
    )
