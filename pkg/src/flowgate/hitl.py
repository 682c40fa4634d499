"""Human-in-the-loop checkpoints: prompts, decisions, and their effects.

A checkpoint task never spawns a process.  Opening it parks the instance in
AwaitingDecision and publishes a prompt file; only that branch waits.  A
decision completes the checkpoint (approve and reject both complete it —
reject relies on add_tasks for corrective action) and may activate new task
instances and override their input parameters.  The decision JSON on disk
is the single source for decision effects.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone
from pathlib import Path

from .config import TaskDecl, WorkflowSpec
from .graph import InstanceId, LiveGraph, apply_additions
from .registry import JobRegistry, TaskState

log = logging.getLogger("flowgate.hitl")

PROMPTS_DIR = "prompts"
DECISIONS_DIR = "decisions"
INBOX_DIR = "decisions/inbox"

VERDICTS = ("approve", "reject", "abort")


class DecisionError(Exception):
    status = "error"


class NotAwaiting(DecisionError):
    status = "not-awaiting"


class NotPermitted(DecisionError):
    status = "not-permitted"


class DuplicateDecision(DecisionError):
    status = "duplicate"


class UnknownOverrideTarget(DecisionError):
    status = "unknown-override-target"


class InvalidVerdict(DecisionError):
    status = "invalid-verdict"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass(frozen=True)
class Decision:
    """A supervisor's recorded verdict; immutable once written."""

    instance: InstanceId
    verdict: str
    add_tasks: tuple[str, ...] = ()
    param_overrides: dict[str, dict[str, str]] = field(default_factory=dict)
    message: str = ""
    actor: str = "anonymous"
    timestamp: str = field(default_factory=_now)
    skip_tasks: tuple[str, ...] = ()  # cancel these pending instances (extension)

    def as_dict(self) -> dict:
        data = asdict(self)
        data["instance"] = str(self.instance)
        data["add_tasks"] = list(self.add_tasks)
        data["skip_tasks"] = list(self.skip_tasks)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Decision":
        return cls(
            instance=InstanceId.parse(data["instance"]),
            verdict=str(data.get("verdict", "")),
            add_tasks=tuple(data.get("add_tasks") or ()),
            param_overrides={
                str(task): {str(k): str(v) for k, v in (overrides or {}).items()}
                for task, overrides in (data.get("param_overrides") or {}).items()
            },
            message=str(data.get("message", "")),
            actor=str(data.get("actor", "anonymous")),
            timestamp=str(data.get("timestamp") or _now()),
            skip_tasks=tuple(data.get("skip_tasks") or ()),
        )


@dataclass(frozen=True)
class PendingPrompt:
    """What the supervisor sees while a checkpoint awaits their verdict."""

    instance: InstanceId
    message: str
    input_artifact: str
    created_at: str
    allowed_add_tasks: tuple[str, ...] = ()
    decision_output: str = "hitl_decision.json"
    timeout: float | None = None

    def as_dict(self) -> dict:
        return {
            "instance": str(self.instance),
            "message": self.message,
            "input": self.input_artifact,
            "created_at": self.created_at,
            "allowed_add_tasks": list(self.allowed_add_tasks),
            "decision_output": self.decision_output,
            "timeout": self.timeout,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PendingPrompt":
        return cls(
            instance=InstanceId.parse(data["instance"]),
            message=str(data.get("message", "")),
            input_artifact=str(data.get("input", "")),
            created_at=str(data.get("created_at", "")),
            allowed_add_tasks=tuple(data.get("allowed_add_tasks") or ()),
            decision_output=str(data.get("decision_output", "hitl_decision.json")),
            timeout=data.get("timeout"),
        )


def prompt_path(run_dir: Path, instance: InstanceId) -> Path:
    return Path(run_dir) / PROMPTS_DIR / f"{instance}.json"


def decision_path(run_dir: Path, instance: InstanceId) -> Path:
    return Path(run_dir) / DECISIONS_DIR / f"{instance}.json"


def inbox_path(run_dir: Path, instance: InstanceId) -> Path:
    return Path(run_dir) / INBOX_DIR / f"{instance}.json"


def load_prompts(run_dir: Path) -> list[PendingPrompt]:
    directory = Path(run_dir) / PROMPTS_DIR
    prompts = []
    if directory.is_dir():
        for path in sorted(directory.glob("*.json")):
            prompts.append(PendingPrompt.from_dict(json.loads(path.read_text(encoding="utf-8"))))
    return prompts


def load_decisions(run_dir: Path) -> dict[InstanceId, Decision]:
    directory = Path(run_dir) / DECISIONS_DIR
    decisions: dict[InstanceId, Decision] = {}
    if directory.is_dir():
        for path in sorted(directory.glob("*.json")):
            decision = Decision.from_dict(json.loads(path.read_text(encoding="utf-8")))
            decisions[decision.instance] = decision
    return decisions


def apply_overrides(spec: WorkflowSpec, overrides: dict[str, dict[str, str]]) -> dict[str, dict[str, str]]:
    """Effective input maps per task after overrides; the spec is untouched.

    Override keys may be ``input.<label>`` or a bare input label; the label
    must exist on the declared task.
    """
    effective: dict[str, dict[str, str]] = {}
    for task_name, kv in overrides.items():
        decl = spec.tasks.get(task_name)
        if decl is None:
            raise UnknownOverrideTarget(f"override targets undeclared task {task_name!r}")
        inputs = dict(decl.inputs)
        for key, value in kv.items():
            label = key[len("input."):] if key.startswith("input.") else key
            if label not in decl.inputs:
                raise UnknownOverrideTarget(
                    f"task {task_name!r} has no input label {label!r}")
            inputs[label] = str(value)
        effective[task_name] = inputs
    return effective


class HitlEngine:
    """Checkpoint lifecycle driven by the orchestrator's serialized loop."""

    def __init__(self, spec: WorkflowSpec, registry: JobRegistry, run_dir: Path):
        self.spec = spec
        self.registry = registry
        self.run_dir = Path(run_dir)
        (self.run_dir / PROMPTS_DIR).mkdir(parents=True, exist_ok=True)
        (self.run_dir / INBOX_DIR).mkdir(parents=True, exist_ok=True)
        self.prompts: dict[InstanceId, PendingPrompt] = {
            p.instance: p for p in load_prompts(self.run_dir)
        }
        self.decisions: dict[InstanceId, Decision] = load_decisions(self.run_dir)

    def open_checkpoint(self, decl: TaskDecl, instance: InstanceId) -> PendingPrompt:
        """Park the instance in AwaitingDecision and publish its prompt.

        No other instance's state is touched: a checkpoint pauses only its
        own branch and consumes no executor slot while it waits.
        """
        assert decl.hitl is not None and decl.hitl.enabled
        self.registry.transition(instance, TaskState.AwaitingDecision, "checkpoint opened")
        prompt = self.publish_prompt(decl, instance)
        log.info("checkpoint %s awaiting decision: %s", instance, decl.hitl.message.strip())
        return prompt

    def publish_prompt(self, decl: TaskDecl, instance: InstanceId) -> PendingPrompt:
        """Write the prompt file; separate from the state change so crash
        recovery can re-publish a lost prompt."""
        assert decl.hitl is not None
        prompt = PendingPrompt(
            instance=instance,
            message=decl.hitl.message,
            input_artifact=decl.hitl.input,
            created_at=_now(),
            allowed_add_tasks=decl.add_tasks,
            decision_output=decl.hitl.decision_output,
            timeout=decl.hitl.timeout,
        )
        self.prompts[instance] = prompt
        path = prompt_path(self.run_dir, instance)
        path.write_text(json.dumps(prompt.as_dict(), indent=2) + "\n", encoding="utf-8")
        return prompt

    def validate(self, decision: Decision) -> TaskDecl:
        if decision.verdict not in VERDICTS:
            raise InvalidVerdict(f"verdict must be one of {VERDICTS}, got {decision.verdict!r}")
        if decision.instance in self.decisions:
            raise DuplicateDecision(f"{decision.instance} already decided")
        snapshot = self.registry.snapshot()
        state = snapshot.get(decision.instance)
        if state is None:
            raise NotAwaiting(f"unknown instance {decision.instance}")
        if state != TaskState.AwaitingDecision:
            raise NotAwaiting(f"{decision.instance} is {state.value}, not AwaitingDecision")
        decl = self.spec.tasks[decision.instance.base]
        allowed = set(decl.add_tasks)
        illegal = [t for t in decision.add_tasks if t not in allowed]
        if illegal:
            raise NotPermitted(
                f"add_tasks {illegal} not declared on {decl.name} (allowed: {sorted(allowed)})")
        for target in decision.param_overrides:
            if target not in decision.add_tasks:
                raise UnknownOverrideTarget(
                    f"override target {target!r} is not among the tasks being added")
        apply_overrides(self.spec, decision.param_overrides)
        return decl

    def submit_decision(self, decision: Decision, graph: LiveGraph) -> list[InstanceId]:
        """Record the decision and apply its workflow effects.

        approve/reject both complete the checkpoint (reject is flagged, and
        its corrective path comes from add_tasks); abort fails it.  Returns
        the newly activated instances, already registered Pending.
        """
        decl = self.validate(decision)
        self._record(decision, decl)
        return self._apply_effects(decision, graph)

    def apply_recorded(self, decision: Decision, graph: LiveGraph) -> list[InstanceId]:
        """Crash-recovery fix-up: a decision file exists but its effects never
        reached the event log; re-apply without the duplicate check."""
        return self._apply_effects(decision, graph)

    def _apply_effects(self, decision: Decision, graph: LiveGraph) -> list[InstanceId]:
        self.decisions[decision.instance] = decision
        prompt_file = prompt_path(self.run_dir, decision.instance)
        if prompt_file.exists():
            prompt_file.unlink()
        self.prompts.pop(decision.instance, None)

        if decision.verdict == "abort":
            self.registry.transition(decision.instance, TaskState.Failed,
                                     f"decision by {decision.actor}: abort")
            return []
        verdict_note = "approved" if decision.verdict == "approve" else "rejected"
        detail = f"decision by {decision.actor}: {verdict_note}"
        if decision.add_tasks:
            detail += f"; add_tasks={list(decision.add_tasks)}"
        self.registry.transition(decision.instance, TaskState.Succeeded, detail)

        created = apply_additions(graph, self.spec, list(decision.add_tasks), decision.instance)
        for instance in created:
            self.registry.register(instance, detail=f"activated by {decision.instance}")
        return created

    def _record(self, decision: Decision, decl: TaskDecl) -> None:
        payload = json.dumps(decision.as_dict(), indent=2) + "\n"
        authoritative = decision_path(self.run_dir, decision.instance)
        authoritative.parent.mkdir(parents=True, exist_ok=True)
        authoritative.write_text(payload, encoding="utf-8")
        declared = decl.hitl.decision_output if decl.hitl else "hitl_decision.json"
        target = Path(declared)
        if not target.is_absolute():
            target = self.run_dir / target
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(payload, encoding="utf-8")

    def expired(self) -> list[InstanceId]:
        """Prompts whose per-task timeout has elapsed (no timeout: wait forever)."""
        now = datetime.now(timezone.utc)
        out = []
        for instance, prompt in self.prompts.items():
            if prompt.timeout is None:
                continue
            created = datetime.fromisoformat(prompt.created_at)
            if (now - created).total_seconds() > prompt.timeout:
                out.append(instance)
        return out
