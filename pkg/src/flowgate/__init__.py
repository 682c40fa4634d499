"""flowgate: declarative task-graph orchestration with asynchronous
human-in-the-loop checkpoints across local and batch execution sites."""

from .config import (
    CycleError,
    ExecSiteDecl,
    HitlSpec,
    SpecError,
    TaskDecl,
    WorkflowSpec,
    parse_spec,
    to_toml,
    validate_acyclic,
)
from .graph import InstanceId, LiveGraph, apply_additions, build_initial, ready_set
from .hitl import Decision, PendingPrompt
from .orchestrator import Orchestrator, RunConfig, RunResult, resume_run, run_workflow
from .registry import Event, JobRegistry, TaskState

__version__ = "0.1.0"

__all__ = [
    "CycleError",
    "Decision",
    "Event",
    "ExecSiteDecl",
    "HitlSpec",
    "InstanceId",
    "JobRegistry",
    "LiveGraph",
    "Orchestrator",
    "PendingPrompt",
    "RunConfig",
    "RunResult",
    "SpecError",
    "TaskDecl",
    "TaskState",
    "WorkflowSpec",
    "apply_additions",
    "build_initial",
    "parse_spec",
    "ready_set",
    "resume_run",
    "run_workflow",
    "to_toml",
    "validate_acyclic",
]
