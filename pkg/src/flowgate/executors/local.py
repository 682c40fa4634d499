"""Local execution backend: run a task's shell command on this machine.

Launching never blocks the orchestrator: the child shell runs the command
plus the completion epilogue (exit file, then marker), so the signal is
written even if the engine dies.  Completion reaches the engine only
through the watcher observing those files.
"""

from __future__ import annotations

import logging
import os
import re
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..config import ExecSiteDecl, TaskDecl
from ..graph import InstanceId
from . import completion_wrapper, exit_path, marker_path

log = logging.getLogger("flowgate.executor.local")

CANCEL_GRACE_S = 0.5


class MissingInput(Exception):
    def __init__(self, labels: list[str]):
        super().__init__(f"missing input(s): {', '.join(labels)}")
        self.labels = labels


class MissingOutput(Exception):
    def __init__(self, labels: list[str]):
        super().__init__(f"missing output(s): {', '.join(labels)}")
        self.labels = labels


class SpawnError(Exception):
    pass


@dataclass(frozen=True)
class LaunchPlan:
    """Everything needed to start one task instance."""

    instance: InstanceId
    command: str
    working_dir: Path
    env: dict[str, str]
    marker_path: Path
    exit_path: Path
    inputs: dict[str, Path] = field(default_factory=dict)
    outputs: dict[str, Path] = field(default_factory=dict)


def _env_key(prefix: str, label: str) -> str:
    return prefix + re.sub(r"[^A-Za-z0-9]", "_", label).upper()


def resolve_status_dir(site: ExecSiteDecl, run_dir: Path) -> Path:
    path = Path(site.status_dir)
    return path if path.is_absolute() else Path(run_dir) / path


def resolve_path(raw: str, run_dir: Path) -> Path:
    """Relative declared paths resolve against the run directory."""
    path = Path(raw)
    return path if path.is_absolute() else Path(run_dir) / path


def effective_inputs(decl: TaskDecl, overrides: dict[str, str] | None) -> dict[str, str]:
    inputs = dict(decl.inputs)
    for key, value in (overrides or {}).items():
        label = key[len("input."):] if key.startswith("input.") else key
        inputs[label] = value
    return inputs


def wrap_in_container(site: ExecSiteDecl, image: str, command: str, binds: list[Path]) -> str:
    parts = [site.container_runtime]
    for bind in sorted(set(binds)):
        parts.append(f"--bind {bind}")
    parts.append(image)
    parts.append(command)
    return " ".join(parts)


def build_plan(
    decl: TaskDecl,
    instance: InstanceId,
    site: ExecSiteDecl,
    run_dir: Path,
    overrides: dict[str, str] | None = None,
    *,
    check_inputs: bool = True,
) -> LaunchPlan:
    """Resolve paths and the final command line for one instance.

    Inputs are referenced in place, never copied.  Resolved paths are
    exported to the command as FLOWGATE_INPUT_<LABEL> / FLOWGATE_OUTPUT_<LABEL>
    so parameter overrides reach the process without rewriting its command.
    """
    run_dir = Path(run_dir)
    workdir = run_dir / "tasks" / str(instance)
    workdir.mkdir(parents=True, exist_ok=True)
    status_dir = resolve_status_dir(site, run_dir)
    status_dir.mkdir(parents=True, exist_ok=True)

    inputs = {k: resolve_path(v, run_dir) for k, v in effective_inputs(decl, overrides).items()}
    outputs = {k: resolve_path(v, run_dir) for k, v in decl.outputs.items()}

    if check_inputs:
        missing = [label for label, path in inputs.items() if not path.exists()]
        if missing:
            raise MissingInput(sorted(missing))

    command = decl.command
    if decl.container:
        command = wrap_in_container(
            site, decl.container, command, list(inputs.values()) + list(outputs.values())
        )

    env = {
        "FLOWGATE_INSTANCE": str(instance),
        "FLOWGATE_RUN_DIR": str(run_dir),
    }
    for label, path in inputs.items():
        env[_env_key("FLOWGATE_INPUT_", label)] = str(path)
    for label, path in outputs.items():
        env[_env_key("FLOWGATE_OUTPUT_", label)] = str(path)

    return LaunchPlan(
        instance=instance,
        command=command,
        working_dir=workdir,
        env=env,
        marker_path=marker_path(status_dir, instance),
        exit_path=exit_path(status_dir, instance),
        inputs=inputs,
        outputs=outputs,
    )


class LocalHandle:
    """Owns one running child; cancellation kills the group before the
    epilogue can write the marker."""

    def __init__(self, plan: LaunchPlan, proc: subprocess.Popen):
        self.plan = plan
        self.proc = proc
        self.cancelled = False
        self.exit_code: int | None = None
        self._done = threading.Event()
        self._monitor = threading.Thread(
            target=self._wait, name=f"local-{plan.instance}", daemon=True
        )
        self._monitor.start()

    def _wait(self) -> None:
        self.exit_code = self.proc.wait()
        self._done.set()

    def cancel(self) -> None:
        """SIGTERM the process group, escalate to SIGKILL; no marker appears."""
        self.cancelled = True
        if self.proc.poll() is None:
            try:
                os.killpg(self.proc.pid, signal.SIGTERM)
            except ProcessLookupError:
                pass
            deadline = time.monotonic() + CANCEL_GRACE_S
            while self.proc.poll() is None and time.monotonic() < deadline:
                time.sleep(0.02)
            if self.proc.poll() is None:
                try:
                    os.killpg(self.proc.pid, signal.SIGKILL)
                except ProcessLookupError:
                    pass
        self._done.wait(timeout=5)

    def wait(self, timeout: float | None = None) -> bool:
        return self._done.wait(timeout)

    @property
    def running(self) -> bool:
        return not self._done.is_set()


def launch(plan: LaunchPlan) -> LocalHandle:
    """Spawn the child and return immediately; completion flows via markers.

    The spawned shell runs the command followed by the completion epilogue,
    so the exit file and marker are written by the task side of the process
    boundary and survive an engine crash.
    """
    stdout = open(plan.working_dir / "stdout.log", "ab")
    stderr = open(plan.working_dir / "stderr.log", "ab")
    env = dict(os.environ)
    env.update(plan.env)
    script = completion_wrapper(plan.command, plan.marker_path.parent, plan.instance)
    try:
        proc = subprocess.Popen(
            script,
            shell=True,
            cwd=plan.working_dir,
            env=env,
            stdout=stdout,
            stderr=stderr,
            start_new_session=True,
        )
    except OSError as exc:
        raise SpawnError(f"{plan.instance}: {exc}") from exc
    finally:
        stdout.close()
        stderr.close()
    log.debug("launched %s (pid %d): %s", plan.instance, proc.pid, plan.command)
    return LocalHandle(plan, proc)


def verify_outputs(
    decl: TaskDecl, run_dir: Path, outputs: dict[str, Path] | None = None
) -> list[str]:
    """Labels of declared outputs that do not exist; a task with exit 0 but
    missing outputs is still Failed."""
    resolved = outputs or {k: resolve_path(v, run_dir) for k, v in decl.outputs.items()}
    return sorted(label for label, path in resolved.items() if not path.exists())
