"""Parsing and validation of the declarative TOML workflow dialect.

A workflow file contains ``[[task]]`` array-of-tables, optional
``[execsites."NAME"]`` tables, and a ``[workflow]`` section listing the
initially active tasks:

    [[task]]
    name = "inference_task"
    command = "singularity run --nv ..."
    execsite = "local"
    input.model = "/path/to/model.pt"
    output.results = "/path/to/results.json"

    [workflow]
    tasks = ["inference_task"]

Tasks may additionally declare ``depends_on``, ``add_tasks``, ``container``
and a ``hitl.*`` checkpoint block.  Parsing is total on syntactically valid
TOML: it either returns a fully defaulted :class:`WorkflowSpec` or raises a
:class:`SpecError` naming the offending table and key.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace

try:
    import tomllib  # py>=3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib  # type: ignore[no-redef]

log = logging.getLogger("flowgate.config")

LOCAL_SITE = "local"

EXECSITE_KINDS = ("local", "batch_sim", "remote_batch")

DEFAULT_DECISION_OUTPUT = "hitl_decision.json"
DEFAULT_POLL_INTERVAL = 1.0

_KNOWN_TASK_KEYS = {
    "name", "command", "execsite", "depends_on", "add_tasks",
    "input", "output", "hitl", "container",
}
_KNOWN_HITL_KEYS = {"enabled", "input", "message", "timeout"}
_KNOWN_SITE_KEYS = {
    "host", "key", "user", "kind", "status_dir", "poll_interval",
    "container_runtime", "seed", "queue_delay", "max_concurrent_running",
    "max_queue",
}


class SpecError(Exception):
    """A workflow-file diagnostic: error code plus offending table/key."""

    code = "spec"

    def __init__(self, message: str, *, table: str = "", key: str = ""):
        super().__init__(message)
        self.message = message
        self.table = table
        self.key = key

    def as_dict(self) -> dict:
        return {
            "code": self.code,
            "table": self.table,
            "key": self.key,
            "message": self.message,
        }


class SpecSyntaxError(SpecError):
    code = "syntax"


class MissingField(SpecError):
    code = "missing-field"


class DuplicateTask(SpecError):
    code = "duplicate-task"


class UnknownTask(SpecError):
    code = "unknown-task"


class UnknownExecsite(SpecError):
    code = "unknown-execsite"


class CycleError(SpecError):
    code = "cycle"

    def __init__(self, path: list[str]):
        super().__init__(
            "dependency cycle: " + " -> ".join(path),
            table="task", key="depends_on",
        )
        self.path = path


@dataclass(frozen=True)
class HitlSpec:
    """Checkpoint declaration attached to a task."""

    enabled: bool = False
    input: str = ""
    message: str = ""
    decision_output: str = DEFAULT_DECISION_OUTPUT
    timeout: float | None = None


@dataclass(frozen=True)
class TaskDecl:
    name: str
    command: str
    execsite: str = LOCAL_SITE
    depends_on: tuple[str, ...] = ()
    add_tasks: tuple[str, ...] = ()
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    hitl: HitlSpec | None = None
    container: str | None = None

    @property
    def is_checkpoint(self) -> bool:
        return self.hitl is not None and self.hitl.enabled

    @property
    def is_internal_command(self) -> bool:
        """Commands referencing an internal handler, e.g. ``modules.cif_core...``."""
        return self.command.startswith("modules.")


@dataclass(frozen=True)
class ExecSiteDecl:
    name: str
    kind: str = LOCAL_SITE
    host: str | None = None
    key: str | None = None
    user: str | None = None
    status_dir: str = ""
    poll_interval: float = DEFAULT_POLL_INTERVAL
    container_runtime: str = "singularity run --nv"
    # batch simulator knobs (ignored for kind=local)
    seed: int | None = None
    queue_delay: tuple[float, float] = (0.0, 0.0)
    max_concurrent_running: int = 2
    max_queue: int | None = None


@dataclass(frozen=True)
class WorkflowSpec:
    tasks: dict[str, TaskDecl] = field(default_factory=dict)
    initial_active: tuple[str, ...] = ()
    execsites: dict[str, ExecSiteDecl] = field(default_factory=dict)

    def site_for(self, task: TaskDecl) -> ExecSiteDecl:
        return self.execsites[task.execsite]


def _join_string_continuations(source: str) -> str:
    """Remove backslash-newline continuations inside basic strings.

    Workflow files in the wild wrap long shell commands with a trailing
    backslash, which plain TOML forbids inside single-line strings.  The
    backslash-newline pair is dropped, exactly as the shell would join the
    line.  Text outside double-quoted strings is left untouched.
    """
    out: list[str] = []
    in_string = False
    i = 0
    n = len(source)
    while i < n:
        ch = source[i]
        if not in_string:
            if ch == '"':
                in_string = True
            elif ch == "#":
                # comment runs to end of line; copy verbatim
                j = source.find("\n", i)
                j = n if j == -1 else j
                out.append(source[i:j])
                i = j
                continue
            out.append(ch)
            i += 1
            continue
        # inside a basic string
        if ch == "\\":
            if i + 1 < n and source[i + 1] == "\n":
                i += 2
                continue
            out.append(source[i:i + 2])
            i += 2
            continue
        if ch == '"':
            in_string = False
        out.append(ch)
        i += 1
    return "".join(out)


def _require_str(table: dict, key: str, *, table_name: str) -> str:
    value = table.get(key)
    if value is None or (isinstance(value, str) and not value.strip()):
        raise MissingField(
            f"{table_name} is missing required key {key!r}",
            table=table_name, key=key,
        )
    if not isinstance(value, str):
        raise SpecSyntaxError(
            f"{table_name}.{key} must be a string, got {type(value).__name__}",
            table=table_name, key=key,
        )
    return value


def _str_list(value, *, table_name: str, key: str) -> tuple[str, ...]:
    if value is None:
        return ()
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise SpecSyntaxError(
            f"{table_name}.{key} must be a list of strings",
            table=table_name, key=key,
        )
    return tuple(value)


def _str_map(value, *, table_name: str, key: str) -> dict[str, str]:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise SpecSyntaxError(
            f"{table_name}.{key} must be a table of label = path entries",
            table=table_name, key=key,
        )
    out = {}
    for label, path in value.items():
        out[str(label)] = str(path)
    return out


def _warn_unknown(table: dict, known: set, table_name: str) -> None:
    for k in table:
        if k not in known:
            log.warning("ignoring unknown key %r in %s", k, table_name)


def _parse_hitl(raw: dict, outputs: dict[str, str], table_name: str) -> HitlSpec:
    _warn_unknown(raw, _KNOWN_HITL_KEYS, f"{table_name}.hitl")
    enabled = bool(raw.get("enabled", False))
    message = str(raw.get("message", ""))
    if enabled and not message:
        raise MissingField(
            f"{table_name} enables hitl but has no hitl.message",
            table=table_name, key="hitl.message",
        )
    timeout = raw.get("timeout")
    if timeout is not None:
        timeout = float(timeout)
    return HitlSpec(
        enabled=enabled,
        input=str(raw.get("input", "")),
        message=message,
        decision_output=outputs.get("hitl_decision", DEFAULT_DECISION_OUTPUT),
        timeout=timeout,
    )


def _parse_task(raw: dict, index: int) -> TaskDecl:
    if not isinstance(raw, dict):
        raise SpecSyntaxError(f"task #{index} is not a table", table="task")
    anon = f"task #{index}"
    name = _require_str(raw, "name", table_name=anon)
    table_name = f"task.{name}"
    command = _require_str(raw, "command", table_name=table_name)
    _warn_unknown(raw, _KNOWN_TASK_KEYS, table_name)

    inputs = _str_map(raw.get("input"), table_name=table_name, key="input")
    outputs = _str_map(raw.get("output"), table_name=table_name, key="output")
    hitl = None
    if "hitl" in raw:
        if not isinstance(raw["hitl"], dict):
            raise SpecSyntaxError(
                f"{table_name}.hitl must be a table", table=table_name, key="hitl")
        hitl = _parse_hitl(raw["hitl"], outputs, table_name)

    execsite = raw.get("execsite", LOCAL_SITE)
    if not isinstance(execsite, str) or not execsite:
        raise SpecSyntaxError(
            f"{table_name}.execsite must be a non-empty string",
            table=table_name, key="execsite")

    container = raw.get("container")
    if container is not None:
        container = str(container)

    return TaskDecl(
        name=name,
        command=command,
        execsite=execsite,
        depends_on=_str_list(raw.get("depends_on"), table_name=table_name, key="depends_on"),
        add_tasks=_str_list(raw.get("add_tasks"), table_name=table_name, key="add_tasks"),
        inputs=inputs,
        outputs=outputs,
        hitl=hitl,
        container=container,
    )


def _infer_kind(raw: dict, name: str) -> str:
    kind = raw.get("kind")
    if kind is not None:
        if kind not in EXECSITE_KINDS:
            raise SpecSyntaxError(
                f"execsites.{name}.kind must be one of {EXECSITE_KINDS}",
                table=f"execsites.{name}", key="kind")
        return kind
    return "remote_batch" if raw.get("host") else LOCAL_SITE


def _parse_execsite(name: str, raw: dict) -> ExecSiteDecl:
    table_name = f"execsites.{name}"
    if not isinstance(raw, dict):
        raise SpecSyntaxError(f"{table_name} is not a table", table=table_name)
    _warn_unknown(raw, _KNOWN_SITE_KEYS, table_name)
    kind = _infer_kind(raw, name)
    if kind == "remote_batch":
        for k in ("host", "key", "user"):
            _require_str(raw, k, table_name=table_name)

    delay = raw.get("queue_delay", 0.0)
    if isinstance(delay, list):
        if len(delay) != 2:
            raise SpecSyntaxError(
                f"{table_name}.queue_delay must be a number or [low, high]",
                table=table_name, key="queue_delay")
        queue_delay = (float(delay[0]), float(delay[1]))
    else:
        queue_delay = (float(delay), float(delay))

    status_dir = str(raw.get("status_dir", "") or f"status/{name}")
    seed = raw.get("seed")
    max_queue = raw.get("max_queue")
    return ExecSiteDecl(
        name=name,
        kind=kind,
        host=raw.get("host"),
        key=raw.get("key"),
        user=raw.get("user"),
        status_dir=status_dir,
        poll_interval=float(raw.get("poll_interval", DEFAULT_POLL_INTERVAL)),
        container_runtime=str(raw.get("container_runtime", "singularity run --nv")),
        seed=int(seed) if seed is not None else None,
        queue_delay=queue_delay,
        max_concurrent_running=int(raw.get("max_concurrent_running", 2)),
        max_queue=int(max_queue) if max_queue is not None else None,
    )


def parse_spec(source: str) -> WorkflowSpec:
    """Parse TOML text into a validated :class:`WorkflowSpec`.

    Raises a :class:`SpecError` subclass on any diagnostic: malformed TOML,
    missing name/command, duplicate task names, or dangling task/execsite
    references.  Unknown keys are logged as warnings, never errors.
    """
    try:
        data = tomllib.loads(_join_string_continuations(source))
    except tomllib.TOMLDecodeError as exc:
        raise SpecSyntaxError(f"invalid TOML: {exc}") from exc

    _warn_unknown(data, {"task", "workflow", "execsites"}, "top-level")

    raw_tasks = data.get("task", [])
    if not isinstance(raw_tasks, list):
        raise SpecSyntaxError("[[task]] must be an array of tables", table="task")

    tasks: dict[str, TaskDecl] = {}
    for i, raw in enumerate(raw_tasks, start=1):
        decl = _parse_task(raw, i)
        if decl.name in tasks:
            raise DuplicateTask(
                f"task {decl.name!r} declared twice",
                table=f"task.{decl.name}", key="name")
        tasks[decl.name] = decl

    execsites = {LOCAL_SITE: ExecSiteDecl(name=LOCAL_SITE, status_dir=f"status/{LOCAL_SITE}")}
    raw_sites = data.get("execsites", {})
    if not isinstance(raw_sites, dict):
        raise SpecSyntaxError("[execsites] must be a table", table="execsites")
    for name, raw in raw_sites.items():
        execsites[name] = _parse_execsite(name, raw)

    workflow = data.get("workflow", {})
    if not isinstance(workflow, dict):
        raise SpecSyntaxError("[workflow] must be a table", table="workflow")
    _warn_unknown(workflow, {"tasks"}, "workflow")
    initial = _str_list(workflow.get("tasks"), table_name="workflow", key="tasks")
    seen: list[str] = []
    for name in initial:
        if name in seen:
            log.warning("workflow.tasks lists %r twice; keeping first occurrence", name)
            continue
        seen.append(name)

    spec = WorkflowSpec(tasks=tasks, initial_active=tuple(seen), execsites=execsites)
    _check_references(spec)
    return spec


def _check_references(spec: WorkflowSpec) -> None:
    for decl in spec.tasks.values():
        table_name = f"task.{decl.name}"
        if decl.execsite not in spec.execsites:
            raise UnknownExecsite(
                f"{table_name} references undeclared execsite {decl.execsite!r}",
                table=table_name, key="execsite")
        for key, names in (("depends_on", decl.depends_on), ("add_tasks", decl.add_tasks)):
            for name in names:
                if name not in spec.tasks:
                    raise UnknownTask(
                        f"{table_name}.{key} references undeclared task {name!r}",
                        table=table_name, key=key)
    for name in spec.initial_active:
        if name not in spec.tasks:
            raise UnknownTask(
                f"workflow.tasks references undeclared task {name!r}",
                table="workflow", key="tasks")


def validate_acyclic(spec: WorkflowSpec) -> None:
    """Raise :class:`CycleError` with a witness path if depends_on edges cycle.

    The check runs over all *declared* tasks, active or not: iteration is
    meant to happen through checkpoint-driven task addition, never through
    cyclic dependencies.
    """
    WHITE, GREY, BLACK = 0, 1, 2
    color = {name: WHITE for name in spec.tasks}
    stack: list[str] = []

    def visit(node: str) -> None:
        color[node] = GREY
        stack.append(node)
        for dep in spec.tasks[node].depends_on:
            if color[dep] == GREY:
                cycle = stack[stack.index(dep):] + [dep]
                raise CycleError(cycle)
            if color[dep] == WHITE:
                visit(dep)
        stack.pop()
        color[node] = BLACK

    for name in spec.tasks:
        if color[name] == WHITE:
            visit(name)


# ---------------------------------------------------------------------------
# Serialization (round-trip support)
# ---------------------------------------------------------------------------


def _toml_str(value: str) -> str:
    escaped = (
        value.replace("\\", "\\\\")
        .replace('"', '\\"')
        .replace("\n", "\\n")
        .replace("\t", "\\t")
        .replace("\r", "\\r")
    )
    return f'"{escaped}"'


def _emit_task(decl: TaskDecl) -> list[str]:
    lines = ["[[task]]", f"name = {_toml_str(decl.name)}", f"command = {_toml_str(decl.command)}"]
    lines.append(f"execsite = {_toml_str(decl.execsite)}")
    if decl.depends_on:
        lines.append("depends_on = [" + ", ".join(_toml_str(d) for d in decl.depends_on) + "]")
    if decl.add_tasks:
        lines.append("add_tasks = [" + ", ".join(_toml_str(d) for d in decl.add_tasks) + "]")
    if decl.container:
        lines.append(f"container = {_toml_str(decl.container)}")
    for label, path in decl.inputs.items():
        lines.append(f"input.{_key(label)} = {_toml_str(path)}")
    for label, path in decl.outputs.items():
        lines.append(f"output.{_key(label)} = {_toml_str(path)}")
    if decl.hitl is not None:
        h = decl.hitl
        lines.append(f"hitl.enabled = {'true' if h.enabled else 'false'}")
        if h.input:
            lines.append(f"hitl.input = {_toml_str(h.input)}")
        if h.message:
            lines.append(f"hitl.message = {_toml_str(h.message)}")
        if h.timeout is not None:
            lines.append(f"hitl.timeout = {h.timeout}")
        if "hitl_decision" not in decl.outputs and h.decision_output != DEFAULT_DECISION_OUTPUT:
            lines.append(f"output.hitl_decision = {_toml_str(h.decision_output)}")
    return lines


_BARE_KEY = re.compile(r"^[A-Za-z0-9_-]+$")


def _key(label: str) -> str:
    return label if _BARE_KEY.match(label) else _toml_str(label)


def _emit_execsite(site: ExecSiteDecl) -> list[str]:
    lines = [f'[execsites."{site.name}"]']
    lines.append(f"kind = {_toml_str(site.kind)}")
    for k in ("host", "key", "user"):
        value = getattr(site, k)
        if value is not None:
            lines.append(f"{k} = {_toml_str(value)}")
    lines.append(f"status_dir = {_toml_str(site.status_dir)}")
    lines.append(f"poll_interval = {site.poll_interval}")
    lines.append(f"container_runtime = {_toml_str(site.container_runtime)}")
    if site.seed is not None:
        lines.append(f"seed = {site.seed}")
    lines.append(f"queue_delay = [{site.queue_delay[0]}, {site.queue_delay[1]}]")
    lines.append(f"max_concurrent_running = {site.max_concurrent_running}")
    if site.max_queue is not None:
        lines.append(f"max_queue = {site.max_queue}")
    return lines


def to_toml(spec: WorkflowSpec) -> str:
    """Serialize a spec back to the TOML dialect; parse(to_toml(s)) == s."""
    chunks: list[str] = []
    for decl in spec.tasks.values():
        chunks.append("\n".join(_emit_task(decl)))
    for name, site in spec.execsites.items():
        if name == LOCAL_SITE and site == ExecSiteDecl(name=LOCAL_SITE, status_dir=f"status/{LOCAL_SITE}"):
            continue  # implicit reserved site
        chunks.append("\n".join(_emit_execsite(site)))
    chunks.append(
        "[workflow]\ntasks = [" + ", ".join(_toml_str(t) for t in spec.initial_active) + "]"
    )
    return "\n\n".join(chunks) + "\n"


def with_defaults_for_run(spec: WorkflowSpec, *, seed: int | None = None) -> WorkflowSpec:
    """Apply run-level overrides (CLI --seed wins over per-site seeds)."""
    if seed is None:
        return spec
    sites = {
        name: replace(site, seed=seed) if site.kind != LOCAL_SITE else site
        for name, site in spec.execsites.items()
    }
    return replace(spec, execsites=sites)
