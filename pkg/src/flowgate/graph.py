"""Live dependency graph over task instances.

Declared tasks become *instances* when activated; re-activating the same
task (via a checkpoint decision) mints a new generation, so iteration never
introduces a cycle: every added edge points from an existing instance to a
strictly newer one.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import WorkflowSpec


@dataclass(frozen=True, order=True)
class InstanceId:
    """A runtime activation of a declared task: ``base#generation``."""

    base: str
    generation: int = 1

    def __str__(self) -> str:
        return f"{self.base}#{self.generation}"

    @classmethod
    def parse(cls, text: str) -> "InstanceId":
        """Parse ``name#k``; a bare name means generation 1."""
        base, sep, gen = text.rpartition("#")
        if not sep:
            return cls(text, 1)
        try:
            generation = int(gen)
        except ValueError:
            return cls(text, 1)
        if generation < 1:
            raise ValueError(f"generation must be >= 1 in {text!r}")
        return cls(base, generation)


class AdditionError(Exception):
    """A runtime task addition that the declaration does not permit."""

    def __init__(self, reason: str, task: str, after: InstanceId):
        super().__init__(f"cannot add {task!r} after {after}: {reason}")
        self.reason = reason  # "NotPermitted" | "Undeclared"
        self.task = task
        self.after = after


class LiveGraph:
    """Instances plus dependency edges; acyclic at all times.

    Mutated only by the orchestrator's coordination loop.  ``active`` holds
    instances that have not reached a terminal state; the loop maintains it.
    """

    def __init__(self) -> None:
        self.instances: set[InstanceId] = set()
        self.edges: set[tuple[InstanceId, InstanceId]] = set()
        self.active: set[InstanceId] = set()

    def in_edges(self, node: InstanceId) -> list[InstanceId]:
        return [src for (src, dst) in self.edges if dst == node]

    def out_edges(self, node: InstanceId) -> list[InstanceId]:
        return [dst for (src, dst) in self.edges if src == node]

    def max_generation(self, base: str) -> int:
        return max((i.generation for i in self.instances if i.base == base), default=0)

    def latest_active(self, base: str) -> InstanceId | None:
        candidates = [i for i in self.active if i.base == base]
        return max(candidates, key=lambda i: i.generation) if candidates else None

    def descendants(self, node: InstanceId) -> set[InstanceId]:
        """All instances reachable from ``node`` (the node's branch)."""
        seen: set[InstanceId] = set()
        frontier = [node]
        while frontier:
            current = frontier.pop()
            for nxt in self.out_edges(current):
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        return seen

    def _add_instance(self, instance: InstanceId) -> None:
        self.instances.add(instance)
        self.active.add(instance)

    def mark_terminal(self, instance: InstanceId) -> None:
        self.active.discard(instance)


def build_initial(spec: WorkflowSpec) -> LiveGraph:
    """Generation-1 instances for every initially active task.

    Dependencies on declared-but-inactive tasks are omitted: they count as
    satisfied until a decision activates the dependency, which re-imposes
    ordering on the new instance only.
    """
    graph = LiveGraph()
    active = set(spec.initial_active)
    for name in spec.initial_active:
        graph._add_instance(InstanceId(name, 1))
    for name in spec.initial_active:
        for dep in spec.tasks[name].depends_on:
            if dep in active:
                graph.edges.add((InstanceId(dep, 1), InstanceId(name, 1)))
    return graph


def ready_set(graph: LiveGraph, states: dict[InstanceId, str]) -> set[InstanceId]:
    """Pending instances whose every in-edge source has Succeeded."""
    ready = set()
    for instance in graph.instances:
        if states.get(instance) != "Pending":
            continue
        if all(states.get(src) == "Succeeded" for src in graph.in_edges(instance)):
            ready.add(instance)
    return ready


def apply_additions(
    graph: LiveGraph,
    spec: WorkflowSpec,
    names: list[str],
    after: InstanceId,
) -> list[InstanceId]:
    """Instantiate ``names`` downstream of ``after``; returns new instances.

    Each name must be declared and listed in the add_tasks of the task
    underlying ``after``.  New instances get generation = 1 + the highest
    existing generation of their base.  Edges: ``after`` -> each new
    instance, plus edges mirroring declared depends_on where the dependency
    is co-added or currently active (a re-activated chain keeps its internal
    order).  Acyclic by construction: edges only point at brand-new nodes.
    """
    permitted = spec.tasks[after.base].add_tasks if after.base in spec.tasks else ()
    for name in names:
        if name not in spec.tasks:
            raise AdditionError("Undeclared", name, after)
        if name not in permitted:
            raise AdditionError("NotPermitted", name, after)

    created: dict[str, InstanceId] = {}
    for name in names:
        instance = InstanceId(name, graph.max_generation(name) + 1)
        graph._add_instance(instance)
        graph.edges.add((after, instance))
        created[name] = instance

    for name, instance in created.items():
        for dep in spec.tasks[name].depends_on:
            if dep in created:
                graph.edges.add((created[dep], instance))
            else:
                live = graph.latest_active(dep)
                if live is not None and live != instance:
                    graph.edges.add((live, instance))
    return [created[name] for name in names]


def to_dot(
    graph: LiveGraph,
    states: dict[InstanceId, str] | None = None,
    *,
    inactive_declared: list[str] | None = None,
    name: str = "workflow",
) -> str:
    """DOT rendering; node label is ``name#k [state]``.

    ``inactive_declared`` lists declared-but-not-activated task names shown
    as dashed nodes (used when rendering a spec rather than a run).
    """
    states = states or {}
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    for instance in sorted(graph.instances):
        state = states.get(instance, "Pending")
        lines.append(f'  "{instance}" [label="{instance} [{state}]"];')
    for task in inactive_declared or []:
        lines.append(f'  "{task}" [label="{task} [declared]", style=dashed];')
    for src, dst in sorted(graph.edges):
        lines.append(f'  "{src}" -> "{dst}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
