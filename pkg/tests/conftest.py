from __future__ import annotations

import random

import pytest

from flowgate import parse_spec

# execsite override used by orchestration tests: same reserved name, but a
# poll interval suited to stub tasks
FAST_LOCAL = """
[execsites."local"]
kind = "local"
poll_interval = 0.03
"""


def fast_batch_site(name: str = "cluster", *, seed: int = 7,
                    delay: tuple[float, float] = (0.05, 0.2),
                    max_running: int = 2) -> str:
    return f"""
[execsites."{name}"]
kind = "batch_sim"
seed = {seed}
queue_delay = [{delay[0]}, {delay[1]}]
max_concurrent_running = {max_running}
poll_interval = 0.03
"""


def stub_task(name: str, command: str = "true", *, site: str = "local",
              depends_on: list[str] | None = None,
              add_tasks: list[str] | None = None,
              hitl: bool = False, hitl_input: str = "") -> str:
    lines = [f'[[task]]', f'name = "{name}"', f'command = "{command}"',
             f'execsite = "{site}"']
    if depends_on:
        lines.append("depends_on = [" + ", ".join(f'"{d}"' for d in depends_on) + "]")
    if add_tasks:
        lines.append("add_tasks = [" + ", ".join(f'"{a}"' for a in add_tasks) + "]")
    if hitl:
        lines.append("hitl.enabled = true")
        lines.append(f'hitl.message = "Proceed with {name}?"')
        if hitl_input:
            lines.append(f'hitl.input = "{hitl_input}"')
    return "\n".join(lines) + "\n"


def workflow_block(names: list[str]) -> str:
    return "[workflow]\ntasks = [" + ", ".join(f'"{n}"' for n in names) + "]\n"


def random_dag(rng: random.Random, max_nodes: int = 10) -> tuple[list[str], list[tuple[str, str]]]:
    """Random DAG by construction: edges only from earlier to later nodes."""
    count = rng.randint(1, max_nodes)
    nodes = [f"t{i}" for i in range(count)]
    edges = []
    for j in range(count):
        for i in range(j):
            if rng.random() < 0.3:
                edges.append((nodes[i], nodes[j]))
    return nodes, edges


def dag_spec_text(nodes: list[str], edges: list[tuple[str, str]],
                  commands: dict[str, str] | None = None,
                  extra: str = FAST_LOCAL) -> str:
    commands = commands or {}
    deps: dict[str, list[str]] = {n: [] for n in nodes}
    for src, dst in edges:
        deps[dst].append(src)
    chunks = [
        stub_task(n, commands.get(n, "true"), depends_on=deps[n] or None)
        for n in nodes
    ]
    chunks.append(extra)
    chunks.append(workflow_block(nodes))
    return "\n".join(chunks)


@pytest.fixture
def fast_spec():
    """Parse helper that appends the fast local execsite override."""
    def build(body: str, names: list[str]):
        return parse_spec(body + FAST_LOCAL + workflow_block(names))
    return build
