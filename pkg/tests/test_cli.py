from __future__ import annotations

import json
import time

import pytest

from flowgate.cli import main

from .conftest import FAST_LOCAL, stub_task, workflow_block
from .listings import HITL_CHECKPOINT, MINIMAL_INFERENCE
from .oracles import check_dot_grammar


@pytest.fixture
def workflow_file(tmp_path):
    def write(text: str, name: str = "workflow.toml"):
        path = tmp_path / name
        path.write_text(text)
        return path
    return write


def run_cli(capsys, *argv) -> tuple[int, str, str]:
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ------------------------------------------------------------------- validate


def test_validate_ok(workflow_file, capsys):
    path = workflow_file(MINIMAL_INFERENCE)
    code, out, err = run_cli(capsys, "validate", path)
    assert code == 0
    assert "ok" in out


def test_validate_cycle_prints_path(workflow_file, capsys):
    path = workflow_file(
        '[[task]]\nname = "a"\ncommand = "x"\ndepends_on = ["b"]\n'
        '[[task]]\nname = "b"\ncommand = "x"\ndepends_on = ["a"]\n'
        '[workflow]\ntasks = ["a"]\n')
    code, out, err = run_cli(capsys, "validate", path)
    assert code == 1
    assert "cycle" in err
    assert "->" in err


def test_validate_unknown_execsite_names_key(workflow_file, capsys):
    path = workflow_file('[[task]]\nname = "a"\ncommand = "x"\nexecsite = "mars"\n'
                         '[workflow]\ntasks = ["a"]\n')
    code, out, err = run_cli(capsys, "validate", path)
    assert code == 1
    assert "key=execsite" in err
    assert "mars" in err


def test_validate_json_mode(workflow_file, capsys):
    path = workflow_file('[[task]]\nname = "a"\n[workflow]\ntasks = []\n')
    code, out, err = run_cli(capsys, "validate", path, "--json")
    assert code == 1
    payload = json.loads(out)
    assert payload["code"] == "missing-field"
    assert payload["key"] == "command"


# ------------------------------------------------------------------ run/status


def test_run_foreground_prints_table(workflow_file, tmp_path, capsys):
    path = workflow_file(stub_task("a") + FAST_LOCAL + workflow_block(["a"]))
    code, out, err = run_cli(capsys, "run", path, "--workdir", tmp_path / "w")
    assert code == 0
    assert "a#1" in out and "Succeeded" in out
    assert "INSTANCE" in out


def test_run_exit_code_reflects_failures(workflow_file, tmp_path, capsys):
    path = workflow_file(stub_task("bad", "false") + FAST_LOCAL + workflow_block(["bad"]))
    code, out, err = run_cli(capsys, "run", path, "--workdir", tmp_path / "w")
    assert code == 1
    assert "Failed" in out


def test_run_rejects_invalid_file(workflow_file, tmp_path, capsys):
    path = workflow_file('[[task]]\nname = "a"\n[workflow]\ntasks = []\n')
    code, out, err = run_cli(capsys, "run", path, "--workdir", tmp_path / "w")
    assert code == 1
    assert "msg=" in err


def test_detach_prints_run_id_and_completes(workflow_file, tmp_path, capsys):
    path = workflow_file(stub_task("a") + FAST_LOCAL + workflow_block(["a"]))
    workdir = tmp_path / "w"
    code, out, err = run_cli(capsys, "run", path, "--workdir", workdir, "--detach")
    assert code == 0
    run_id = out.strip()
    assert run_id.startswith("run-")
    deadline = time.monotonic() + 30
    final = None
    while time.monotonic() < deadline:
        state_file = workdir / run_id / "state.json"
        if state_file.exists():
            payload = json.loads(state_file.read_text())
            if payload.get("terminal"):
                final = payload
                break
        time.sleep(0.05)
    assert final is not None, "detached run never finished"
    assert final["states"] == {"a#1": "Succeeded"}


def test_status_table_and_unknown(workflow_file, tmp_path, capsys):
    path = workflow_file(stub_task("a") + FAST_LOCAL + workflow_block(["a"]))
    workdir = tmp_path / "w"
    code, out, err = run_cli(capsys, "run", path, "--workdir", workdir, "--quiet")
    run_id = out.strip()
    code, out, err = run_cli(capsys, "status", run_id, "--workdir", workdir)
    assert code == 0
    assert "a#1" in out and "Succeeded" in out
    code, out, err = run_cli(capsys, "status", "run-nope", "--workdir", workdir)
    assert code == 1


def test_status_json_matches_log_fold(workflow_file, tmp_path, capsys):
    path = workflow_file(stub_task("a") + stub_task("b", "false")
                         + FAST_LOCAL + workflow_block(["a", "b"]))
    workdir = tmp_path / "w"
    code, out, err = run_cli(capsys, "run", path, "--workdir", workdir, "--quiet")
    run_id = out.strip()
    code, out, err = run_cli(capsys, "status", run_id, "--workdir", workdir, "--json")
    payload = json.loads(out)
    from .oracles import fold_log_lines
    fold = fold_log_lines(workdir / run_id / "events.log")
    assert {t["id"]: t["state"] for t in payload["tasks"]} == fold


# -------------------------------------------------------------------- decide


DECIDE_FLOW = (
    stub_task("train", "true")
    + stub_task("review", "modules.review", depends_on=["train"],
                add_tasks=["retrain"], hitl=True)
    + stub_task("retrain", "true")
    + FAST_LOCAL
    + workflow_block(["train", "review"])
)


def _start_detached(workflow_file, tmp_path, capsys) -> tuple:
    path = workflow_file(DECIDE_FLOW)
    workdir = tmp_path / "w"
    code, out, err = run_cli(capsys, "run", path, "--workdir", workdir, "--detach")
    assert code == 0
    run_id = out.strip()
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        prompts = list((workdir / run_id / "prompts").glob("*.json")) \
            if (workdir / run_id / "prompts").is_dir() else []
        if prompts:
            return workdir, run_id
        time.sleep(0.05)
    pytest.fail("checkpoint never opened")


def _wait_terminal(workdir, run_id, timeout=30) -> dict:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        state_file = workdir / run_id / "state.json"
        if state_file.exists():
            payload = json.loads(state_file.read_text())
            if payload.get("terminal"):
                return payload["states"]
        time.sleep(0.05)
    raise AssertionError("run never reached terminal state")


def test_decide_reject_add_task_shows_new_instance(workflow_file, tmp_path, capsys):
    workdir, run_id = _start_detached(workflow_file, tmp_path, capsys)
    code, out, err = run_cli(capsys, "decide", run_id, "review#1", "--reject",
                             "--add-task", "retrain", "--workdir", workdir,
                             "--actor", "sup")
    assert code == 0
    states = _wait_terminal(workdir, run_id)
    assert states["retrain#1"] == "Succeeded"
    code, out, err = run_cli(capsys, "status", run_id, "--workdir", workdir)
    assert "retrain#1" in out


def test_decide_approve(workflow_file, tmp_path, capsys):
    workdir, run_id = _start_detached(workflow_file, tmp_path, capsys)
    code, out, err = run_cli(capsys, "decide", run_id, "review#1", "--approve",
                             "--workdir", workdir)
    assert code == 0
    states = _wait_terminal(workdir, run_id)
    assert states == {"train#1": "Succeeded", "review#1": "Succeeded"}


def test_decide_not_permitted_add_task(workflow_file, tmp_path, capsys):
    workdir, run_id = _start_detached(workflow_file, tmp_path, capsys)
    code, out, err = run_cli(capsys, "decide", run_id, "review#1", "--reject",
                             "--add-task", "train", "--workdir", workdir)
    assert code == 1
    assert "NotPermitted" in err
    run_cli(capsys, "decide", run_id, "review#1", "--approve", "--workdir", workdir)
    _wait_terminal(workdir, run_id)


def test_decide_not_awaiting(workflow_file, tmp_path, capsys):
    path = workflow_file(stub_task("a") + FAST_LOCAL + workflow_block(["a"]))
    workdir = tmp_path / "w"
    code, out, err = run_cli(capsys, "run", path, "--workdir", workdir, "--quiet")
    run_id = out.strip()
    code, out, err = run_cli(capsys, "decide", run_id, "a#1", "--approve",
                             "--workdir", workdir)
    assert code == 1
    assert "NotAwaiting" in err


# --------------------------------------------------------------------- graph


def test_graph_from_spec_file(workflow_file, tmp_path, capsys):
    path = workflow_file(HITL_CHECKPOINT)
    code, out, err = run_cli(capsys, "graph", path)
    assert code == 0
    check_dot_grammar(out)
    assert '"training_task#1"' in out
    assert 'style=dashed' in out  # declared-but-inactive inference_task
    assert '"inference_task"' in out


def test_graph_empty_spec(workflow_file, capsys):
    path = workflow_file("[workflow]\ntasks = []\n")
    code, out, err = run_cli(capsys, "graph", path)
    assert code == 0
    check_dot_grammar(out)


def test_graph_from_run(workflow_file, tmp_path, capsys):
    path = workflow_file(stub_task("a") + stub_task("b", depends_on=["a"])
                         + FAST_LOCAL + workflow_block(["a", "b"]))
    workdir = tmp_path / "w"
    code, out, err = run_cli(capsys, "run", path, "--workdir", workdir, "--quiet")
    run_id = out.strip()
    code, out, err = run_cli(capsys, "graph", run_id, "--workdir", workdir)
    assert code == 0
    check_dot_grammar(out)
    assert '"a#1" -> "b#1";' in out
    assert "[Succeeded]" in out


def test_graph_json_mode(workflow_file, tmp_path, capsys):
    path = workflow_file(HITL_CHECKPOINT)
    code, out, err = run_cli(capsys, "graph", path, "--format", "json")
    payload = json.loads(out)
    ids = {n["id"] for n in payload["nodes"]}
    assert ids == {"training_task#1", "hitl_reviewer_evaluation#1", "inference_task"}
