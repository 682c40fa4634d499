from __future__ import annotations

import json

import pytest

from flowgate.config import parse_spec
from flowgate.graph import InstanceId, build_initial
from flowgate.hitl import (
    Decision,
    DuplicateDecision,
    HitlEngine,
    NotAwaiting,
    NotPermitted,
    UnknownOverrideTarget,
    apply_overrides,
    decision_path,
    prompt_path,
)
from flowgate.registry import JobRegistry, TaskState

from .listings import HITL_CHECKPOINT

T = TaskState


def iid(text: str) -> InstanceId:
    return InstanceId.parse(text)


REVIEW = "hitl_reviewer_evaluation#1"


@pytest.fixture
def setup(tmp_path):
    spec = parse_spec(HITL_CHECKPOINT)
    registry = JobRegistry()
    graph = build_initial(spec)
    for name in spec.initial_active:
        registry.register(iid(f"{name}#1"))
    engine = HitlEngine(spec, registry, tmp_path)
    return spec, registry, graph, engine


def drive_to_running(registry, instance):
    for to in (T.Ready, T.Submitted, T.Running):
        registry.transition(instance, to)


def open_review(setup):
    spec, registry, graph, engine = setup
    drive_to_running(registry, iid(REVIEW))
    return engine.open_checkpoint(spec.tasks["hitl_reviewer_evaluation"], iid(REVIEW))


def test_open_checkpoint_publishes_prompt(setup, tmp_path):
    spec, registry, graph, engine = setup
    prompt = open_review(setup)
    assert registry.state(iid(REVIEW)) == T.AwaitingDecision
    assert prompt.message == "Is the model good enough?\n"
    assert prompt.input_artifact == "/path/to/output/metrics.txt"
    assert prompt.allowed_add_tasks == ("inference_task",)
    on_disk = json.loads(prompt_path(tmp_path, iid(REVIEW)).read_text())
    assert on_disk["message"] == "Is the model good enough?\n"
    assert on_disk["allowed_add_tasks"] == ["inference_task"]


def test_open_checkpoint_touches_no_other_instance(setup):
    spec, registry, graph, engine = setup
    before = registry.snapshot()
    open_review(setup)
    after = registry.snapshot()
    del before[iid(REVIEW)], after[iid(REVIEW)]
    assert before == after  # the other branch is untouched


def test_two_simultaneous_checkpoints_independent(tmp_path):
    text = """
[[task]]
name = "reviewA"
command = "modules.review"
hitl.enabled = true
hitl.message = "A ok?"

[[task]]
name = "reviewB"
command = "modules.review"
hitl.enabled = true
hitl.message = "B ok?"

[workflow]
tasks = ["reviewA", "reviewB"]
"""
    spec = parse_spec(text)
    registry = JobRegistry()
    for name in spec.initial_active:
        registry.register(iid(f"{name}#1"))
    engine = HitlEngine(spec, registry, tmp_path)
    for name in ("reviewA", "reviewB"):
        drive_to_running(registry, iid(f"{name}#1"))
        engine.open_checkpoint(spec.tasks[name], iid(f"{name}#1"))
    assert len(engine.prompts) == 2
    assert {p.message for p in engine.prompts.values()} == {"A ok?", "B ok?"}


def test_approve_completes_without_additions(setup):
    spec, registry, graph, engine = setup
    open_review(setup)
    created = engine.submit_decision(
        Decision(instance=iid(REVIEW), verdict="approve", actor="sup"), graph)
    assert created == []
    assert registry.state(iid(REVIEW)) == T.Succeeded
    assert graph.instances == {iid("training_task#1"), iid(REVIEW)}


def test_reject_with_add_tasks_activates_downstream(setup, tmp_path):
    spec, registry, graph, engine = setup
    open_review(setup)
    created = engine.submit_decision(
        Decision(instance=iid(REVIEW), verdict="reject",
                 add_tasks=("inference_task",), actor="sup"), graph)
    assert created == [iid("inference_task#1")]
    assert registry.state(iid(REVIEW)) == T.Succeeded  # checkpoint completed
    assert registry.state(iid("inference_task#1")) == T.Pending
    assert (iid(REVIEW), iid("inference_task#1")) in graph.edges
    event = registry.events()[-1]
    assert "activated by hitl_reviewer_evaluation#1" in event.detail


def test_decision_files_written(setup, tmp_path):
    spec, registry, graph, engine = setup
    open_review(setup)
    decision = Decision(instance=iid(REVIEW), verdict="reject",
                        add_tasks=("inference_task",), actor="sup", message="retrain")
    engine.submit_decision(decision, graph)
    record = json.loads(decision_path(tmp_path, iid(REVIEW)).read_text())
    assert record["verdict"] == "reject"
    assert record["add_tasks"] == ["inference_task"]
    assert record["actor"] == "sup"
    # the declared decision output (run-dir relative) carries the same payload
    declared = json.loads((tmp_path / "hitl_decision.json").read_text())
    assert declared == record
    # prompt is gone
    assert not prompt_path(tmp_path, iid(REVIEW)).exists()
    assert engine.prompts == {}


def test_second_decision_rejected_first_stands(setup):
    spec, registry, graph, engine = setup
    open_review(setup)
    engine.submit_decision(Decision(instance=iid(REVIEW), verdict="approve"), graph)
    with pytest.raises(DuplicateDecision):
        engine.submit_decision(
            Decision(instance=iid(REVIEW), verdict="reject",
                     add_tasks=("inference_task",)), graph)
    assert registry.state(iid(REVIEW)) == T.Succeeded
    assert iid("inference_task#1") not in graph.instances


def test_decision_for_non_awaiting_instance(setup):
    spec, registry, graph, engine = setup
    with pytest.raises(NotAwaiting):
        engine.submit_decision(Decision(instance=iid(REVIEW), verdict="approve"), graph)
    with pytest.raises(NotAwaiting):
        engine.submit_decision(Decision(instance=iid("ghost#1"), verdict="approve"), graph)


def test_add_tasks_outside_declared_set(setup):
    spec, registry, graph, engine = setup
    open_review(setup)
    with pytest.raises(NotPermitted):
        engine.submit_decision(
            Decision(instance=iid(REVIEW), verdict="reject",
                     add_tasks=("training_task",)), graph)


def test_override_for_task_not_being_added(setup):
    spec, registry, graph, engine = setup
    open_review(setup)
    with pytest.raises(UnknownOverrideTarget):
        engine.submit_decision(
            Decision(instance=iid(REVIEW), verdict="approve",
                     param_overrides={"inference_task": {"input.model": "/new"}}), graph)


def test_abort_fails_checkpoint(setup):
    spec, registry, graph, engine = setup
    open_review(setup)
    created = engine.submit_decision(
        Decision(instance=iid(REVIEW), verdict="abort", actor="sup"), graph)
    assert created == []
    assert registry.state(iid(REVIEW)) == T.Failed


# ------------------------------------------------------------ apply_overrides


def test_apply_overrides_binds_new_path():
    spec = parse_spec(HITL_CHECKPOINT)
    effective = apply_overrides(spec, {"inference_task": {"input.model": "/models/v2.pt"}})
    assert effective["inference_task"]["model"] == "/models/v2.pt"
    assert effective["inference_task"]["data"] == "/path/to/images/"
    # original declaration untouched
    assert spec.tasks["inference_task"].inputs["model"] == "/path/to/model.pt"


def test_apply_overrides_identity():
    spec = parse_spec(HITL_CHECKPOINT)
    assert apply_overrides(spec, {}) == {}


def test_apply_overrides_unknown_task_or_label():
    spec = parse_spec(HITL_CHECKPOINT)
    with pytest.raises(UnknownOverrideTarget):
        apply_overrides(spec, {"ghost": {"input.x": "v"}})
    with pytest.raises(UnknownOverrideTarget):
        apply_overrides(spec, {"inference_task": {"input.nope": "v"}})
