from __future__ import annotations

import queue
import random
import threading
import time

import pytest

from flowgate.executors import write_completion
from flowgate.graph import InstanceId
from flowgate.watcher import (
    Completion,
    SiteHealth,
    SitePoller,
    UnreadableStatusDir,
    Watcher,
    poll_once,
)


def iid(text: str) -> InstanceId:
    return InstanceId.parse(text)


def make_poller(tmp_path, **kw) -> SitePoller:
    status = tmp_path / "status"
    status.mkdir(parents=True, exist_ok=True)
    defaults = dict(site="local", status_dir=status, poll_interval=0.05)
    defaults.update(kw)
    return SitePoller(**defaults)


def test_empty_dir(tmp_path):
    assert poll_once(make_poller(tmp_path), {iid("a#1")}) == []


def test_detects_and_dedups(tmp_path):
    poller = make_poller(tmp_path)
    write_completion(poller.status_dir, iid("t#1"), 0)
    first = poll_once(poller, {iid("t#1")})
    assert [(c.instance, c.exit_code) for c in first] == [(iid("t#1"), 0)]
    assert poll_once(poller, {iid("t#1")}) == []


def test_ignores_unexpected_instances(tmp_path):
    poller = make_poller(tmp_path)
    write_completion(poller.status_dir, iid("other#1"), 0)
    assert poll_once(poller, {iid("t#1")}) == []
    # becomes reportable once expected
    assert len(poll_once(poller, {iid("other#1")})) == 1


def test_marker_without_exit_waits_grace_then_unknown(tmp_path):
    poller = make_poller(tmp_path, grace_polls=2)
    (poller.status_dir / "t#1.done").touch()
    assert poll_once(poller, {iid("t#1")}) == []   # grace 1
    assert poll_once(poller, {iid("t#1")}) == []   # grace 2
    result = poll_once(poller, {iid("t#1")})       # grace exhausted
    assert [(c.instance, c.exit_code) for c in result] == [(iid("t#1"), None)]


def test_exit_arriving_within_grace_is_used(tmp_path):
    poller = make_poller(tmp_path, grace_polls=2)
    (poller.status_dir / "t#1.done").touch()
    assert poll_once(poller, {iid("t#1")}) == []
    (poller.status_dir / "t#1.exit").write_text("7\n")
    result = poll_once(poller, {iid("t#1")})
    assert [(c.instance, c.exit_code) for c in result] == [(iid("t#1"), 7)]


def test_malformed_exit_file(tmp_path):
    poller = make_poller(tmp_path)
    (poller.status_dir / "t#1.exit").write_text("not-a-number")
    (poller.status_dir / "t#1.done").touch()
    result = poll_once(poller, {iid("t#1")})
    assert [(c.instance, c.exit_code) for c in result] == [(iid("t#1"), None)]


def test_unreadable_dir_raises(tmp_path):
    poller = make_poller(tmp_path)
    poller.status_dir = tmp_path / "gone"
    with pytest.raises(UnreadableStatusDir):
        poll_once(poller, {iid("a#1")})


def test_results_ordered_by_marker_mtime(tmp_path):
    poller = make_poller(tmp_path)
    write_completion(poller.status_dir, iid("b#1"), 0)
    time.sleep(0.02)
    write_completion(poller.status_dir, iid("a#1"), 0)
    result = poll_once(poller, {iid("a#1"), iid("b#1")})
    assert [c.instance for c in result] == [iid("b#1"), iid("a#1")]


# ------------------------------------------------------------------ the loop


def test_watch_loop_detection_latency_and_exactly_once(tmp_path):
    # markers dropped at random times; every completion must be seen within
    # poll_interval + one scheduling quantum, with zero duplicates
    interval = 0.05
    poller = make_poller(tmp_path, poll_interval=interval)
    channel: queue.Queue = queue.Queue()
    expected = {iid(f"m{i}#1") for i in range(12)}
    watcher = Watcher([poller], channel, lambda site: expected)

    created_at: dict[InstanceId, float] = {}
    rng = random.Random(2)

    def drop_markers():
        for i in range(12):
            time.sleep(rng.uniform(0.0, 0.08))
            instance = iid(f"m{i}#1")
            created_at[instance] = time.monotonic()
            write_completion(poller.status_dir, instance, 0)

    watcher.start()
    producer = threading.Thread(target=drop_markers)
    producer.start()
    producer.join()

    seen: dict[InstanceId, float] = {}
    deadline = time.monotonic() + 5
    while len(seen) < 12 and time.monotonic() < deadline:
        try:
            completion = channel.get(timeout=0.2)
        except queue.Empty:
            continue
        assert isinstance(completion, Completion)
        assert completion.instance not in seen, "duplicate notification"
        seen[completion.instance] = completion.detected_at
    watcher.stop()

    assert set(seen) == expected
    quantum = 0.05
    for instance, detected in seen.items():
        assert detected - created_at[instance] <= interval + quantum + 0.05


def test_watch_loop_idles_on_empty_expectations(tmp_path):
    poller = make_poller(tmp_path)
    channel: queue.Queue = queue.Queue()
    watcher = Watcher([poller], channel, lambda site: set())
    watcher.start()
    time.sleep(0.2)
    watcher.stop()
    assert channel.empty()


def test_two_sites_notify_in_marker_creation_order(tmp_path):
    a = make_poller(tmp_path / "a", poll_interval=0.03)
    b = make_poller(tmp_path / "b", poll_interval=0.03)
    a.status_dir.mkdir(parents=True, exist_ok=True)
    b.status_dir.mkdir(parents=True, exist_ok=True)
    channel: queue.Queue = queue.Queue()
    expectations = {"local": {iid("x#1")}, "remote": {iid("y#1")}}
    b.site = "remote"
    watcher = Watcher([a, b], channel, lambda site: expectations[site])
    watcher.start()
    write_completion(a.status_dir, iid("x#1"), 0)
    time.sleep(0.12)
    write_completion(b.status_dir, iid("y#1"), 0)
    got = [channel.get(timeout=2).instance for _ in range(2)]
    watcher.stop()
    assert got == [iid("x#1"), iid("y#1")]


def test_persistent_failure_emits_site_health(tmp_path):
    poller = make_poller(tmp_path, poll_interval=0.01)
    poller.status_dir = tmp_path / "never-exists"
    channel: queue.Queue = queue.Queue()
    watcher = Watcher([poller], channel, lambda site: set())
    watcher.start()
    event = channel.get(timeout=10)
    watcher.stop()
    assert isinstance(event, SiteHealth)
    assert event.site == "local"
