"""Authoritative per-instance state machine with an append-only event log.

State at any time is the fold of the event log; ``events.log`` in the run
directory is one JSON record per line, so a crash can at worst truncate the
final record, which recovery drops with a warning.
"""

from __future__ import annotations

import io
import json
import logging
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path

from .graph import InstanceId

log = logging.getLogger("flowgate.registry")

EVENTS_FILE = "events.log"
STATE_FILE = "state.json"


class TaskState(str, Enum):
    Pending = "Pending"
    Ready = "Ready"
    Submitted = "Submitted"
    Running = "Running"
    AwaitingDecision = "AwaitingDecision"
    Succeeded = "Succeeded"
    Failed = "Failed"
    Cancelled = "Cancelled"


TERMINAL = {TaskState.Succeeded, TaskState.Failed, TaskState.Cancelled}

_LEGAL: dict[TaskState, set[TaskState]] = {
    TaskState.Pending: {TaskState.Ready},
    TaskState.Ready: {TaskState.Submitted},
    TaskState.Submitted: {TaskState.Running},
    TaskState.Running: {TaskState.Succeeded, TaskState.Failed, TaskState.AwaitingDecision},
    TaskState.AwaitingDecision: {TaskState.Succeeded, TaskState.Failed},
}
for _state in list(_LEGAL):
    _LEGAL[_state].add(TaskState.Cancelled)


def is_legal(from_state: TaskState, to_state: TaskState) -> bool:
    return to_state in _LEGAL.get(from_state, set())


class IllegalTransition(Exception):
    def __init__(self, instance: InstanceId, from_state: TaskState | None, to_state: TaskState):
        super().__init__(f"{instance}: illegal transition {from_state} -> {to_state}")
        self.instance = instance
        self.from_state = from_state
        self.to_state = to_state


class UnknownInstance(Exception):
    pass


class CorruptLog(Exception):
    """Mid-log corruption; only a truncated trailing record is tolerated."""


@dataclass(frozen=True)
class Event:
    seq: int
    timestamp: str
    instance: InstanceId
    from_state: TaskState | None
    to_state: TaskState
    detail: str = ""

    def as_dict(self) -> dict:
        return {
            "seq": self.seq,
            "timestamp": self.timestamp,
            "instance": str(self.instance),
            "from": self.from_state.value if self.from_state else None,
            "to": self.to_state.value,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Event":
        return cls(
            seq=int(record["seq"]),
            timestamp=str(record["timestamp"]),
            instance=InstanceId.parse(record["instance"]),
            from_state=TaskState(record["from"]) if record.get("from") else None,
            to_state=TaskState(record["to"]),
            detail=str(record.get("detail", "")),
        )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class JobRegistry:
    """Single-writer state machine; snapshot/log reads are race-free.

    The orchestrator loop is the only caller of :meth:`register` and
    :meth:`transition`; concurrent readers use :meth:`snapshot` or tail the
    persisted log.
    """

    def __init__(self, log_path: Path | None = None, on_event=None):
        self._states: dict[InstanceId, TaskState] = {}
        self._events: list[Event] = []
        self._lock = threading.Lock()
        self._log_path = log_path
        self._log_file: io.TextIOWrapper | None = None
        self._on_event = on_event
        if log_path is not None:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            self._log_file = open(log_path, "a", encoding="utf-8")

    # -- writes (orchestrator loop only) ------------------------------------

    def register(self, instance: InstanceId, detail: str = "activated: initial") -> Event:
        with self._lock:
            if instance in self._states:
                raise IllegalTransition(instance, self._states[instance], TaskState.Pending)
            return self._append(instance, None, TaskState.Pending, detail)

    def transition(self, instance: InstanceId, to: TaskState, detail: str = "") -> Event | None:
        """Record a state change; returns the event, or None for an idempotent
        repeat of the current state (duplicate completion signals are no-ops).
        """
        with self._lock:
            if instance not in self._states:
                raise UnknownInstance(str(instance))
            current = self._states[instance]
            if to == current:
                log.debug("%s already %s; duplicate signal ignored", instance, to.value)
                return None
            if not is_legal(current, to):
                raise IllegalTransition(instance, current, to)
            return self._append(instance, current, to, detail)

    def _append(
        self, instance: InstanceId, from_state: TaskState | None, to_state: TaskState, detail: str
    ) -> Event:
        event = Event(
            seq=len(self._events) + 1,
            timestamp=_now(),
            instance=instance,
            from_state=from_state,
            to_state=to_state,
            detail=detail,
        )
        self._events.append(event)
        self._states[instance] = to_state
        if self._log_file is not None:
            self._log_file.write(json.dumps(event.as_dict()) + "\n")
            self._log_file.flush()
        if self._on_event is not None:
            self._on_event(event)
        return event

    # -- reads ---------------------------------------------------------------

    def state(self, instance: InstanceId) -> TaskState:
        with self._lock:
            if instance not in self._states:
                raise UnknownInstance(str(instance))
            return self._states[instance]

    def snapshot(self) -> dict[InstanceId, TaskState]:
        """Point-in-time view; never exposes a half-applied transition."""
        with self._lock:
            return dict(self._states)

    def events(self, since: int = 0) -> list[Event]:
        with self._lock:
            return [e for e in self._events if e.seq > since]

    def last_seq(self) -> int:
        with self._lock:
            return len(self._events)

    def non_terminal(self) -> set[InstanceId]:
        with self._lock:
            return {i for i, s in self._states.items() if s not in TERMINAL}

    def write_state_file(self, path: Path, *, run_id: str, terminal: bool) -> None:
        """Atomic snapshot for fast status display (optional convenience)."""
        snap = self.snapshot()
        payload = {
            "run_id": run_id,
            "updated_at": _now(),
            "seq": self.last_seq(),
            "terminal": terminal,
            "states": {str(i): s.value for i, s in sorted(snap.items(), key=lambda kv: kv[0])},
        }
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        tmp.replace(path)

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None


def read_log(path: Path) -> list[Event]:
    """Parse events.log, dropping a truncated trailing record with a warning."""
    if not path.exists():
        return []
    events: list[Event] = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            events.append(Event.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            if lineno == len(lines):
                log.warning("dropping truncated trailing event record: %s", exc)
                break
            raise CorruptLog(f"corrupt event record at line {lineno}: {exc}") from exc
    for prev, cur in zip(events, events[1:]):
        if cur.seq != prev.seq + 1:
            raise CorruptLog(f"event seq gap: {prev.seq} -> {cur.seq}")
    return events


def fold(events: list[Event]) -> dict[InstanceId, TaskState]:
    """State map = fold of the event log (the single source of truth)."""
    states: dict[InstanceId, TaskState] = {}
    for event in events:
        states[event.instance] = event.to_state
    return states


def recover(run_dir: Path) -> JobRegistry:
    """Rebuild a registry by folding the persisted log; appends continue it."""
    path = Path(run_dir) / EVENTS_FILE
    events = read_log(path)
    # If a truncated trailing record was dropped, rewrite the valid prefix so
    # future appends do not merge into the partial line.
    if path.exists():
        raw = path.read_text(encoding="utf-8")
        valid_lines = sum(1 for line in raw.splitlines() if line.strip())
        if len(events) != valid_lines or (raw and not raw.endswith("\n")):
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8") as fh:
                for event in events:
                    fh.write(json.dumps(event.as_dict()) + "\n")
            tmp.replace(path)
    registry = JobRegistry(log_path=None)
    registry._events = list(events)
    registry._states = fold(events)
    registry._log_path = path
    path.parent.mkdir(parents=True, exist_ok=True)
    registry._log_file = open(path, "a", encoding="utf-8")
    return registry
