"""Completion detection by polling execsite status directories.

Batch schedulers give no workflow-level notifications, so completion is a
file appearing: the watcher polls each site's status dir for ``.done``
markers, pairs them with their exit files, and pushes exactly one
notification per instance onto the orchestrator's event channel.  It is a
read-only observer; it never writes to status dirs and holds no registry
references.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from .graph import InstanceId
from .executors import exit_path, instance_from_marker

log = logging.getLogger("flowgate.watcher")

BACKOFF_CAP_S = 30.0
GRACE_POLLS = 2
HEALTH_FAILURE_THRESHOLD = 5


class UnreadableStatusDir(Exception):
    pass


@dataclass(frozen=True)
class Completion:
    """One detected completion; exit_code None means unknown (missing or
    malformed exit file after the grace window).

    marker_mtime is wall-clock (stat) time, used to order observations;
    detected_at is monotonic, used to measure detection latency.
    """

    site: str
    instance: InstanceId
    exit_code: int | None
    marker_mtime: float
    detected_at: float


@dataclass(frozen=True)
class SiteHealth:
    site: str
    error: str


@dataclass
class SitePoller:
    """Per-site polling state: dedup memory plus the exit-file grace ledger."""

    site: str
    status_dir: Path
    poll_interval: float = 1.0
    grace_polls: int = GRACE_POLLS
    reported: set[InstanceId] = field(default_factory=set)
    _waiting_exit: dict[InstanceId, int] = field(default_factory=dict)


def poll_once(poller: SitePoller, expected: Iterable[InstanceId]) -> list[Completion]:
    """One sweep of the status dir.

    Returns every expected, not-yet-reported instance whose marker exists,
    ordered by marker mtime.  A marker whose exit file has not appeared yet
    is re-polled for ``grace_polls`` sweeps (covers non-atomic writers) and
    then reported with exit_code None.
    """
    expected = set(expected)
    try:
        entries = list(Path(poller.status_dir).iterdir())
    except OSError as exc:
        raise UnreadableStatusDir(f"{poller.site}: {exc}") from exc

    found: list[tuple[float, InstanceId, int | None]] = []
    for entry in entries:
        instance = instance_from_marker(entry.name)
        if instance is None or instance in poller.reported or instance not in expected:
            continue
        try:
            mtime = entry.stat().st_mtime
        except OSError:
            continue
        exit_file = exit_path(poller.status_dir, instance)
        if not exit_file.exists():
            waited = poller._waiting_exit.get(instance, 0)
            if waited < poller.grace_polls:
                poller._waiting_exit[instance] = waited + 1
                continue
            log.warning("%s: marker without exit file for %s; reporting unknown exit",
                        poller.site, instance)
            found.append((mtime, instance, None))
            continue
        try:
            code: int | None = int(exit_file.read_text(encoding="utf-8").strip())
        except (OSError, ValueError) as exc:
            log.warning("%s: malformed exit file for %s (%s); reporting unknown exit",
                        poller.site, instance, exc)
            code = None
        found.append((mtime, instance, code))

    found.sort(key=lambda item: (item[0], str(item[1])))
    now = time.monotonic()
    completions = []
    for mtime, instance, code in found:
        poller.reported.add(instance)
        poller._waiting_exit.pop(instance, None)
        completions.append(Completion(
            site=poller.site,
            instance=instance,
            exit_code=code,
            marker_mtime=mtime,
            detected_at=now,
        ))
    return completions


class Watcher:
    """One watch loop per site, all feeding a single ordered channel.

    ``expected_provider(site_name)`` supplies the instances currently owed a
    completion on that site; the orchestrator keeps it current.  Transient
    read failures back off exponentially (capped); after
    ``HEALTH_FAILURE_THRESHOLD`` consecutive failures a :class:`SiteHealth`
    event is emitted.
    """

    def __init__(
        self,
        pollers: list[SitePoller],
        channel: "queue.Queue",
        expected_provider: Callable[[str], set[InstanceId]],
    ):
        self._pollers = pollers
        self._channel = channel
        self._expected = expected_provider
        self._stop = threading.Event()
        self._threads = [
            threading.Thread(target=self._watch, args=(p,), name=f"watch-{p.site}", daemon=True)
            for p in pollers
        ]

    def start(self) -> None:
        for thread in self._threads:
            thread.start()

    def stop(self) -> None:
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout=5)

    def _watch(self, poller: SitePoller) -> None:
        failures = 0
        health_reported = False
        while not self._stop.is_set():
            try:
                for completion in poll_once(poller, self._expected(poller.site)):
                    self._channel.put(completion)
                failures = 0
                health_reported = False
                delay = poller.poll_interval
            except UnreadableStatusDir as exc:
                failures += 1
                delay = min(poller.poll_interval * (2 ** failures), BACKOFF_CAP_S)
                log.warning("status dir unreadable (attempt %d): %s", failures, exc)
                if failures >= HEALTH_FAILURE_THRESHOLD and not health_reported:
                    self._channel.put(SiteHealth(site=poller.site, error=str(exc)))
                    health_reported = True
            self._stop.wait(delay)
