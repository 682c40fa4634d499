"""Deterministic simulated batch scheduler with SLURM-like semantics.

Jobs enter a pending queue (PD), wait out a seeded queue delay, run as real
subprocesses up to a concurrency cap (R), and finish by writing the exit
file and ``.done`` marker before flipping to CD/F.  The simulator never
notifies anyone: completion is observable only via :meth:`query` or the
filesystem, which is exactly the constraint that motivates the watcher.

With a fixed seed and a fixed submission sequence the canonical
:meth:`trace` (job ids, queue delays, state order, marker order) is
bit-identical across runs; wall-clock fields on :class:`BatchJob` exist for
observability only.
"""

from __future__ import annotations

import logging
import os
import random
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from ..config import ExecSiteDecl
from ..graph import InstanceId
from . import completion_wrapper, marker_path, write_completion

log = logging.getLogger("flowgate.batchsim")

TICK_S = 0.05


class JobState(str, Enum):
    PD = "PD"  # pending in queue
    R = "R"    # running
    CD = "CD"  # completed, exit 0
    F = "F"    # failed
    CA = "CA"  # cancelled


class UnknownJob(Exception):
    pass


class QueueFull(Exception):
    pass


class SchedulerShutdown(Exception):
    pass


@dataclass
class BatchJob:
    job_id: int
    instance: InstanceId
    script: str
    state: JobState = JobState.PD
    submit_time: float = 0.0
    start_time: float | None = None
    end_time: float | None = None
    queue_delay: float = 0.0
    run_cap: float | None = None
    workdir: Path | None = None
    env: dict[str, str] = field(default_factory=dict)
    history: list[str] = field(default_factory=list)
    proc: subprocess.Popen | None = None
    suppress_files: bool = False


class BatchSimulator:
    """One simulator per batch execsite; runs its own ticking loop."""

    def __init__(self, site: ExecSiteDecl, status_dir: Path, tick: float = TICK_S):
        self.site = site
        self.status_dir = Path(status_dir)
        self.status_dir.mkdir(parents=True, exist_ok=True)
        self.tick = tick
        self._rng = random.Random(site.seed)
        self._jobs: dict[int, BatchJob] = {}
        self._next_id = 1
        self._lock = threading.RLock()
        self._shutdown = False
        self._start_log: list[tuple[float, int, InstanceId]] = []
        self._marker_order: list[int] = []
        self._thread = threading.Thread(
            target=self._loop, name=f"batchsim-{site.name}", daemon=True
        )
        self._thread.start()

    # -- sbatch / squeue / scancel analogues ---------------------------------

    def submit(
        self,
        script: str,
        instance: InstanceId,
        *,
        workdir: Path | None = None,
        env: dict[str, str] | None = None,
        run_cap: float | None = None,
    ) -> int:
        """Non-blocking; the job enters PD with a seeded queue delay."""
        with self._lock:
            if self._shutdown:
                raise SchedulerShutdown(self.site.name)
            pending = sum(1 for j in self._jobs.values() if j.state == JobState.PD)
            if self.site.max_queue is not None and pending >= self.site.max_queue:
                raise QueueFull(f"{self.site.name}: queue capacity {self.site.max_queue}")
            lo, hi = self.site.queue_delay
            delay = lo if lo == hi else self._rng.uniform(lo, hi)
            job = BatchJob(
                job_id=self._next_id,
                instance=instance,
                script=script,
                submit_time=time.time(),
                queue_delay=delay,
                run_cap=run_cap,
                workdir=workdir,
                env=dict(env or {}),
                history=[JobState.PD.value],
            )
            self._next_id += 1
            self._jobs[job.job_id] = job
            log.debug("job %d (%s) queued, delay %.3fs", job.job_id, instance, delay)
            return job.job_id

    def query(self, job_id: int) -> BatchJob:
        """Current job record; CD/F only after the marker hit the status dir."""
        with self._lock:
            if job_id not in self._jobs:
                raise UnknownJob(str(job_id))
            job = self._jobs[job_id]
            return BatchJob(
                job_id=job.job_id,
                instance=job.instance,
                script=job.script,
                state=job.state,
                submit_time=job.submit_time,
                start_time=job.start_time,
                end_time=job.end_time,
                queue_delay=job.queue_delay,
                run_cap=job.run_cap,
                history=list(job.history),
            )

    def cancel(self, job_id: int) -> None:
        """PD jobs leave the queue silently; R jobs are terminated. No marker."""
        with self._lock:
            if job_id not in self._jobs:
                raise UnknownJob(str(job_id))
            job = self._jobs[job_id]
            if job.state == JobState.PD:
                self._set_state(job, JobState.CA)
                return
            if job.state == JobState.R:
                job.suppress_files = True
                self._kill(job)
                self._set_state(job, JobState.CA)
                job.end_time = time.time()
            # terminal states: cancel is a no-op

    def started_since(self, cursor: int) -> tuple[int, list[tuple[float, int, InstanceId]]]:
        """Poll for jobs that entered R after the given cursor (squeue-style)."""
        with self._lock:
            entries = self._start_log[cursor:]
            return len(self._start_log), list(entries)

    def running_count(self) -> int:
        with self._lock:
            return sum(1 for j in self._jobs.values() if j.state == JobState.R)

    def trace(self) -> list[tuple]:
        """Canonical deterministic trace for seeded-replay comparison."""
        with self._lock:
            jobs = [
                (j.job_id, str(j.instance), j.queue_delay, tuple(j.history))
                for j in sorted(self._jobs.values(), key=lambda j: j.job_id)
            ]
            return [("jobs", tuple(jobs)), ("markers", tuple(self._marker_order))]

    def shutdown(self, *, kill_running: bool = True) -> None:
        with self._lock:
            self._shutdown = True
            if kill_running:
                for job in self._jobs.values():
                    if job.state == JobState.R:
                        job.suppress_files = True
                        self._kill(job)
                        self._set_state(job, JobState.CA)
        self._thread.join(timeout=5)

    # -- internal ticking loop ------------------------------------------------

    def _loop(self) -> None:
        while True:
            with self._lock:
                if self._shutdown:
                    return
                self._reap_finished()
                self._start_eligible()
            time.sleep(self.tick)

    def _start_eligible(self) -> None:
        now = time.time()
        running = sum(1 for j in self._jobs.values() if j.state == JobState.R)
        eligible = [
            j for j in self._jobs.values()
            if j.state == JobState.PD and now - j.submit_time >= j.queue_delay
        ]
        for job in sorted(eligible, key=lambda j: j.job_id):
            if running >= self.site.max_concurrent_running:
                break
            self._spawn(job)
            running += 1

    def _spawn(self, job: BatchJob) -> None:
        workdir = job.workdir or self.status_dir
        Path(workdir).mkdir(parents=True, exist_ok=True)
        env = dict(os.environ)
        env.update(job.env)
        stdout = open(Path(workdir) / "stdout.log", "ab")
        stderr = open(Path(workdir) / "stderr.log", "ab")
        script = completion_wrapper(job.script, self.status_dir, job.instance)
        try:
            job.proc = subprocess.Popen(
                script,
                shell=True,
                cwd=workdir,
                env=env,
                stdout=stdout,
                stderr=stderr,
                start_new_session=True,
            )
        except OSError as exc:
            log.warning("job %d failed to spawn: %s", job.job_id, exc)
            write_completion(self.status_dir, job.instance, 127)
            self._marker_order.append(job.job_id)
            self._set_state(job, JobState.F)
            job.end_time = time.time()
            return
        finally:
            stdout.close()
            stderr.close()
        job.start_time = time.time()
        self._set_state(job, JobState.R)
        self._start_log.append((job.start_time, job.job_id, job.instance))

    def _reap_finished(self) -> None:
        now = time.time()
        for job in self._jobs.values():
            if job.state != JobState.R or job.proc is None:
                continue
            if job.run_cap is not None and job.start_time is not None:
                if now - job.start_time > job.run_cap and job.proc.poll() is None:
                    log.warning("job %d exceeded run cap %.1fs; killing", job.job_id, job.run_cap)
                    self._kill(job)
            code = job.proc.poll()
            if code is None:
                continue
            job.end_time = now
            # a normal exit means the job's epilogue already wrote exit file
            # then marker; a kill (run cap) skipped the epilogue, so the
            # scheduler records the failure itself
            if not marker_path(self.status_dir, job.instance).exists():
                write_completion(self.status_dir, job.instance, code if code != 0 else 137)
            self._marker_order.append(job.job_id)
            self._set_state(job, JobState.CD if code == 0 else JobState.F)

    def _kill(self, job: BatchJob) -> None:
        if job.proc is not None and job.proc.poll() is None:
            try:
                os.killpg(job.proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            job.proc.wait()

    def _set_state(self, job: BatchJob, state: JobState) -> None:
        job.state = state
        job.history.append(state.value)


class RealBatchAdapter:
    """Extension point: same surface as :class:`BatchSimulator`, shelling out
    to sbatch/squeue/scancel.  Excluded from the test suite (no cluster at
    desk scale); sites of kind ``remote_batch`` fall back to the simulator.
    """

    def __init__(self, site: ExecSiteDecl, status_dir: Path):  # pragma: no cover
        raise NotImplementedError(
            "real batch submission requires cluster access; use kind = 'batch_sim'"
        )
