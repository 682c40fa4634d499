"""Execution backends and the file-marker completion protocol.

Every backend signals completion the same way: the exit code lands in
``<status_dir>/<base>#<gen>.exit`` and only then is the empty
``<base>#<gen>.done`` marker created.  The marker is the signal; the exit
file is guaranteed readable by the time any observer can see the marker.

The files are written by an epilogue appended to the task's own shell
(like a batch script trailer), not by the engine: completion signalling
survives an engine crash, which is what lets recovery resolve in-flight
work from markers alone.
"""

from __future__ import annotations

import os
import shlex
from pathlib import Path

from ..graph import InstanceId

DONE_SUFFIX = ".done"
EXIT_SUFFIX = ".exit"


def marker_path(status_dir: Path, instance: InstanceId) -> Path:
    return Path(status_dir) / f"{instance}{DONE_SUFFIX}"


def exit_path(status_dir: Path, instance: InstanceId) -> Path:
    return Path(status_dir) / f"{instance}{EXIT_SUFFIX}"


def instance_from_marker(filename: str) -> InstanceId | None:
    if not filename.endswith(DONE_SUFFIX):
        return None
    stem = filename[: -len(DONE_SUFFIX)]
    if "#" not in stem:
        return None
    return InstanceId.parse(stem)


def completion_wrapper(command: str, status_dir: Path, instance: InstanceId) -> str:
    """Wrap a shell command with the exit-then-marker epilogue.

    The command's status is captured, written atomically to the exit file
    (write + rename), and only then is the marker touched; the wrapper exits
    with the command's own status.
    """
    exit_file = exit_path(status_dir, instance)
    tmp = str(exit_file) + ".tmp"
    return (
        f"{command}\n"
        "__flowgate_status=$?\n"
        f"printf '%s\\n' \"$__flowgate_status\" > {shlex.quote(tmp)} && "
        f"mv {shlex.quote(tmp)} {shlex.quote(str(exit_file))} && "
        f": > {shlex.quote(str(marker_path(status_dir, instance)))}\n"
        "exit $__flowgate_status\n"
    )


def write_completion(status_dir: Path, instance: InstanceId, exit_code: int) -> None:
    """Exit file first (atomically via rename), marker strictly after."""
    status_dir = Path(status_dir)
    status_dir.mkdir(parents=True, exist_ok=True)
    target = exit_path(status_dir, instance)
    tmp = target.with_suffix(EXIT_SUFFIX + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(f"{exit_code}\n")
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(target)
    marker_path(status_dir, instance).touch()


def read_exit_code(status_dir: Path, instance: InstanceId) -> int | None:
    """Parsed exit code, or None when absent/malformed (caller decides policy)."""
    path = exit_path(status_dir, instance)
    try:
        text = path.read_text(encoding="utf-8").strip()
    except OSError:
        return None
    try:
        return int(text)
    except ValueError:
        return None
