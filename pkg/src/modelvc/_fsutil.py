"""Crash-safe file writes.

Every byte modelvc persists goes through :func:`atomic_write`, which writes a
temporary sibling, fsyncs it and renames it over the target. A reader
therefore sees either the old file or the new one, never a torn one.

``crash_hook`` is a fault-injection point: when set, it is called with a
label at each write boundary and may raise (or ``os._exit``) to simulate a
process dying there.
"""

import os
import tempfile

crash_hook = None


def crash_point(label):
    if crash_hook is not None:
        crash_hook(label)


def atomic_write(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    crash_point(f"begin:{path}")
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            crash_point(f"written:{path}")
            f.flush()
            os.fsync(f.fileno())
        crash_point(f"synced:{path}")
        os.replace(tmp, path)
    except Exception:
        # a simulated crash (BaseException) deliberately leaves the temp file
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
    crash_point(f"renamed:{path}")


def write_once(path, data):
    """Content-addressed write: skip if the file already exists."""
    if os.path.exists(path):
        return False
    atomic_write(path, data)
    return True


def tree_size(root):
    total = 0
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            if not name.startswith(".tmp-"):
                total += os.path.getsize(os.path.join(dirpath, name))
    return total
