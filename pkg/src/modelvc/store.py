"""Content-addressed storage.

Parameter tensors are keyed by the SHA-256 of their canonical encoding (dtype
code, rank, dims and payload), so identical tensors are stored once no matter
how many models reference them. Blobs live under ``objects/xx/<62 hex>`` in
MGTN format.

Reference counts are kept in memory here and persisted by the repository as
part of its metadata document; ``put`` increments, ``decref`` decrements, and
:func:`gc` deletes blobs whose count dropped to zero.
"""

from __future__ import annotations

import hashlib
import os
import re

from . import _fsutil
from .errors import CorruptObjectError, LockError, MissingObjectError, ParseError, StoreWriteError
from .model import ParamRef, Tensor, decode_blob, encode_blob

_HEX64 = re.compile(r"^[0-9a-f]{64}$")


def content_key(t: Tensor) -> str:
    return t.content_key()


def fanout_path(root, key):
    return os.path.join(root, key[:2], key[2:])


def iter_fanout(root):
    """Yield ``(key, path)`` for every well-formed entry of a fan-out dir."""
    if not os.path.isdir(root):
        return
    for prefix in sorted(os.listdir(root)):
        sub = os.path.join(root, prefix)
        if len(prefix) != 2 or not os.path.isdir(sub):
            continue
        for rest in sorted(os.listdir(sub)):
            key = prefix + rest
            if _HEX64.match(key):
                yield key, os.path.join(sub, rest)


class RefCounts(dict):
    """key -> count; keys never go negative and zero entries are kept until gc."""

    def incref(self, key, n=1):
        self[key] = self.get(key, 0) + n
        return self[key]

    def decref(self, key, n=1):
        count = self.get(key, 0) - n
        if count < 0:
            raise CorruptObjectError(f"refcount underflow for {key}")
        self[key] = count
        return count

    def live(self):
        return {k for k, v in self.items() if v > 0}


class ObjectStore:
    def __init__(self, root, refcounts=None):
        self.root = os.fspath(root)
        self.refcounts = RefCounts(refcounts or {})

    def path(self, key):
        return fanout_path(self.root, key)

    def __contains__(self, key):
        return isinstance(key, str) and _HEX64.match(key) is not None and os.path.exists(self.path(key))

    def has_ref(self, ref: ParamRef) -> bool:
        return ref.kind == "stored" and ref.key in self

    def put(self, t: Tensor) -> str:
        key = t.content_key()
        try:
            _fsutil.write_once(self.path(key), encode_blob(t))
        except OSError as e:
            raise StoreWriteError(f"cannot write object {key}: {e}") from e
        self.refcounts.incref(key)
        return key

    def decref(self, key):
        return self.refcounts.decref(key)

    def read_raw(self, key) -> bytes:
        try:
            with open(self.path(key), "rb") as f:
                return f.read()
        except FileNotFoundError:
            raise MissingObjectError(f"object {key} not found") from None

    def get(self, key) -> Tensor:
        try:
            t = decode_blob(self.read_raw(key))
        except ParseError as e:
            raise CorruptObjectError(f"object {key}: {e}") from None
        if t.content_key() != key:
            raise CorruptObjectError(f"object {key} does not hash to its key")
        return t

    def verify(self, key) -> bool:
        try:
            self.get(key)
        except (CorruptObjectError, MissingObjectError):
            return False
        return True

    def keys(self):
        return [key for key, _ in iter_fanout(self.root)]

    def remove(self, key):
        try:
            os.unlink(self.path(key))
        except FileNotFoundError:
            return False
        self.refcounts.pop(key, None)
        return True

    def stored_bytes(self):
        return _fsutil.tree_size(self.root)


def blob_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def gc(repo) -> int:
    """Delete every object, delta record and manifest nobody references.

    Requires the repository write lock. Returns the number of files removed.
    """
    if not repo.lock_held:
        raise LockError("gc requires the repository write lock")
    return repo._collect_garbage()
