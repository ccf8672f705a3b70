"""Lineage graph and on-disk repository.

Repository layout (``<workdir>/.modelvc``)::

    graph        metadata document: nodes, edges, hooks, refcounts, config
    objects/     parameter tensors, content-addressed (MGTN blobs)
    deltas/      delta records, content-addressed
    manifests/   model manifests, content-addressed
    hooks/       hook scripts copied in at registration
    lock         advisory write lock

``graph`` is the commit point. Every mutation first writes the content it
needs (blobs, delta records, manifests, all immutable and written through
temp-file + rename), then replaces ``graph`` atomically. A crash at any
point leaves either the old or the new metadata plus, at worst, orphan files
that :meth:`Repository.gc` removes.

Reference counts count ParamRef occurrences per node: each node adds one
count to every object or delta record its manifest references, and a live
delta record adds one count to the parameter it was encoded against.
"""

from __future__ import annotations

import errno
import fcntl
import hashlib
import json
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field

from . import _fsutil
from .deltacodec import CodecConfig, CompressionResult, DeltaStore, delta_compression, resolve_param
from .errors import (CodecError, CorruptObjectError, CycleError, FormatVersionError, IntegrityError,
                     LockError, MissingObjectError, ModelVCError, NodeNameError, ParseError,
                     RepositoryExistsError, RepositoryNotFound, SelectorError, TypeMismatchError)
from .hooks import HookSpec, run_test
from .model import ModelGraph, ParamRef, deserialize_model, serialize_model, write_model_dir
from .store import ObjectStore, RefCounts, fanout_path, gc as store_gc, iter_fanout

GRAPH_FORMAT = "modelvc-graph"
GRAPH_VERSION = 1
REPO_DIR = ".modelvc"
ENV_VAR = "MODELVC_DIR"

PROVENANCE = "provenance"
VERSIONING = "versioning"

_REF_KIND = {"stored": "objects", "delta": "deltas"}


@dataclass
class LineageNode:
    name: str
    model_type: str
    model_ref: str | None = None        # manifest key; None for a pending placeholder
    creation_hook: str | None = None
    test_hooks: dict = field(default_factory=dict)   # test name -> hook id
    prov_parents: list = field(default_factory=list)
    prov_children: list = field(default_factory=list)
    ver_parent: str | None = None
    ver_children: list = field(default_factory=list)
    created: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def pending(self):
        return self.model_ref is None

    def to_json(self):
        return {"name": self.name, "model_type": self.model_type, "model_ref": self.model_ref,
                "creation_hook": self.creation_hook, "test_hooks": dict(self.test_hooks),
                "prov_parents": list(self.prov_parents), "prov_children": list(self.prov_children),
                "ver_parent": self.ver_parent, "ver_children": list(self.ver_children),
                "created": self.created, "meta": dict(self.meta)}

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class LineageGraph:
    """Pure in-memory lineage graph; no I/O."""

    nodes: dict = field(default_factory=dict)
    hooks: dict = field(default_factory=dict)        # hook id -> HookSpec
    type_tests: dict = field(default_factory=dict)   # model_type -> {test name: hook id}
    refcounts: dict = field(default_factory=lambda: {k: RefCounts() for k in ("objects", "deltas", "manifests")})
    config: dict = field(default_factory=dict)
    counter: int = 0
    seq: int = 0
    format_version: int = GRAPH_VERSION

    def node(self, name) -> LineageNode:
        try:
            return self.nodes[name]
        except KeyError:
            raise NodeNameError(f"no node named {name!r}") from None

    def __contains__(self, name):
        return name in self.nodes

    def new_node(self, name, model_type, model_ref=None, creation_hook=None) -> LineageNode:
        if not isinstance(name, str) or not name or any(c in name for c in "\n\r\t"):
            raise NodeNameError(f"invalid node name {name!r}")
        if name in self.nodes:
            raise NodeNameError(f"node {name!r} already exists")
        if creation_hook is not None and creation_hook not in self.hooks:
            raise NodeNameError(f"no hook named {creation_hook!r}")
        self.seq += 1
        node = LineageNode(name, model_type, model_ref, creation_hook, created=self.seq)
        self.nodes[name] = node
        return node

    # -- edges --------------------------------------------------------------

    def reaches(self, src, dst, kind=PROVENANCE) -> bool:
        seen = {src}
        todo = [src]
        while todo:
            cur = todo.pop()
            if cur == dst:
                return True
            n = self.nodes[cur]
            nxt = n.prov_children if kind == PROVENANCE else n.ver_children
            for c in nxt:
                if c not in seen:
                    seen.add(c)
                    todo.append(c)
        return False

    def add_edge(self, x, y):
        a, b = self.node(x), self.node(y)
        if y in a.prov_children:
            return False
        if x == y or self.reaches(y, x):
            raise CycleError(f"provenance edge {x} -> {y} would create a cycle")
        a.prov_children.append(y)
        b.prov_parents.append(x)
        return True

    def add_version_edge(self, x, y):
        a, b = self.node(x), self.node(y)
        if a.model_type != b.model_type:
            raise TypeMismatchError(
                f"version edge needs equal model types: {x} is {a.model_type!r}, {y} is {b.model_type!r}")
        if b.ver_parent == x:
            return False
        if b.ver_parent is not None:
            raise IntegrityError(f"{y} already is a version of {b.ver_parent}")
        if x == y or self.reaches(y, x, VERSIONING):
            raise CycleError(f"version edge {x} -> {y} would create a cycle")
        a.ver_children.append(y)
        b.ver_parent = x
        return True

    def remove_edge(self, x, y, kind=PROVENANCE):
        a, b = self.node(x), self.node(y)
        if kind == PROVENANCE:
            if y not in a.prov_children:
                raise NodeNameError(f"no provenance edge {x} -> {y}")
            a.prov_children.remove(y)
            b.prov_parents.remove(x)
        elif kind == VERSIONING:
            if b.ver_parent != x:
                raise NodeNameError(f"no version edge {x} -> {y}")
            a.ver_children.remove(y)
            b.ver_parent = None
        else:
            raise ValueError(f"unknown edge kind {kind!r}")

    def descendants(self, x) -> set:
        out = set()
        todo = list(self.node(x).prov_children)
        while todo:
            cur = todo.pop()
            if cur not in out:
                out.add(cur)
                todo.extend(self.nodes[cur].prov_children)
        return out

    def removal_set(self, x) -> list:
        """``x`` plus the descendants no longer reachable once ``x`` is gone."""
        desc = self.descendants(x)
        keep = set()
        todo = [n for n in self.nodes if n != x and n not in desc]
        seen = set(todo)
        while todo:
            cur = todo.pop()
            for c in self.nodes[cur].prov_children:
                if c != x and c not in seen:
                    seen.add(c)
                    keep.add(c)
                    todo.append(c)
        doomed = {x} | (desc - keep)
        return sorted(doomed, key=lambda n: self.nodes[n].created)

    def detach(self, name):
        """Remove a node and every edge touching it."""
        n = self.node(name)
        for p in list(n.prov_parents):
            self.remove_edge(p, name, PROVENANCE)
        for c in list(n.prov_children):
            self.remove_edge(name, c, PROVENANCE)
        if n.ver_parent is not None:
            self.remove_edge(n.ver_parent, name, VERSIONING)
        for c in list(n.ver_children):
            self.remove_edge(name, c, VERSIONING)
        del self.nodes[name]
        return n

    def get_next_version(self, x):
        n = self.node(x)
        if not n.ver_children:
            return None
        return max(n.ver_children, key=lambda c: self.nodes[c].created)

    def first_version(self, x):
        n = self.node(x)
        while n.ver_parent is not None:
            n = self.nodes[n.ver_parent]
        return n.name

    def tests_for(self, x) -> dict:
        n = self.node(x)
        names = dict(self.type_tests.get(n.model_type, {}))
        names.update(n.test_hooks)
        return {t: self.hooks[h] for t, h in sorted(names.items())}

    def audit(self) -> list[str]:
        """Adjacency mirror, acyclicity and version-type checks."""
        problems = []
        for name, n in self.nodes.items():
            for c in n.prov_children:
                if c not in self.nodes or name not in self.nodes[c].prov_parents:
                    problems.append(f"provenance edge {name} -> {c} is not mirrored")
            for p in n.prov_parents:
                if p not in self.nodes or name not in self.nodes[p].prov_children:
                    problems.append(f"provenance edge {p} -> {name} is not mirrored")
            for c in n.ver_children:
                if c not in self.nodes or self.nodes[c].ver_parent != name:
                    problems.append(f"version edge {name} -> {c} is not mirrored")
                elif self.nodes[c].model_type != n.model_type:
                    problems.append(f"version edge {name} -> {c} joins different model types")
            if n.ver_parent is not None and (n.ver_parent not in self.nodes
                                             or name not in self.nodes[n.ver_parent].ver_children):
                problems.append(f"version edge {n.ver_parent} -> {name} is not mirrored")
            for h in [n.creation_hook, *n.test_hooks.values()]:
                if h is not None and h not in self.hooks:
                    problems.append(f"node {name} references unknown hook {h}")
        if not problems:
            for kind, attr in ((PROVENANCE, "prov_parents"), (VERSIONING, None)):
                indeg = {name: (len(getattr(n, attr)) if attr else int(n.ver_parent is not None))
                         for name, n in self.nodes.items()}
                todo = [name for name, d in indeg.items() if d == 0]
                done = 0
                while todo:
                    cur = todo.pop()
                    done += 1
                    n = self.nodes[cur]
                    for c in (n.prov_children if kind == PROVENANCE else n.ver_children):
                        indeg[c] -= 1
                        if indeg[c] == 0:
                            todo.append(c)
                if done != len(self.nodes):
                    problems.append(f"{kind} edges contain a cycle")
        return problems

    # -- persistence --------------------------------------------------------

    def to_bytes(self) -> bytes:
        doc = {
            "format": GRAPH_FORMAT, "format_version": self.format_version,
            "counter": self.counter, "seq": self.seq, "config": self.config,
            "nodes": {k: v.to_json() for k, v in self.nodes.items()},
            "hooks": {k: v.to_json() for k, v in self.hooks.items()},
            "type_tests": self.type_tests,
            "refcounts": {k: {key: c for key, c in sorted(v.items()) if c > 0}
                          for k, v in self.refcounts.items()},
        }
        return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LineageGraph":
        try:
            doc = json.loads(data)
        except (ValueError, UnicodeDecodeError) as e:
            raise ParseError(f"graph metadata is not valid JSON: {e}") from None
        if not isinstance(doc, dict) or doc.get("format") != GRAPH_FORMAT:
            raise ParseError("not a modelvc graph document")
        if doc.get("format_version") != GRAPH_VERSION:
            raise FormatVersionError(
                f"graph format version {doc.get('format_version')!r}, this build reads {GRAPH_VERSION}")
        try:
            nodes = {k: LineageNode.from_json(v) for k, v in doc["nodes"].items()}
            hooks = {k: HookSpec.from_json(v) for k, v in doc["hooks"].items()}
            refcounts = {k: RefCounts(doc["refcounts"].get(k, {}))
                         for k in ("objects", "deltas", "manifests")}
            return cls(nodes, hooks, doc["type_tests"], refcounts, doc.get("config", {}),
                       doc["counter"], doc["seq"], doc["format_version"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed graph metadata: {e!r}") from None


def save(graph: LineageGraph, repo_path):
    _fsutil.atomic_write(os.path.join(repo_path, "graph"), graph.to_bytes())


def load(repo_path) -> LineageGraph:
    try:
        with open(os.path.join(repo_path, "graph"), "rb") as f:
            return LineageGraph.from_bytes(f.read())
    except FileNotFoundError:
        raise RepositoryNotFound(f"no repository metadata in {repo_path}") from None


@dataclass
class FsckReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    checked: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.errors


class Repository:
    def __init__(self, path):
        self.path = os.path.abspath(path)
        self.objects = ObjectStore(os.path.join(self.path, "objects"))
        self.deltas = DeltaStore(os.path.join(self.path, "deltas"))
        self.manifest_dir = os.path.join(self.path, "manifests")
        self.hook_dir = os.path.join(self.path, "hooks")
        self.graph = LineageGraph()
        self._lock_fd = None
        self._lock_depth = 0
        self._txn_depth = 0
        self._stat = None
        self._param_cache = {}
        self._load()

    # -- opening ------------------------------------------------------------

    @classmethod
    def init(cls, workdir=".", codec: CodecConfig | None = None) -> "Repository":
        path = os.path.join(os.path.abspath(workdir), REPO_DIR)
        if os.path.exists(os.path.join(path, "graph")):
            raise RepositoryExistsError(f"repository already exists at {path}")
        for sub in ("objects", "deltas", "manifests", "hooks"):
            os.makedirs(os.path.join(path, sub), exist_ok=True)
        g = LineageGraph()
        g.config = _config_json(codec or CodecConfig())
        save(g, path)
        return cls(path)

    @classmethod
    def open(cls, path) -> "Repository":
        path = os.path.abspath(path)
        if not os.path.exists(os.path.join(path, "graph")) and os.path.isdir(os.path.join(path, REPO_DIR)):
            path = os.path.join(path, REPO_DIR)
        if not os.path.exists(os.path.join(path, "graph")):
            raise RepositoryNotFound(f"no repository at {path}")
        return cls(path)

    @classmethod
    def discover(cls, start=None) -> "Repository":
        """Honour ``$MODELVC_DIR``, else search upwards for ``.modelvc``."""
        env = os.environ.get(ENV_VAR)
        if env:
            return cls.open(env)
        cur = os.path.abspath(start or os.getcwd())
        while True:
            if os.path.exists(os.path.join(cur, REPO_DIR, "graph")):
                return cls(os.path.join(cur, REPO_DIR))
            parent = os.path.dirname(cur)
            if parent == cur:
                raise RepositoryNotFound(f"not inside a modelvc repository: {start or os.getcwd()}")
            cur = parent

    @property
    def codec(self) -> CodecConfig:
        return CodecConfig(**self.graph.config) if self.graph.config else CodecConfig()

    # -- locking and transactions --------------------------------------------

    @property
    def lock_held(self):
        return self._lock_depth > 0

    @contextmanager
    def locked(self):
        if self._lock_depth == 0:
            fd = os.open(os.path.join(self.path, "lock"), os.O_RDWR | os.O_CREAT, 0o644)
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except OSError as e:
                os.close(fd)
                if e.errno in (errno.EWOULDBLOCK, errno.EAGAIN, errno.EACCES):
                    raise LockError(f"repository {self.path} is locked by another process") from None
                raise
            self._lock_fd = fd
        self._lock_depth += 1
        try:
            yield self
        finally:
            self._lock_depth -= 1
            if self._lock_depth == 0:
                fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
                os.close(self._lock_fd)
                self._lock_fd = None

    @contextmanager
    def transaction(self):
        """Lock, reload, run the body, save. Nested calls join the outer one;
        an exception discards the in-memory changes."""
        with self.locked():
            outer = self._txn_depth == 0
            if outer:
                self._load()
            self._txn_depth += 1
            try:
                yield self
            except BaseException:
                self._txn_depth -= 1
                if outer:
                    try:
                        self._load()
                    except Exception:
                        pass
                raise
            self._txn_depth -= 1
            if outer:
                self._save()

    def _graph_path(self):
        return os.path.join(self.path, "graph")

    def _load(self):
        try:
            with open(self._graph_path(), "rb") as f:
                data = f.read()
                st = os.fstat(f.fileno())
        except FileNotFoundError:
            raise RepositoryNotFound(f"no repository metadata in {self.path}") from None
        self.graph = LineageGraph.from_bytes(data)
        self._stat = (st.st_ino, st.st_mtime_ns, st.st_size)
        self.objects.refcounts = self.graph.refcounts["objects"]
        self.deltas.refcounts = self.graph.refcounts["deltas"]

    def _save(self):
        self.graph.counter += 1
        _fsutil.atomic_write(self._graph_path(), self.graph.to_bytes())
        st = os.stat(self._graph_path())
        self._stat = (st.st_ino, st.st_mtime_ns, st.st_size)

    def refresh(self):
        """Reload the metadata if another handle committed since we read it."""
        if self._txn_depth:
            return
        try:
            st = os.stat(self._graph_path())
        except FileNotFoundError:
            raise RepositoryNotFound(f"no repository metadata in {self.path}") from None
        if (st.st_ino, st.st_mtime_ns, st.st_size) != self._stat:
            self._load()

    # -- content ------------------------------------------------------------

    def has_ref(self, ref: ParamRef) -> bool:
        if ref.kind == "stored":
            return ref.key in self.objects
        if ref.kind == "delta":
            return ref.key in self.deltas
        return True

    def _incref(self, kind, key):
        if self.graph.refcounts[kind].incref(key) == 1 and kind == "deltas":
            record = self.deltas.get(key)
            self._incref(_REF_KIND[record.parent_kind], record.parent_key)

    def _decref(self, kind, key):
        if self.graph.refcounts[kind].decref(key) == 0 and kind == "deltas":
            record = self.deltas.get(key)
            self._decref(_REF_KIND[record.parent_kind], record.parent_key)

    def _write_manifest(self, data: bytes) -> str:
        key = hashlib.sha256(data).hexdigest()
        _fsutil.write_once(fanout_path(self.manifest_dir, key), data)
        return key

    def read_manifest(self, key) -> bytes:
        try:
            with open(fanout_path(self.manifest_dir, key), "rb") as f:
                data = f.read()
        except FileNotFoundError:
            raise MissingObjectError(f"manifest {key} not found") from None
        if hashlib.sha256(data).hexdigest() != key:
            raise CorruptObjectError(f"manifest {key} does not hash to its key")
        return data

    def _store_model(self, m: ModelGraph) -> str:
        """Persist ``m`` and take references for it; returns the manifest key."""
        m.validate()
        refs = {}
        for path, ref in m.param_items():
            if ref.kind == "inline":
                key = self.objects.put(ref.tensor)   # put increfs
                refs[path] = ParamRef.stored(key, ref.shape, ref.dtype)
            else:
                if not self.has_ref(ref):
                    raise MissingObjectError(f"param {path} -> {ref.kind} {ref.key} does not resolve")
                self._incref(_REF_KIND[ref.kind], ref.key)
        manifest, _ = serialize_model(m.replace_params(refs))
        key = self._write_manifest(manifest)
        self.graph.refcounts["manifests"].incref(key)
        return key

    def _release_model(self, manifest_key):
        m = deserialize_model(self.read_manifest(manifest_key))
        for _, ref in m.param_items():
            self._decref(_REF_KIND[ref.kind], ref.key)
        self.graph.refcounts["manifests"].decref(manifest_key)

    def resolve(self, ref: ParamRef):
        return resolve_param(ref, self.objects, self.deltas, self.codec, self._param_cache)

    def chain_depth(self, ref: ParamRef) -> int:
        return self.deltas.get(ref.key).depth if ref.kind == "delta" else 0

    def load_model(self, name) -> ModelGraph:
        """The node's model with stored/delta refs."""
        self.refresh()
        n = self.graph.node(name)
        if n.pending:
            raise IntegrityError(f"node {name!r} has no model yet")
        return deserialize_model(self.read_manifest(n.model_ref), self)

    def materialize(self, name) -> ModelGraph:
        """The node's model with every parameter decoded inline."""
        m = self.load_model(name)
        return m.replace_params({p: ParamRef.inline(self.resolve(r)) for p, r in m.param_items()})

    def export(self, name, path) -> str:
        """Write a self-contained model directory; returns its manifest path."""
        return write_model_dir(path, self.load_model(name), self.resolve)

    def manifest_bytes(self, name) -> bytes:
        n = self.graph.node(name)
        return b"" if n.pending else self.read_manifest(n.model_ref)

    def stored_bytes(self) -> int:
        return self.objects.stored_bytes() + self.deltas.stored_bytes()

    # -- graph queries ------------------------------------------------------

    def node(self, name) -> LineageNode:
        self.refresh()
        return self.graph.node(name)

    def node_names(self) -> list:
        self.refresh()
        return sorted(self.graph.nodes, key=lambda n: self.graph.nodes[n].created)

    def get_next_version(self, x):
        self.refresh()
        return self.graph.get_next_version(x)

    def tests_for(self, x) -> dict:
        self.refresh()
        return self.graph.tests_for(x)

    def param_key(self, name, path):
        m = self.load_model(name)
        return dict(m.param_items())[path].key

    # -- mutations ----------------------------------------------------------

    def add_node(self, model: ModelGraph, name, creation_hook=None, parents=(), meta=None) -> LineageNode:
        with self.transaction():
            for p in parents:
                self.graph.node(p)
            node = self.graph.new_node(name, model.model_type, None, creation_hook)
            node.model_ref = self._store_model(model)
            node.meta.update(meta or {})
            for p in parents:
                self.graph.add_edge(p, name)
            return node

    def add_placeholder(self, name, model_type, creation_hook=None, meta=None) -> LineageNode:
        with self.transaction():
            node = self.graph.new_node(name, model_type, None, creation_hook)
            node.meta.update(meta or {})
            return node

    def set_model(self, name, model: ModelGraph):
        """Fill a pending placeholder; existing models are never replaced."""
        with self.transaction():
            node = self.graph.node(name)
            if not node.pending:
                raise IntegrityError(f"node {name!r} already has a model")
            if model.model_type != node.model_type:
                raise TypeMismatchError(f"node {name!r} expects model type {node.model_type!r}")
            node.model_ref = self._store_model(model)
            return node

    def add_edge(self, x, y):
        with self.transaction():
            return self.graph.add_edge(x, y)

    def add_version_edge(self, x, y):
        with self.transaction():
            return self.graph.add_version_edge(x, y)

    def remove_edge(self, x, y, kind=PROVENANCE):
        with self.transaction():
            self.graph.remove_edge(x, y, kind)

    def remove_node(self, x) -> list:
        with self.transaction():
            doomed = self.graph.removal_set(x)
            for name in doomed:
                node = self.graph.detach(name)
                if node.model_ref is not None:
                    self._release_model(node.model_ref)
            return doomed

    def register_hook(self, spec: HookSpec) -> HookSpec:
        with self.transaction():
            self.graph.hooks[spec.hook_id] = spec
            return spec

    def install_hook_script(self, hook_id, script) -> str:
        """Copy ``script`` under ``hooks/``; returns the installed path."""
        with self.locked():
            with open(script, "rb") as f:
                data = f.read()
            dest = os.path.join(self.hook_dir, f"{hook_id}-{os.path.basename(script)}")
            _fsutil.atomic_write(dest, data)
            os.chmod(dest, 0o755)
            return dest

    def _hook_id(self, hook):
        if isinstance(hook, HookSpec):
            self.graph.hooks[hook.hook_id] = hook
            return hook.hook_id
        if hook not in self.graph.hooks:
            raise NodeNameError(f"no hook named {hook!r}")
        return hook

    def register_creation_function(self, x, hook):
        with self.transaction():
            node = self.graph.node(x)
            hid = self._hook_id(hook)
            if self.graph.hooks[hid].kind != "creation":
                raise SelectorError(f"hook {hid!r} is not a creation hook")
            node.creation_hook = hid

    def register_test_function(self, hook, name, x=None, model_type=None):
        if (x is None) == (model_type is None):
            raise SelectorError("give exactly one of a node or a model type")
        with self.transaction():
            if x is not None:
                node = self.graph.node(x)
                node.test_hooks[name] = self._hook_id(hook)
            else:
                self.graph.type_tests.setdefault(model_type, {})[name] = self._hook_id(hook)

    def deregister_test_function(self, name, x=None, model_type=None):
        if (x is None) == (model_type is None):
            raise SelectorError("give exactly one of a node or a model type")
        with self.transaction():
            table = self.graph.node(x).test_hooks if x is not None else self.graph.type_tests.get(model_type, {})
            if name not in table:
                raise NodeNameError(f"no test named {name!r} registered there")
            del table[name]
            if model_type is not None and not table:
                self.graph.type_tests.pop(model_type, None)

    def set_codec(self, cfg: CodecConfig):
        with self.transaction():
            self.graph.config = _config_json(cfg)

    # -- compression --------------------------------------------------------

    def compression_base(self, x):
        n = self.graph.node(x)
        for p in n.prov_parents:
            if not self.graph.nodes[p].pending:
                return p
        if n.ver_parent is not None and not self.graph.nodes[n.ver_parent].pending:
            return n.ver_parent
        return None

    def _test_runner(self, x):
        tests = self.graph.tests_for(x)
        if not tests:
            return None

        def run(model):
            with tempfile.TemporaryDirectory(prefix="modelvc-eval-") as d:
                manifest = write_model_dir(d, model, self.resolve)
                results = {}
                for tname, hook in tests.items():
                    out = run_test(hook, manifest)
                    results[tname] = (out.passed, out.metric)
                return results
        return run

    def compress(self, x, base=None, cfg: CodecConfig | None = None,
                 run_tests=True) -> CompressionResult:
        """Delta-compress node ``x`` against ``base`` (its first provenance
        parent by default). Roots are never compressed."""
        cfg = cfg or self.codec
        with self.transaction():
            node = self.graph.node(x)
            if node.pending:
                raise IntegrityError(f"node {x!r} has no model")
            base = base if base is not None else self.compression_base(x)
            m2 = self.load_model(x)
            if base is None:
                return CompressionResult(False, {}, m2, reason="root models are not compressed")
            m1 = self.load_model(base)
            result = delta_compression(m2, m1, cfg, self._test_runner(x) if run_tests else None,
                                       self.resolve, self.chain_depth, exclude_shared=True)
            if not result.accepted:
                return result
            for record in result.records.values():
                self.deltas.put(record)
            old = node.model_ref
            node.model_ref = self._store_model(result.model)
            self._release_model(old)
            return result

    # -- integrity ----------------------------------------------------------

    def rebuild_refcounts(self) -> dict:
        counts = {k: RefCounts() for k in ("objects", "deltas", "manifests")}
        for node in self.graph.nodes.values():
            if node.model_ref is None:
                continue
            counts["manifests"].incref(node.model_ref)
            m = deserialize_model(self.read_manifest(node.model_ref))
            for _, ref in m.param_items():
                kind = _REF_KIND[ref.kind]
                key = ref.key
                # a delta record pins its parent only while it is live
                while counts[kind].incref(key) == 1 and kind == "deltas":
                    record = self.deltas.get(key)
                    kind, key = _REF_KIND[record.parent_kind], record.parent_key
        return counts

    def fsck(self, deep=True) -> FsckReport:
        self.refresh()
        report = FsckReport()
        err = report.errors.append
        for key in self.objects.keys():
            if not self.objects.verify(key):
                err(f"object {key} is corrupt")
        for key in self.deltas.keys():
            try:
                self.deltas.get(key)
            except (CorruptObjectError, CodecError) as e:
                err(f"delta record {key}: {e}")
        for key, _ in iter_fanout(self.manifest_dir):
            try:
                deserialize_model(self.read_manifest(key))
            except (CorruptObjectError, ParseError) as e:
                err(f"manifest {key}: {e}")
        report.checked["files"] = (len(self.objects.keys()), len(self.deltas.keys()))
        report.errors.extend(self.graph.audit())
        resolved = 0
        for name, node in self.graph.nodes.items():
            if node.pending:
                report.warnings.append(f"node {name} is a pending placeholder")
                continue
            try:
                m = self.load_model(name)
                if deep:
                    for path, ref in m.param_items():
                        t = self.resolve(ref)
                        if t.shape != ref.shape or t.dtype != ref.dtype:
                            err(f"node {name} param {path} resolves to the wrong shape or dtype")
                        resolved += 1
            except ModelVCError as e:
                err(f"node {name}: {e}")
        report.checked["params"] = resolved
        if not report.errors:
            try:
                expected = self.rebuild_refcounts()
            except ModelVCError as e:
                err(f"cannot rebuild reference counts: {e}")
            else:
                for kind, counts in expected.items():
                    have = {k: v for k, v in self.graph.refcounts[kind].items() if v}
                    if have != dict(counts):
                        err(f"{kind} reference counts disagree with a full rescan")
        return report

    def _collect_garbage(self) -> int:
        removed = 0
        rc = self.graph.refcounts
        for key in self.objects.keys():
            if rc["objects"].get(key, 0) <= 0:
                removed += self.objects.remove(key)
        for key in self.deltas.keys():
            if rc["deltas"].get(key, 0) <= 0:
                removed += self.deltas.remove(key)
        for key, path in list(iter_fanout(self.manifest_dir)):
            if rc["manifests"].get(key, 0) <= 0:
                os.unlink(path)
                removed += 1
        for dirpath, _, files in os.walk(self.path):
            for fname in files:
                if fname.startswith(".tmp-"):
                    os.unlink(os.path.join(dirpath, fname))
        for counts in rc.values():
            for key in [k for k, v in counts.items() if v <= 0]:
                del counts[key]
        self._param_cache.clear()
        return removed

    def gc(self) -> int:
        with self.transaction():
            return store_gc(self)


def _config_json(cfg: CodecConfig) -> dict:
    return {"epsilon": cfg.epsilon, "t_thr": cfg.t_thr, "backend": cfg.backend,
            "max_chain_depth": cfg.max_chain_depth}


