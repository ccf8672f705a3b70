"""Creation and test functions as external programs.

A hook is an argv template. Placeholders:

``{parents}``  parent manifest paths; as a standalone argument it expands into
               one argument per parent, inside a larger string they are
               joined with ``os.pathsep``
``{output}``   directory the hook must write a model directory into
``{model}``    manifest path of the model under test
``{workdir}``  scratch directory, removed afterwards

Exit status 0 means success. For test hooks the last stdout line, when it
parses as a float, is the metric.
"""

from __future__ import annotations

import os
import shutil
import string
import subprocess
import tempfile
from dataclasses import dataclass, field

from .errors import (HookError, HookFailedError, HookTimeoutError, IntegrityError, MissingObjectError,
                     ParseError, SharingViolationError)
from .model import ModelGraph, read_model_dir

HOOK_KINDS = ("creation", "test", "generic")
PLACEHOLDERS = frozenset({"parents", "output", "model", "workdir"})
DEFAULT_TIMEOUT = 3600.0


def _fields(template):
    try:
        return {name for _, name, _, _ in string.Formatter().parse(template) if name is not None}
    except ValueError as e:
        raise HookError(f"bad command template {template!r}: {e}") from None


@dataclass(frozen=True)
class HookSpec:
    hook_id: str
    kind: str
    command: tuple[str, ...]
    timeout: float = DEFAULT_TIMEOUT
    mtl_group: str | None = None
    shared: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(str(a) for a in self.command))
        object.__setattr__(self, "shared", tuple(sorted(set(self.shared))))
        if not self.hook_id:
            raise HookError("hook id must be non-empty")
        if self.kind not in HOOK_KINDS:
            raise HookError(f"unknown hook kind {self.kind!r}")
        if not self.command:
            raise HookError(f"hook {self.hook_id!r} has an empty command")
        for arg in self.command:
            unknown = _fields(arg) - PLACEHOLDERS
            if unknown:
                raise HookError(f"hook {self.hook_id!r} uses unknown placeholder(s) {sorted(unknown)}")
        if self.timeout <= 0:
            raise HookError("timeout must be positive")
        if (self.mtl_group is not None or self.shared) and self.kind != "creation":
            raise HookError("only creation hooks can belong to an MTL group")

    def to_json(self):
        return {"hook_id": self.hook_id, "kind": self.kind, "command": list(self.command),
                "timeout": self.timeout, "mtl_group": self.mtl_group, "shared": list(self.shared)}

    @classmethod
    def from_json(cls, d):
        return cls(d["hook_id"], d["kind"], tuple(d["command"]), float(d.get("timeout", DEFAULT_TIMEOUT)),
                   d.get("mtl_group"), tuple(d.get("shared", ())))


def expand_command(spec: HookSpec, parents=(), output="", model="", workdir="") -> list[str]:
    parents = [os.fspath(p) for p in parents]
    values = {"parents": os.pathsep.join(parents), "output": os.fspath(output),
              "model": os.fspath(model), "workdir": os.fspath(workdir)}
    argv = []
    for arg in spec.command:
        if arg == "{parents}":
            argv.extend(parents)
        else:
            argv.append(arg.format(**values))
    return argv


@dataclass
class TestOutcome:
    passed: bool
    metric: float | None = None
    returncode: int = 0
    stdout: str = field(default="", repr=False)
    stderr: str = field(default="", repr=False)

    __test__ = False  # not a pytest class

    def to_json(self):
        return {"passed": self.passed, "metric": self.metric, "returncode": self.returncode}


def parse_metric(stdout: str):
    lines = [line for line in stdout.splitlines() if line.strip()]
    if not lines:
        return None
    try:
        value = float(lines[-1].strip())
    except ValueError:
        return None
    return value if value == value else None  # NaN is not a metric


def _execute(spec: HookSpec, argv, workdir, extra_env=None):
    env = dict(os.environ)
    env["MODELVC_HOOK_ID"] = spec.hook_id
    env.update(extra_env or {})
    try:
        return subprocess.run(argv, cwd=workdir, env=env, capture_output=True, text=True,
                              timeout=spec.timeout)
    except subprocess.TimeoutExpired:
        raise HookTimeoutError(f"hook {spec.hook_id!r} timed out after {spec.timeout}s") from None
    except OSError as e:
        raise HookFailedError(spec.hook_id, 127, str(e)) from None


def _manifest_path(p):
    p = os.fspath(p)
    return os.path.join(p, "manifest.json") if os.path.isdir(p) else p


def _import(spec, path) -> ModelGraph:
    try:
        return read_model_dir(path)
    except (ParseError, MissingObjectError, IntegrityError, ValueError) as e:
        raise IntegrityError(f"hook {spec.hook_id!r} produced an invalid model at {path}: {e}") from None


def run_creation(hook: HookSpec, parent_manifests, output_path) -> ModelGraph:
    """Run a creation hook and import the model it writes to ``output_path``."""
    os.makedirs(output_path, exist_ok=True)
    workdir = tempfile.mkdtemp(prefix="modelvc-hook-")
    try:
        argv = expand_command(hook, [_manifest_path(p) for p in parent_manifests], output_path,
                              "", workdir)
        proc = _execute(hook, argv, workdir)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    if proc.returncode != 0:
        raise HookFailedError(hook.hook_id, proc.returncode, proc.stderr)
    return _import(hook, output_path)


def run_test(hook: HookSpec, model_manifest) -> TestOutcome:
    workdir = tempfile.mkdtemp(prefix="modelvc-test-")
    try:
        argv = expand_command(hook, (), "", _manifest_path(model_manifest), workdir)
        try:
            proc = _execute(hook, argv, workdir)
        except HookFailedError as e:  # could not even start
            return TestOutcome(False, None, e.returncode, "", e.stderr)
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    return TestOutcome(proc.returncode == 0, parse_metric(proc.stdout), proc.returncode,
                       proc.stdout, proc.stderr)


def merged_creation(group, parents, output_path) -> list[ModelGraph]:
    """Run an MTL group as one process.

    The first hook's command is invoked once; it must write one model
    directory per member under ``<output>/<hook_id>``. Member ids are passed
    in ``MODELVC_GROUP_MEMBERS``. Every param path any member declares as
    shared must carry the same content key in all outputs.
    """
    group = list(group)
    if not group:
        raise HookError("empty MTL group")
    groups = {h.mtl_group for h in group}
    if len(groups) != 1 or None in groups:
        raise HookError("hooks of a merged creation must share one mtl_group")
    if len(group) == 1:
        return [run_creation(group[0], parents, os.path.join(output_path, group[0].hook_id))]
    lead = group[0]
    os.makedirs(output_path, exist_ok=True)
    workdir = tempfile.mkdtemp(prefix="modelvc-group-")
    try:
        argv = expand_command(lead, [_manifest_path(p) for p in parents], output_path, "", workdir)
        proc = _execute(lead, argv, workdir,
                        {"MODELVC_GROUP_MEMBERS": ",".join(h.hook_id for h in group)})
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    if proc.returncode != 0:
        raise HookFailedError(lead.hook_id, proc.returncode, proc.stderr)
    models = [_import(h, os.path.join(output_path, h.hook_id)) for h in group]
    check_sharing(group, models)
    return models


def check_sharing(group, models):
    shared = sorted({p for h in group for p in h.shared})
    params = [dict(m.param_items()) for m in models]
    for path in shared:
        keys = set()
        for h, ps in zip(group, params):
            if path not in ps:
                raise SharingViolationError(f"output of {h.hook_id!r} lacks shared param {path}")
            keys.add(ps[path].content_key())
        if len(keys) != 1:
            raise SharingViolationError(f"shared param {path} differs across the MTL group")
