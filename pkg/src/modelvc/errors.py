"""Exception hierarchy shared by every modelvc module."""


class ModelVCError(Exception):
    """Base class for all errors raised by modelvc."""

    #: short machine-readable code used by the CLI on stderr
    code = "error"


# model-core
class IntegrityError(ModelVCError):
    code = "integrity"


class CyclicModelError(IntegrityError):
    code = "cyclic-model"


class ParseError(ModelVCError):
    code = "parse"


class ShapeError(ModelVCError, ValueError):
    code = "shape"


# store
class MissingObjectError(ModelVCError, KeyError):
    code = "missing-object"

    def __str__(self):
        return Exception.__str__(self)


class CorruptObjectError(IntegrityError):
    code = "corrupt-object"


class StoreWriteError(ModelVCError, OSError):
    code = "store-write"


class LockError(ModelVCError):
    code = "lock"


# delta codec
class CodecError(ModelVCError):
    code = "codec"


class ChainDepthError(ModelVCError):
    code = "chain-depth"


# lineage
class NodeNameError(ModelVCError, LookupError):
    """Unknown or duplicate node name, or a missing edge."""

    code = "name"


class CycleError(ModelVCError):
    code = "cycle"


class TypeMismatchError(ModelVCError):
    code = "type-mismatch"


class SelectorError(ModelVCError, ValueError):
    code = "selector"


class FormatVersionError(ModelVCError):
    code = "format-version"


class RepositoryNotFound(ModelVCError):
    code = "no-repository"


# hooks
class HookError(ModelVCError):
    code = "hook"


class HookFailedError(HookError):
    code = "hook-failed"

    def __init__(self, hook_id, returncode, stderr=""):
        self.hook_id = hook_id
        self.returncode = returncode
        self.stderr = stderr
        tail = stderr.strip().splitlines()[-1:] if stderr else []
        msg = f"hook {hook_id!r} exited with status {returncode}"
        if tail:
            msg += f": {tail[0]}"
        super().__init__(msg)


class HookTimeoutError(HookError):
    code = "hook-timeout"


class SharingViolationError(HookError):
    code = "sharing-violation"


# ops
class PatternError(ModelVCError, ValueError):
    code = "pattern"


class NotFoundError(ModelVCError, LookupError):
    code = "not-found"


class AncestryError(ModelVCError):
    code = "ancestry"


class RepositoryExistsError(ModelVCError):
    code = "repository-exists"
