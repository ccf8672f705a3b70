"""Framework-neutral model representation.

A model is a DAG of abstract layers (``op_type`` plus an attribute map) whose
parameters are referenced through :class:`ParamRef`. Tensors are raw
little-endian payloads; the manifest is canonical JSON so that equal models
always serialize to identical bytes.
"""

from __future__ import annotations

import heapq
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import _fsutil
from .errors import CyclicModelError, IntegrityError, MissingObjectError, ParseError

MANIFEST_FORMAT = "modelvc-manifest"
MANIFEST_VERSION = 1

BLOB_MAGIC = b"MGTN"
BLOB_VERSION = 1

# dtype name -> (code byte, numpy little-endian dtype)
DTYPES = {
    "f32": (1, np.dtype("<f4")),
    "f16": (2, np.dtype("<f2")),
    "i64": (3, np.dtype("<i8")),
    "i32": (4, np.dtype("<i4")),
    "i8": (5, np.dtype("i1")),
    "u8": (6, np.dtype("u1")),
}
DTYPE_BY_CODE = {code: name for name, (code, _) in DTYPES.items()}
FLOAT_DTYPES = frozenset({"f32", "f16"})


def dtype_name(np_dtype) -> str:
    d = np.dtype(np_dtype)
    for name, (_, ref) in DTYPES.items():
        if d.kind == ref.kind and d.itemsize == ref.itemsize:
            return name
    raise TypeError(f"unsupported dtype {d}")


def itemsize(dtype: str) -> int:
    return DTYPES[dtype][1].itemsize


@dataclass(frozen=True)
class Tensor:
    """dtype + shape + raw little-endian row-major payload."""

    dtype: str
    shape: tuple[int, ...]
    data: bytes = field(repr=False)

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        shape = tuple(int(d) for d in self.shape)
        if any(d < 0 for d in shape):
            raise ValueError(f"negative dimension in shape {shape}")
        object.__setattr__(self, "shape", shape)
        expected = math.prod(shape) * itemsize(self.dtype)
        if len(self.data) != expected:
            raise ValueError(
                f"payload is {len(self.data)} bytes, shape {shape} of {self.dtype} needs {expected}")

    @classmethod
    def from_array(cls, array) -> "Tensor":
        array = np.asarray(array)
        name = dtype_name(array.dtype)
        le = np.ascontiguousarray(array, dtype=DTYPES[name][1])
        return cls(name, array.shape, le.tobytes())

    def to_array(self) -> np.ndarray:
        """Read-only view of the payload."""
        return np.frombuffer(self.data, dtype=DTYPES[self.dtype][1]).reshape(self.shape)

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def canonical_encoding(self) -> bytes:
        """dtype code || rank || dims (u64 LE) || payload: the hashed form."""
        code = DTYPES[self.dtype][0]
        head = struct.pack("<BB", code, len(self.shape))
        dims = struct.pack(f"<{len(self.shape)}Q", *self.shape)
        return head + dims + self.data

    def content_key(self) -> str:
        return hashlib.sha256(self.canonical_encoding()).hexdigest()


def encode_blob(t: Tensor) -> bytes:
    code = DTYPES[t.dtype][0]
    return (BLOB_MAGIC + struct.pack("<HBB", BLOB_VERSION, code, len(t.shape))
            + struct.pack(f"<{len(t.shape)}Q", *t.shape) + t.data)


def decode_blob(blob: bytes) -> Tensor:
    if len(blob) < 8 or blob[:4] != BLOB_MAGIC:
        raise ParseError("not an MGTN blob")
    version, code, rank = struct.unpack_from("<HBB", blob, 4)
    if version != BLOB_VERSION:
        raise ParseError(f"unsupported MGTN version {version}")
    if code not in DTYPE_BY_CODE:
        raise ParseError(f"unknown dtype code {code}")
    end = 8 + 8 * rank
    if len(blob) < end:
        raise ParseError("truncated MGTN header")
    shape = struct.unpack_from(f"<{rank}Q", blob, 8)
    try:
        return Tensor(DTYPE_BY_CODE[code], shape, bytes(blob[end:]))
    except ValueError as e:
        raise ParseError(str(e)) from None


PARAM_KINDS = ("inline", "stored", "delta")


@dataclass(frozen=True)
class ParamRef:
    """Pointer to a parameter tensor.

    ``inline`` refs carry the tensor itself (models that have not been stored
    yet), ``stored`` refs name a content key in the object store and ``delta``
    refs name a delta record.
    """

    kind: str
    shape: tuple[int, ...]
    dtype: str
    key: str | None = None
    tensor: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"unknown param kind {self.kind!r}")
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if self.kind == "inline":
            if self.tensor is None:
                raise ValueError("inline ParamRef needs a tensor")
        elif not self.key:
            raise ValueError(f"{self.kind} ParamRef needs a key")

    @classmethod
    def inline(cls, tensor: Tensor) -> "ParamRef":
        if not isinstance(tensor, Tensor):
            tensor = Tensor.from_array(tensor)
        return cls("inline", tensor.shape, tensor.dtype, tensor=tensor)

    @classmethod
    def stored(cls, key, shape, dtype) -> "ParamRef":
        return cls("stored", shape, dtype, key=key)

    @property
    def nbytes(self) -> int:
        return math.prod(self.shape) * itemsize(self.dtype)

    def content_key(self) -> str | None:
        """Content key when it is known without any store lookups."""
        if self.kind == "inline":
            return self.tensor.content_key()
        if self.kind == "stored":
            return self.key
        return None

    def to_json(self) -> dict:
        if self.kind == "inline":
            raise IntegrityError("inline params must be stored before serialization")
        return {"kind": self.kind, "key": self.key, "shape": list(self.shape), "dtype": self.dtype}


@dataclass(frozen=True)
class LayerNode:
    layer_id: str
    op_type: str
    attributes: Mapping = field(default_factory=dict)
    params: Mapping[str, ParamRef] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "attributes", dict(sorted(self.attributes.items())))
        object.__setattr__(self, "params", dict(self.params))


@dataclass(frozen=True)
class ModelGraph:
    model_name: str
    model_type: str
    layers: tuple[LayerNode, ...] = ()
    edges: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "edges", tuple((str(a), str(b)) for a, b in self.edges))

    def layer_map(self) -> dict[str, LayerNode]:
        return {layer.layer_id: layer for layer in self.layers}

    def validate(self):
        ids = [layer.layer_id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise IntegrityError(f"duplicate layer ids in model {self.model_name!r}")
        known = set(ids)
        seen = set()
        for a, b in self.edges:
            if a not in known or b not in known:
                raise IntegrityError(f"edge ({a}, {b}) references an unknown layer")
            if (a, b) in seen:
                raise IntegrityError(f"duplicate edge ({a}, {b})")
            seen.add((a, b))
        topological_order(self)

    def param_items(self) -> Iterator[tuple[str, ParamRef]]:
        """(``layer_id/param_name``, ref) pairs in topological layer order."""
        layers = self.layer_map()
        for layer_id in topological_order(self):
            for pname, ref in layers[layer_id].params.items():
                yield f"{layer_id}/{pname}", ref

    def replace_params(self, new_refs: Mapping[str, ParamRef]) -> "ModelGraph":
        """Copy of the model with the refs at the given param paths swapped."""
        layers = []
        for layer in self.layers:
            params = {pname: new_refs.get(f"{layer.layer_id}/{pname}", ref)
                      for pname, ref in layer.params.items()}
            layers.append(replace(layer, params=params))
        return replace(self, layers=tuple(layers))

    def canonical(self) -> "ModelGraph":
        """Layers in topological order, edges sorted the same way."""
        order = topological_order(self)
        pos = {lid: i for i, lid in enumerate(order)}
        layers = self.layer_map()
        edges = sorted(self.edges, key=lambda e: (pos[e[0]], pos[e[1]]))
        return replace(self, layers=tuple(layers[lid] for lid in order), edges=tuple(edges))


def topological_order(m: ModelGraph) -> list[str]:
    """Kahn's algorithm; ties go to the lexicographically smallest layer_id."""
    ids = [layer.layer_id for layer in m.layers]
    indeg = {lid: 0 for lid in ids}
    children: dict[str, list[str]] = {lid: [] for lid in ids}
    for a, b in m.edges:
        if a not in indeg or b not in indeg:
            raise IntegrityError(f"edge ({a}, {b}) references an unknown layer")
        children[a].append(b)
        indeg[b] += 1
    heap = [lid for lid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        lid = heapq.heappop(heap)
        order.append(lid)
        for child in children[lid]:
            indeg[child] -= 1
            if indeg[child] == 0:
                heapq.heappush(heap, child)
    if len(order) != len(indeg):
        stuck = sorted(lid for lid, d in indeg.items() if d > 0)
        raise CyclicModelError(f"model {m.model_name!r} has a cycle through {stuck[:5]}")
    return order


def _canonical_json(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=True, allow_nan=False)
            + "\n").encode("ascii")


def serialize_model(m: ModelGraph) -> tuple[bytes, dict[str, Tensor]]:
    """Canonical manifest bytes plus the tensor blobs of inline params.

    Inline params are written as ``stored`` refs keyed by their content key;
    the returned dict maps those keys to the tensors that must be persisted.
    """
    m.validate()
    c = m.canonical()
    blobs: dict[str, Tensor] = {}
    layers = []
    for layer in c.layers:
        params = []
        for pname, ref in layer.params.items():
            if ref.kind == "inline":
                key = ref.tensor.content_key()
                blobs[key] = ref.tensor
                ref = ParamRef.stored(key, ref.shape, ref.dtype)
            params.append({"name": pname, **ref.to_json()})
        layers.append({"id": layer.layer_id, "op": layer.op_type,
                       "attributes": layer.attributes, "params": params})
    doc = {
        "format": MANIFEST_FORMAT,
        "format_version": MANIFEST_VERSION,
        "model_name": c.model_name,
        "model_type": c.model_type,
        "layers": layers,
        "edges": [list(e) for e in c.edges],
    }
    try:
        return _canonical_json(doc), blobs
    except (TypeError, ValueError) as e:
        raise IntegrityError(f"attributes are not serializable: {e}") from None


def _resolvable(resolver, ref: ParamRef) -> bool:
    if hasattr(resolver, "has_ref"):
        return resolver.has_ref(ref)
    return resolver(ref)


def _expect(cond, msg):
    if not cond:
        raise ParseError(msg)


def deserialize_model(manifest: bytes, resolver=None) -> ModelGraph:
    """Parse a manifest; when ``resolver`` is given every ref must resolve.

    ``resolver`` is either an object with ``has_ref(ref)`` (a repository or
    object store) or a predicate over refs.
    """
    try:
        doc = json.loads(manifest)
    except (ValueError, UnicodeDecodeError) as e:
        raise ParseError(f"manifest is not valid JSON: {e}") from None
    _expect(isinstance(doc, dict), "manifest must be an object")
    _expect(doc.get("format") == MANIFEST_FORMAT, "not a model manifest")
    _expect(doc.get("format_version") == MANIFEST_VERSION,
            f"unsupported manifest version {doc.get('format_version')!r}")
    try:
        layers = []
        for ld in doc["layers"]:
            params = {}
            for pd in ld["params"]:
                _expect(pd["kind"] in ("stored", "delta"), f"bad param kind {pd['kind']!r}")
                _expect(pd["dtype"] in DTYPES, f"bad dtype {pd['dtype']!r}")
                _expect(isinstance(pd["key"], str) and len(pd["key"]) == 64, "bad param key")
                _expect(pd["name"] not in params, f"duplicate param {pd['name']!r}")
                params[pd["name"]] = ParamRef(pd["kind"], tuple(pd["shape"]), pd["dtype"], pd["key"])
            _expect(isinstance(ld["attributes"], dict), "attributes must be an object")
            layers.append(LayerNode(str(ld["id"]), str(ld["op"]), ld["attributes"], params))
        edges = [(a, b) for a, b in doc["edges"]]
        m = ModelGraph(str(doc["model_name"]), str(doc["model_type"]), tuple(layers), tuple(edges))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ParseError):
            raise
        raise ParseError(f"malformed manifest: {e!r}") from None
    try:
        m.validate()
    except IntegrityError as e:
        raise ParseError(str(e)) from None
    if resolver is not None:
        for path, ref in m.param_items():
            if not _resolvable(resolver, ref):
                raise MissingObjectError(f"param {path} -> {ref.kind} {ref.key} does not resolve")
    return m


def build_model(name: str, model_type: str, layers: Iterable, edges: Iterable = ()) -> ModelGraph:
    """Convenience constructor from plain Python values.

    ``layers`` holds ``(layer_id, op_type, attributes, params)`` tuples where
    ``params`` maps names to numpy arrays (or Tensors, or ParamRefs).
    """
    built = []
    for layer_id, op_type, attributes, params in layers:
        refs = {}
        for pname, value in (params or {}).items():
            refs[pname] = value if isinstance(value, ParamRef) else ParamRef.inline(value)
        built.append(LayerNode(layer_id, op_type, attributes or {}, refs))
    m = ModelGraph(name, model_type, tuple(built), tuple(edges))
    m.validate()
    return m


# Model directories are the exchange format with hooks and the CLI:
#   <dir>/manifest.json   canonical manifest (stored refs only)
#   <dir>/blobs/<key>     MGTN blob per tensor

def write_model_dir(path, m: ModelGraph, resolve=None):
    """Export ``m`` with every tensor materialized as a blob.

    ``resolve(ref) -> Tensor`` is required for non-inline refs.
    """
    os.makedirs(os.path.join(path, "blobs"), exist_ok=True)
    inline = {}
    for p, ref in m.param_items():
        if ref.kind != "inline":
            if resolve is None:
                raise IntegrityError(f"no resolver for {ref.kind} param {p}")
            ref = ParamRef.inline(resolve(ref))
        inline[p] = ref
    manifest, blobs = serialize_model(m.replace_params(inline))
    for key, t in blobs.items():
        _fsutil.write_once(os.path.join(path, "blobs", key), encode_blob(t))
    _fsutil.atomic_write(os.path.join(path, "manifest.json"), manifest)
    return os.path.join(path, "manifest.json")


def read_model_dir(path) -> ModelGraph:
    """Load a model directory (or a manifest.json path) with inline params."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    blob_dir = os.path.join(os.path.dirname(path), "blobs")
    try:
        with open(path, "rb") as f:
            m = deserialize_model(f.read())
    except FileNotFoundError:
        raise IntegrityError(f"no manifest at {path}") from None
    refs = {}
    for p, ref in m.param_items():
        if ref.kind != "stored":
            raise IntegrityError(f"exported model param {p} is not self-contained")
        try:
            with open(os.path.join(blob_dir, ref.key), "rb") as f:
                t = decode_blob(f.read())
        except FileNotFoundError:
            raise MissingObjectError(f"blob {ref.key} for {p} missing in {blob_dir}") from None
        except ParseError as e:
            raise IntegrityError(f"blob for {p}: {e}") from None
        if t.content_key() != ref.key or t.shape != ref.shape or t.dtype != ref.dtype:
            raise IntegrityError(f"blob for {p} does not match its manifest entry")
        refs[p] = ParamRef.inline(t)
    return m.replace_params(refs)
