"""Delta compression of child parameters against their parent.

Each child parameter mapped onto a parent parameter of the same shape and
dtype is stored as a quantized delta::

    step = 2 * ln(1 + epsilon)
    q    = floor((p_parent - p_child) / step + 0.5)
    p_child' = p_parent - q * step

so every element is reconstructed within ``ln(1 + epsilon)``. The integer
array ``q`` is narrowed to the smallest sufficient width and handed to a
lossless back end (``rle`` or ``dict_lossless``).

Arithmetic runs in float64. Casting the float64 reconstruction back to the
parameter dtype can land one rounding step outside the bound for elements
that sit right at a quantization boundary; those few elements are stored
verbatim as patches so the bound holds for the tensor that is actually
returned.
"""

from __future__ import annotations

import hashlib
import json
import lzma
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _fsutil
from .errors import ChainDepthError, CodecError, CorruptObjectError, MissingObjectError, ShapeError
from .model import DTYPES, FLOAT_DTYPES, ModelGraph, ParamRef, Tensor, itemsize
from .store import RefCounts, fanout_path, iter_fanout

BACKENDS = ("rle", "dict_lossless")

RECORD_MAGIC = b"MGDL"
RECORD_VERSION = 1

_WIDTHS = (np.dtype("i1"), np.dtype("<i2"), np.dtype("<i4"), np.dtype("<i8"))
_Q_LIMIT = 2.0 ** 62
_LZMA_FILTERS = [{"id": lzma.FILTER_LZMA2, "preset": 6}]


@dataclass(frozen=True)
class CodecConfig:
    epsilon: float = 1e-4
    t_thr: float = 0.0
    backend: str = "dict_lossless"
    max_chain_depth: int = 32

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.t_thr >= 0:
            raise ValueError("t_thr must be non-negative")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        if self.max_chain_depth < 1:
            raise ValueError("max_chain_depth must be positive")

    @property
    def step(self):
        return quant_step(self.epsilon)


def quant_step(epsilon: float) -> float:
    return 2.0 * math.log1p(epsilon)


def _as_float64(p, what):
    if isinstance(p, Tensor):
        if p.dtype not in FLOAT_DTYPES:
            raise TypeError(f"{what} must be a float tensor, got {p.dtype}")
        p = p.to_array()
    arr = np.asarray(p)
    if arr.dtype.kind != "f":
        raise TypeError(f"{what} must be floating point, got {arr.dtype}")
    return arr.astype(np.float64)


def quantize_delta(p1, p2, epsilon: float) -> np.ndarray:
    """Integer tensor ``floor((p1 - p2) / (2 ln(1+eps)) + 0.5)``."""
    a, b = _as_float64(p1, "p1"), _as_float64(p2, "p2")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    scaled = np.floor((a - b) / quant_step(epsilon) + 0.5)
    if not np.all(np.isfinite(scaled)) or (scaled.size and np.abs(scaled).max() >= _Q_LIMIT):
        raise CodecError("delta is not finite or too large to quantize")
    return scaled.astype(np.int64)


def dequantize_delta(q, p1, epsilon: float) -> np.ndarray:
    """float64 reconstruction ``p1 - q * 2 ln(1+eps)``."""
    a = _as_float64(p1, "p1")
    q = np.asarray(q)
    if q.shape != a.shape:
        raise ShapeError(f"shape mismatch {q.shape} vs {a.shape}")
    return a - q.astype(np.float64) * quant_step(epsilon)


# -- lossless back ends ------------------------------------------------------

def _varint_encode(values: np.ndarray) -> bytes:
    v = np.asarray(values, dtype=np.uint64)
    if not v.size:
        return b""
    nbytes = np.ones(v.shape, dtype=np.int64)
    for k in range(1, 10):
        nbytes += v >= np.uint64(1 << (7 * k))
    starts = np.concatenate(([0], np.cumsum(nbytes)[:-1]))
    out = np.empty(int(nbytes.sum()), dtype=np.uint8)
    for k in range(10):
        mask = nbytes > k
        if not mask.any():
            break
        chunk = (v[mask] >> np.uint64(7 * k)) & np.uint64(0x7F)
        cont = np.where(nbytes[mask] > k + 1, 0x80, 0).astype(np.uint64)
        out[starts[mask] + k] = (chunk | cont).astype(np.uint8)
    return out.tobytes()


def _varint_decode(data: bytes) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    if not b.size:
        return np.zeros(0, dtype=np.uint64)
    if b[-1] & 0x80:
        raise CodecError("truncated varint stream")
    ends = np.flatnonzero(b < 0x80)
    starts = np.concatenate(([0], ends[:-1] + 1))
    lengths = ends - starts + 1
    if lengths.max() > 10:
        raise CodecError("varint longer than 10 bytes")
    vals = np.zeros(ends.size, dtype=np.uint64)
    for k in range(int(lengths.max())):
        mask = lengths > k
        vals[mask] |= (b[starts[mask] + k] & 0x7F).astype(np.uint64) << np.uint64(7 * k)
    return vals


def _zigzag(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.int64)
    return ((x << 1) ^ (x >> 63)).view(np.uint64)


def _unzigzag(u: np.ndarray) -> np.ndarray:
    u = u.astype(np.uint64)
    return ((u >> np.uint64(1)).view(np.int64)) ^ -((u & np.uint64(1)).view(np.int64))


def narrow(q: np.ndarray) -> np.ndarray:
    """Smallest signed width (8/16/32/64 bit) holding every value of ``q``."""
    q = np.asarray(q, dtype=np.int64)
    if not q.size:
        return q.astype(_WIDTHS[0])
    lo, hi = int(q.min()), int(q.max())
    for w in _WIDTHS:
        info = np.iinfo(w)
        if info.min <= lo and hi <= info.max:
            return q.astype(w)
    return q


def lossless_compress(q, backend: str = "dict_lossless") -> bytes:
    """Losslessly encode an integer array (flattened). Empty in, empty out."""
    if backend not in BACKENDS:
        raise CodecError(f"unknown backend {backend!r}")
    q = np.asarray(q)
    if q.dtype.kind not in "iu":
        raise TypeError("lossless_compress expects an integer array")
    flat = narrow(q.reshape(-1))
    if not flat.size:
        return b""
    head = bytes([_WIDTHS.index(flat.dtype)]) + _varint_encode(np.array([flat.size]))
    if backend == "rle":
        wide = flat.astype(np.int64)
        starts = np.concatenate(([0], np.flatnonzero(wide[1:] != wide[:-1]) + 1))
        runs = np.diff(np.concatenate((starts, [wide.size])))
        pairs = np.empty(2 * starts.size, dtype=np.uint64)
        pairs[0::2] = _zigzag(wide[starts])
        pairs[1::2] = runs.astype(np.uint64)
        return head + _varint_encode(pairs)
    return head + lzma.compress(flat.tobytes(), format=lzma.FORMAT_RAW, filters=_LZMA_FILTERS)


def lossless_decompress(payload: bytes, backend: str = "dict_lossless") -> np.ndarray:
    """Inverse of :func:`lossless_compress`; returns a flat int64 array."""
    if backend not in BACKENDS:
        raise CodecError(f"unknown backend {backend!r}")
    if not payload:
        return np.zeros(0, dtype=np.int64)
    width_code = payload[0]
    if width_code >= len(_WIDTHS):
        raise CodecError(f"bad width code {width_code}")
    width = _WIDTHS[width_code]
    # element count: first varint after the width byte
    end = 1
    while end < len(payload) and payload[end] & 0x80:
        end += 1
    if end >= len(payload) and (end == 1 or payload[end - 1] & 0x80):
        raise CodecError("truncated payload header")
    count = int(_varint_decode(payload[1:end + 1])[0])
    body = payload[end + 1:]
    if backend == "rle":
        pairs = _varint_decode(body)
        if pairs.size % 2:
            raise CodecError("odd number of RLE fields")
        values = _unzigzag(pairs[0::2])
        runs = pairs[1::2].astype(np.int64)
        if runs.size and (runs.min() < 1 or int(runs.sum()) != count):
            raise CodecError("RLE runs do not add up to the element count")
        out = np.repeat(values, runs)
    else:
        try:
            raw = lzma.decompress(body, format=lzma.FORMAT_RAW, filters=_LZMA_FILTERS)
        except lzma.LZMAError as e:
            raise CodecError(f"corrupt dictionary payload: {e}") from None
        if len(raw) != count * width.itemsize:
            raise CodecError("decoded length does not match the element count")
        out = np.frombuffer(raw, dtype=width)
    if out.size != count:
        raise CodecError("element count mismatch")
    if width.itemsize < 8 and out.size:
        info = np.iinfo(width)
        if out.min() < info.min or out.max() > info.max:
            raise CodecError("value outside the recorded width")
    return out.astype(np.int64)


# -- delta records -----------------------------------------------------------

@dataclass(frozen=True)
class DeltaRecord:
    parent_kind: str
    parent_key: str
    epsilon: float
    backend: str
    shape: tuple
    dtype: str
    payload: bytes = field(repr=False)
    depth: int = 1
    patch_index: bytes = field(default=b"", repr=False)
    patch_values: bytes = field(default=b"", repr=False)

    @property
    def parent_ref(self) -> ParamRef:
        return ParamRef(self.parent_kind, self.shape, self.dtype, self.parent_key)

    @property
    def n_patches(self):
        return len(self.patch_index) // 8

    def encode(self) -> bytes:
        header = json.dumps({
            "parent_kind": self.parent_kind, "parent_key": self.parent_key,
            "epsilon": self.epsilon, "backend": self.backend,
            "shape": list(self.shape), "dtype": self.dtype, "depth": self.depth,
            "payload_len": len(self.payload), "patches": self.n_patches,
        }, sort_keys=True, separators=(",", ":")).encode()
        return (RECORD_MAGIC + struct.pack("<HI", RECORD_VERSION, len(header)) + header
                + self.payload + self.patch_index + self.patch_values)

    @classmethod
    def decode(cls, blob: bytes) -> "DeltaRecord":
        if len(blob) < 10 or blob[:4] != RECORD_MAGIC:
            raise CodecError("not a delta record")
        version, hlen = struct.unpack_from("<HI", blob, 4)
        if version != RECORD_VERSION:
            raise CodecError(f"unsupported delta record version {version}")
        try:
            h = json.loads(blob[10:10 + hlen])
            pos = 10 + hlen
            payload = blob[pos:pos + h["payload_len"]]
            pos += h["payload_len"]
            n = h["patches"]
            width = itemsize(h["dtype"])
            index = blob[pos:pos + 8 * n]
            values = blob[pos + 8 * n:pos + 8 * n + width * n]
            if len(payload) != h["payload_len"] or len(values) != width * n \
                    or pos + 8 * n + width * n != len(blob):
                raise CodecError("delta record length mismatch")
            return cls(h["parent_kind"], h["parent_key"], float(h["epsilon"]), h["backend"],
                       tuple(h["shape"]), h["dtype"], payload, int(h["depth"]), index, values)
        except (ValueError, KeyError, TypeError) as e:
            raise CodecError(f"malformed delta record header: {e}") from None

    def key(self) -> str:
        return hashlib.sha256(self.encode()).hexdigest()


def _bound(epsilon):
    return math.log1p(epsilon)


def encode_param(parent: Tensor, child: Tensor, parent_ref: ParamRef, epsilon: float,
                 backend: str, depth: int = 1) -> tuple[DeltaRecord, Tensor]:
    """Delta-encode ``child`` against ``parent``; returns the record and the
    tensor that decoding it will yield."""
    if parent.shape != child.shape or parent.dtype != child.dtype:
        raise ShapeError(f"{parent.dtype}{parent.shape} vs {child.dtype}{child.shape}")
    q = quantize_delta(parent, child, epsilon)
    recon = dequantize_delta(q, parent, epsilon).astype(DTYPES[child.dtype][1])
    err = np.abs(recon.astype(np.float64) - child.to_array().astype(np.float64))
    bad = np.flatnonzero(err.reshape(-1) > _bound(epsilon))
    exact = child.to_array().reshape(-1)[bad]
    record = DeltaRecord(parent_ref.kind, parent_ref.key, float(epsilon), backend,
                         child.shape, child.dtype, lossless_compress(q, backend), depth,
                         bad.astype("<u8").tobytes(), np.ascontiguousarray(exact).tobytes())
    if bad.size:
        flat = recon.reshape(-1)
        flat[bad] = exact
    return record, Tensor.from_array(recon)


def decode_param(record: DeltaRecord, parent: Tensor) -> Tensor:
    if parent.shape != record.shape or parent.dtype != record.dtype:
        raise ShapeError("parent tensor does not match the delta record")
    q = lossless_decompress(record.payload, record.backend)
    if q.size != math.prod(record.shape):
        raise CodecError("delta payload size does not match the record shape")
    np_dtype = DTYPES[record.dtype][1]
    recon = dequantize_delta(q.reshape(record.shape), parent, record.epsilon).astype(np_dtype)
    if record.patch_index:
        index = np.frombuffer(record.patch_index, dtype="<u8").astype(np.intp)
        if index.size and index.max() >= recon.size:
            raise CodecError("patch index out of range")
        recon.reshape(-1)[index] = np.frombuffer(record.patch_values, dtype=np_dtype)
    return Tensor.from_array(recon)


class DeltaStore:
    """Delta records under ``deltas/xx/<62 hex>``, keyed by SHA-256 of the
    encoded record."""

    def __init__(self, root, refcounts=None):
        self.root = os.fspath(root)
        self.refcounts = RefCounts(refcounts or {})
        self._cache: dict = {}

    def path(self, key):
        return fanout_path(self.root, key)

    def __contains__(self, key):
        return isinstance(key, str) and len(key) == 64 and os.path.exists(self.path(key))

    def has_ref(self, ref):
        return ref.kind == "delta" and ref.key in self

    def put(self, record: DeltaRecord) -> str:
        blob = record.encode()
        key = hashlib.sha256(blob).hexdigest()
        _fsutil.write_once(self.path(key), blob)
        self._cache[key] = record
        return key

    def get(self, key) -> DeltaRecord:
        if key in self._cache:
            return self._cache[key]
        try:
            with open(self.path(key), "rb") as f:
                blob = f.read()
        except FileNotFoundError:
            raise MissingObjectError(f"delta record {key} not found") from None
        if hashlib.sha256(blob).hexdigest() != key:
            raise CorruptObjectError(f"delta record {key} does not hash to its key")
        record = DeltaRecord.decode(blob)
        self._cache[key] = record
        return record

    def keys(self):
        return [key for key, _ in iter_fanout(self.root)]

    def remove(self, key):
        self._cache.pop(key, None)
        try:
            os.unlink(self.path(key))
        except FileNotFoundError:
            return False
        self.refcounts.pop(key, None)
        return True

    def stored_bytes(self):
        return _fsutil.tree_size(self.root)


def resolve_param(ref: ParamRef, store, delta_store: DeltaStore, cfg: CodecConfig | None = None,
                  cache: dict | None = None) -> Tensor:
    """Materialize ``ref``, walking delta records up to the first non-delta
    ancestor and decoding back down."""
    max_depth = (cfg or CodecConfig()).max_chain_depth
    if ref.kind == "inline":
        return ref.tensor
    chain = []
    cur = ref
    base = None
    while cur.kind == "delta":
        if cache is not None and cur.key in cache:
            base = cache[cur.key]
            break
        if len(chain) >= max_depth:
            raise ChainDepthError(f"delta chain from {ref.key} exceeds depth {max_depth}")
        record = delta_store.get(cur.key)
        chain.append((cur.key, record))
        cur = record.parent_ref
    if base is None:
        base = cur.tensor if cur.kind == "inline" else store.get(cur.key)
    t = base
    for key, record in reversed(chain):
        t = decode_param(record, t)
        if cache is not None:
            cache[key] = t
    return t


# -- parameter mapping and model-level compression ---------------------------

def lcs_mapping(parent: ModelGraph, child: ModelGraph) -> list[tuple[str, str]]:
    """Longest common subsequence of the two (shape, dtype) parameter
    sequences, as ``(parent_path, child_path)`` pairs."""
    p1 = list(parent.param_items())
    p2 = list(child.param_items())
    s1 = [(ref.shape, ref.dtype) for _, ref in p1]
    s2 = [(ref.shape, ref.dtype) for _, ref in p2]
    n, m = len(s1), len(s2)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        row, below = table[i], table[i + 1]
        for j in range(m - 1, -1, -1):
            if s1[i] == s2[j]:
                row[j] = below[j + 1] + 1
            else:
                row[j] = below[j] if below[j] > row[j + 1] else row[j + 1]
    pairs = []
    i = j = 0
    while i < n and j < m:
        if s1[i] == s2[j] and table[i][j] == table[i + 1][j + 1] + 1:
            pairs.append((p1[i][0], p2[j][0]))
            i += 1
            j += 1
        elif table[i + 1][j] >= table[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


@dataclass
class CompressionResult:
    accepted: bool
    records: dict                      # child param path -> DeltaRecord
    model: ModelGraph                  # m2 if rejected, else m2 with delta refs
    restored: ModelGraph | None = None  # m2' with inline decoded tensors
    storage_saving: float = 0.0
    raw_bytes: int = 0
    compressed_bytes: int = 0
    reason: str = ""
    metric_drop: dict = field(default_factory=dict)


def _default_resolve(ref):
    if ref.kind != "inline":
        raise MissingObjectError(f"no resolver for {ref.kind} param {ref.key}")
    return ref.tensor


def _parent_pointer(ref: ParamRef) -> ParamRef:
    if ref.kind == "inline":
        return ParamRef.stored(ref.tensor.content_key(), ref.shape, ref.dtype)
    return ref


def delta_compression(m2: ModelGraph, m1: ModelGraph, cfg: CodecConfig | None = None, tests=None,
                      resolve=_default_resolve, depth_of=None,
                      exclude_shared: bool = False) -> CompressionResult:
    """Try to store child ``m2`` as deltas against parent ``m1``.

    ``tests(model) -> {name: (passed, metric)}`` is run on the original and
    the reconstructed child when given; a metric drop above ``cfg.t_thr`` (or
    a pass turning into a failure when no metric is reported) rejects.
    ``resolve(ref) -> Tensor`` materializes non-inline refs and
    ``depth_of(ref)`` reports an existing delta chain depth.
    """
    cfg = cfg or CodecConfig()
    depth_of = depth_of or (lambda ref: 0)
    parent_refs = dict(m1.param_items())
    child_refs = dict(m2.param_items())

    mapped = []
    for p_path, c_path in lcs_mapping(m1, m2):
        pref, cref = parent_refs[p_path], child_refs[c_path]
        if cref.dtype not in FLOAT_DTYPES:
            continue
        if exclude_shared and pref.content_key() is not None and pref.content_key() == cref.content_key():
            continue
        depth = depth_of(pref) + 1
        if depth > cfg.max_chain_depth:
            continue
        mapped.append((p_path, c_path, depth))

    def reject(reason, **extra):
        return CompressionResult(False, {}, m2, reason=reason, **extra)

    if not mapped:
        return reject("no parameters to delta-compress")

    records, decoded = {}, {}
    raw = packed = 0
    for p_path, c_path, depth in mapped:
        pref = parent_refs[p_path]
        parent_t, child_t = resolve(pref), resolve(child_refs[c_path])
        try:
            record, recon = encode_param(parent_t, child_t, _parent_pointer(pref),
                                         cfg.epsilon, cfg.backend, depth)
        except CodecError:
            return reject(f"delta for {c_path} cannot be quantized", raw_bytes=child_t.nbytes)
        records[c_path] = record
        decoded[c_path] = recon
        raw += child_t.nbytes
        packed += len(record.encode())

    saving = raw / packed if packed else float("inf")
    if packed >= raw:
        return reject("no storage saving", storage_saving=saving, raw_bytes=raw,
                      compressed_bytes=packed)

    restored = m2.replace_params({p: ParamRef.inline(t) for p, t in decoded.items()})
    drops = {}
    if tests is not None:
        before, after = tests(m2), tests(restored)
        for name, (passed, metric) in before.items():
            passed2, metric2 = after.get(name, (False, None))
            if metric is not None and metric2 is not None:
                drops[name] = metric - metric2
                failed = drops[name] > cfg.t_thr
            else:
                failed = passed and not passed2
            if failed:
                return CompressionResult(False, {}, m2, restored, saving, raw, packed,
                                         f"test {name!r} regressed", drops)

    out = m2.replace_params({p: ParamRef("delta", r.shape, r.dtype, r.key())
                             for p, r in records.items()})
    return CompressionResult(True, records, out, restored, saving, raw, packed, "accepted", drops)
