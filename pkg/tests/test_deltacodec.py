import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from modelvc import (ChainDepthError, CodecConfig, CodecError, MissingObjectError, ShapeError, Tensor,
                     build_model, delta_compression, dequantize_delta, lcs_mapping, lossless_compress,
                     lossless_decompress, quantize_delta)
from modelvc.deltacodec import (BACKENDS, DeltaRecord, DeltaStore, decode_param, encode_param, narrow,
                                resolve_param)
from modelvc.model import ParamRef
from modelvc.store import ObjectStore

from conftest import mlp, perturb
from oracles import brute_lcs_pairs

EPS = 1e-4
BOUND = math.log1p(EPS)


def test_quantize_scalar_examples():
    # 3e-4 / (2 ln 1.0001) + 0.5 = 2.00008 -> 2 ; -1.50008 + 0.5 -> -2
    step = 2 * math.log(1.0001)
    assert math.floor(3e-4 / step + 0.5) == 2 and math.floor(-3e-4 / step + 0.5) == -2
    q = quantize_delta(np.array([3e-4, -3e-4, 0.0]), np.zeros(3), EPS)
    assert q.tolist() == [2, -2, 0]
    assert q.dtype == np.int64


def test_zero_delta_and_identity():
    p = np.random.default_rng(0).standard_normal((5, 5)).astype(np.float32)
    assert not quantize_delta(p, p, EPS).any()
    assert np.array_equal(dequantize_delta(np.zeros((5, 5), np.int64), p, EPS), p.astype(np.float64))
    rec, out = encode_param(Tensor.from_array(p), Tensor.from_array(p), ParamRef.inline(p), EPS, "rle")
    assert out.data == Tensor.from_array(p).data and rec.n_patches == 0


def test_shape_errors():
    with pytest.raises(ShapeError):
        quantize_delta(np.zeros(3), np.zeros(4), EPS)
    with pytest.raises(ShapeError):
        dequantize_delta(np.zeros(3, np.int64), np.zeros(4), EPS)
    with pytest.raises(TypeError):
        quantize_delta(np.zeros(3, np.int32), np.zeros(3, np.int32), EPS)
    with pytest.raises(CodecError):
        quantize_delta(np.array([np.inf]), np.zeros(1), EPS)


def test_config_validation():
    with pytest.raises(ValueError):
        CodecConfig(epsilon=0)
    with pytest.raises(ValueError):
        CodecConfig(backend="zip")
    assert CodecConfig().step == pytest.approx(1.99990e-4, rel=1e-5)


def test_all_zero_rle_payload_is_tiny():
    payload = lossless_compress(np.zeros(10**6, np.int64), "rle")
    assert len(payload) < 100
    assert np.array_equal(lossless_decompress(payload, "rle"), np.zeros(10**6, np.int64))


@pytest.mark.parametrize("backend", BACKENDS)
def test_empty_roundtrip(backend):
    assert lossless_compress(np.zeros(0, np.int64), backend) == b""
    assert lossless_decompress(b"", backend).size == 0


@pytest.mark.parametrize("backend", BACKENDS)
def test_corrupt_payload(backend):
    payload = lossless_compress(np.arange(100), backend)
    with pytest.raises(CodecError):
        lossless_decompress(payload[:-3] + b"\xff\xff\xff", backend)
    with pytest.raises(CodecError):
        lossless_decompress(b"\x09\x01", backend)


def test_narrow_width():
    assert narrow(np.array([0, 127, -128])).dtype == np.int8
    assert narrow(np.array([128])).dtype == np.int16
    assert narrow(np.array([-(2**31)])).dtype == np.int32
    assert narrow(np.array([2**40])).dtype == np.int64


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.int64, st.integers(0, 300),
                  elements=st.one_of(st.just(0), st.integers(-3, 3), st.integers(-(2**62), 2**62))),
       st.sampled_from(BACKENDS))
def test_property_lossless_roundtrip(q, backend):
    assert np.array_equal(lossless_decompress(lossless_compress(q, backend), backend), q)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31), st.sampled_from(["f32", "f16"]),
       st.floats(1e-7, 1.0), st.floats(1e-6, 1e-1))
def test_property_error_bound(n, seed, dtype, sigma, eps):
    rng = np.random.default_rng(seed)
    np_dtype = np.float32 if dtype == "f32" else np.float16
    p1 = rng.standard_normal(n).astype(np_dtype)
    p2 = (p1 + rng.standard_normal(n) * sigma).astype(np_dtype)
    rec, out = encode_param(Tensor.from_array(p1), Tensor.from_array(p2), ParamRef.inline(p1), eps, "rle")
    err = np.abs(out.to_array().astype(np.float64) - p2.astype(np.float64))
    assert (err <= math.log1p(eps)).all()
    again = decode_param(DeltaRecord.decode(rec.encode()), Tensor.from_array(p1))
    assert again.data == out.data


def test_record_header_roundtrip():
    rec = DeltaRecord("stored", "a" * 64, 1e-4, "rle", (2, 3), "f32", b"\x00\x06\x00\x0c", 3)
    assert DeltaRecord.decode(rec.encode()) == rec
    with pytest.raises(CodecError):
        DeltaRecord.decode(b"NOPE" + rec.encode()[4:])


def _sequences(params):
    return [(ref.shape, ref.dtype) for _, ref in params]


def test_lcs_identical_architectures_pair_layers():
    a, b = mlp(seed=1, widths=(4, 5, 6)), mlp(seed=2, widths=(4, 5, 6))
    assert lcs_mapping(a, b) == [(p, p) for p, _ in a.param_items()]


@settings(max_examples=150, deadline=None)
@given(st.lists(st.sampled_from([(2,), (3,), (2, 2)]), max_size=6),
       st.lists(st.sampled_from([(2,), (3,), (2, 2)]), max_size=6))
def test_property_lcs_is_longest(shapes1, shapes2):
    def model(shapes, name):
        return build_model(name, "t", [(f"l{i}", "op", {}, {"w": np.zeros(s, np.float32)})
                                       for i, s in enumerate(shapes)],
                           [(f"l{i}", f"l{i + 1}") for i in range(len(shapes) - 1)])
    m1, m2 = model(shapes1, "a"), model(shapes2, "b")
    pairs = lcs_mapping(m1, m2)
    p1 = dict(m1.param_items())
    p2 = dict(m2.param_items())
    idx1 = [list(p1).index(a) for a, _ in pairs]
    idx2 = [list(p2).index(b) for _, b in pairs]
    assert idx1 == sorted(idx1) and idx2 == sorted(idx2)
    assert all(p1[a].shape == p2[b].shape for a, b in pairs)
    assert len(pairs) == brute_lcs_pairs(tuple(map(tuple, shapes1)), tuple(map(tuple, shapes2)))


def test_compress_identical_models():
    m = mlp(seed=3, widths=(32, 32, 32))
    r = delta_compression(m, m)
    assert r.accepted and r.storage_saving > 5
    for rec in r.records.values():
        assert not lossless_decompress(rec.payload, rec.backend).any()


def test_compress_tiny_noise_decodes_to_parent():
    m1 = mlp(seed=4, widths=(16, 16, 16))
    m2 = perturb(m1, 9, sigma=0)
    rng = np.random.default_rng(0)
    m2 = m2.replace_params({p: ParamRef.inline((r.tensor.to_array()
                                                + rng.uniform(-1e-6, 1e-6, r.shape)).astype(np.float32))
                            for p, r in m2.param_items()})
    r = delta_compression(m2, m1)
    assert r.accepted
    parent = dict(m1.param_items())
    for path, ref in r.restored.param_items():
        restored = ref.tensor.to_array()
        assert np.array_equal(restored, parent[path].tensor.to_array())
        original = dict(m2.param_items())[path].tensor.to_array()
        assert np.abs(restored.astype(np.float64) - original).max() <= 1e-6 + 1e-7


def test_compress_resampled_is_rejected():
    m1 = mlp(seed=5, widths=(32, 32, 32))
    rng = np.random.default_rng(1)
    m2 = m1.replace_params({p: ParamRef.inline(rng.uniform(-1e6, 1e6, r.shape).astype(np.float32))
                            for p, r in m1.param_items()})
    r = delta_compression(m2, m1)
    assert not r.accepted and r.storage_saving < 1
    assert r.model is m2


def test_metric_threshold():
    m1 = mlp(seed=6, widths=(16, 16))
    m2 = perturb(m1, 2, sigma=1e-3)

    def tests(model):
        exact = model is m2
        return {"acc": (True, 90.0 if exact else 89.9)}
    assert delta_compression(m2, m1, CodecConfig(t_thr=0.5), tests).accepted
    r = delta_compression(m2, m1, CodecConfig(t_thr=0.05), tests)
    assert not r.accepted and r.metric_drop["acc"] == pytest.approx(0.1)


def test_missing_parent_param():
    m1 = mlp(seed=7).replace_params({"l0/w": ParamRef.stored("0" * 64, (8, 8), "f32")})
    with pytest.raises(MissingObjectError):
        delta_compression(mlp(seed=8), m1)


def _chain_stores(tmp_path, depth, cfg):
    objects = ObjectStore(tmp_path / "o")
    deltas = DeltaStore(tmp_path / "d")
    rng = np.random.default_rng(3)
    tensors = [rng.standard_normal(50).astype(np.float32)]
    for _ in range(depth):
        tensors.append((tensors[-1] + rng.standard_normal(50) * 1e-3).astype(np.float32))
    ref = ParamRef.stored(objects.put(Tensor.from_array(tensors[0])), (50,), "f32")
    manual = Tensor.from_array(tensors[0])
    for k in range(1, depth + 1):
        rec, manual = encode_param(manual, Tensor.from_array(tensors[k]), ref, cfg.epsilon, cfg.backend, k)
        ref = ParamRef("delta", (50,), "f32", deltas.put(rec))
    return objects, deltas, ref, manual, tensors


def test_resolve_chain_matches_manual_composition(tmp_path):
    cfg = CodecConfig()
    objects, deltas, ref, manual, tensors = _chain_stores(tmp_path, 3, cfg)
    # manual composition of three dequantize steps
    cur = tensors[0]
    for k in (1, 2, 3):
        q = quantize_delta(cur, tensors[k], cfg.epsilon)
        cur = dequantize_delta(q, cur, cfg.epsilon).astype(np.float32)
        bad = np.abs(cur.astype(np.float64) - tensors[k]) > BOUND
        cur[bad] = tensors[k][bad]
    got = resolve_param(ref, objects, deltas, cfg)
    assert np.array_equal(got.to_array(), cur)
    assert got == manual
    assert resolve_param(ref, objects, DeltaStore(tmp_path / "d"), cfg) == got   # bit-stable


def test_resolve_stored_and_depth_limit(tmp_path):
    objects, deltas, ref, _, tensors = _chain_stores(tmp_path, 4, CodecConfig())
    root = ParamRef.stored(Tensor.from_array(tensors[0]).content_key(), (50,), "f32")
    assert resolve_param(root, objects, deltas).data == tensors[0].tobytes()
    with pytest.raises(ChainDepthError):
        resolve_param(ref, objects, deltas, CodecConfig(max_chain_depth=3))
    with pytest.raises(MissingObjectError):
        resolve_param(ParamRef("delta", (50,), "f32", "1" * 64), objects, deltas)


def test_chain_depth_cap_skips_params():
    m1 = mlp(seed=9, widths=(8, 8))
    m2 = perturb(m1, 1)
    r = delta_compression(m2, m1, CodecConfig(max_chain_depth=2), depth_of=lambda ref: 2)
    assert not r.accepted and "no parameters" in r.reason


def test_every_pair_of_small_float_grid():
    # exhaustive over a grid of f16 values: the bound holds after rounding
    vals = np.array([-2.0, -1e-3, -1e-4, 0.0, 3e-5, 1e-4, 0.5, 1.0, 65504.0], np.float16)
    p1, p2 = np.array(list(itertools.product(vals, vals))).T
    rec, out = encode_param(Tensor.from_array(p1.astype(np.float16)), Tensor.from_array(p2.astype(np.float16)),
                            ParamRef.inline(p1.astype(np.float16)), EPS, "dict_lossless")
    err = np.abs(out.to_array().astype(np.float64) - p2.astype(np.float16).astype(np.float64))
    assert (err <= BOUND).all()
