import os

import numpy as np
import pytest

from modelvc import (CodecConfig, HookSpec, IntegrityError, build_model, module_diff, write_model_dir)
from modelvc.errors import HookError, HookFailedError, HookTimeoutError, SharingViolationError
from modelvc.hooks import expand_command, merged_creation, parse_metric, run_creation, run_test

from conftest import mlp, perturb, stub


@pytest.fixture
def parent_dir(tmp_path):
    m = mlp(seed=1)
    return write_model_dir(tmp_path / "parent", m), m


def test_spec_validation():
    with pytest.raises(HookError):
        HookSpec("h", "creation", ("x", "{nope}"))
    with pytest.raises(HookError):
        HookSpec("h", "weird", ("x",))
    with pytest.raises(HookError):
        HookSpec("h", "test", ("x",), mtl_group="g")
    with pytest.raises(HookError):
        HookSpec("h", "test", ())
    spec = HookSpec("h", "creation", ("x", "{output}"), 5, "g", ("b", "a"))
    assert HookSpec.from_json(spec.to_json()) == spec


def test_expand_command():
    spec = HookSpec("h", "creation", ("run", "{parents}", "--out={output}", "--all={parents}"))
    argv = expand_command(spec, ["p1", "p2"], "o")
    assert argv == ["run", "p1", "p2", "--out=o", "--all=p1" + os.pathsep + "p2"]


def test_identity_hook(parent_dir, tmp_path):
    manifest, m = parent_dir
    child = run_creation(stub("cp", "creation", "copy", "{output}", "{parents}"), [manifest], tmp_path / "out")
    assert module_diff(m, child).is_empty()


def test_scale_by_two(tmp_path):
    m = build_model("one", "lin", [("fc", "linear", {}, {"w": np.array([[1.0, -2.5], [0.25, 3.0]], np.float32)})], [])
    manifest = write_model_dir(tmp_path / "p", m)
    child = run_creation(stub("x2", "creation", "scale", "2", "{output}", "{parents}"), [manifest], tmp_path / "o")
    assert dict(child.param_items())["fc/w"].tensor.to_array().tolist() == [[2.0, -5.0], [0.5, 6.0]]


def test_failing_hook(parent_dir, tmp_path):
    manifest, _ = parent_dir
    with pytest.raises(HookFailedError) as e:
        run_creation(stub("bad", "creation", "fail"), [manifest], tmp_path / "o")
    assert e.value.returncode == 1 and "refuses" in e.value.stderr


def test_invalid_output(parent_dir, tmp_path):
    manifest, _ = parent_dir
    with pytest.raises(IntegrityError):
        run_creation(stub("junk", "creation", "garbage", "{output}"), [manifest], tmp_path / "o")


def test_parent_order_preserved(tmp_path):
    a, b = mlp(seed=1), mlp(seed=2)
    pa, pb = write_model_dir(tmp_path / "a", a), write_model_dir(tmp_path / "b", b)
    child = run_creation(stub("cp", "creation", "copy", "{output}", "{parents}"), [pb, pa], tmp_path / "o")
    assert module_diff(b, child).is_empty() and not module_diff(a, child, "contextual").is_empty()


def test_test_hook_contract(parent_dir):
    manifest, _ = parent_dir
    out = run_test(stub("acc", "test", "metric", "98.5", "{model}"), manifest)
    assert out.passed and out.metric == 98.5
    out = run_test(stub("bad", "test", "fail"), manifest)
    assert not out.passed and out.metric is None and out.returncode == 1


def test_parse_metric():
    assert parse_metric("epoch 1\n 0.75 \n\n") == 0.75
    assert parse_metric("0.5\ndone") is None
    assert parse_metric("") is None
    assert parse_metric("nan") is None


def test_timeout(parent_dir):
    manifest, _ = parent_dir
    with pytest.raises(HookTimeoutError):
        run_test(stub("slow", "test", "sleep", "5", timeout=0.3), manifest)


def test_missing_executable(parent_dir):
    manifest, _ = parent_dir
    out = run_test(HookSpec("x", "test", ("/nonexistent/binary", "{model}")), manifest)
    assert not out.passed


def _group(n, divergent="0"):
    shared = ("l0/b", "l0/w")
    return [stub(f"g{i}", "creation", "group", "l1", divergent, "{output}", "{parents}",
                 mtl_group="mtl", shared=shared) for i in range(n)]


def test_mtl_group_shares_non_head_params(parent_dir, tmp_path):
    manifest, _ = parent_dir
    out = merged_creation(_group(2), [manifest], tmp_path / "o")
    keys = [dict((p, r.content_key()) for p, r in m.param_items()) for m in out]
    assert keys[0]["l0/w"] == keys[1]["l0/w"] and keys[0]["l0/b"] == keys[1]["l0/b"]
    assert keys[0]["l1/w"] != keys[1]["l1/w"]


def test_mtl_group_of_one_is_plain_creation(parent_dir, tmp_path):
    manifest, m = parent_dir
    group = [stub("solo", "creation", "copy", "{output}", "{parents}", mtl_group="mtl")]
    (out,) = merged_creation(group, [manifest], tmp_path / "o")
    assert module_diff(m, out).is_empty()


def test_mtl_sharing_violation(parent_dir, tmp_path):
    manifest, _ = parent_dir
    with pytest.raises(SharingViolationError):
        merged_creation(_group(3, divergent="1"), [manifest], tmp_path / "o")


def test_mtl_group_must_agree(parent_dir, tmp_path):
    manifest, _ = parent_dir
    with pytest.raises(HookError):
        merged_creation([stub("a", "creation", "copy", mtl_group="x"),
                         stub("b", "creation", "copy", mtl_group="y")], [manifest], tmp_path / "o")


def test_metric_delta_flow(repo, tmp_path):
    """Parent model scores 90.0, its lossy reconstruction 89.9."""
    import stub_hooks
    m1 = mlp(seed=3, widths=(16, 16))
    m2 = perturb(m1, 7, sigma=1e-3)
    repo.add_node(m1, "m1")
    repo.add_node(m2, "m2", parents=["m1"])
    digest = stub_hooks.param_digest(repo.materialize("m2"))
    repo.register_test_function(stub("acc", "test", "metric_by_key", digest, "90.0", "89.9", "{model}"),
                                "acc", model_type="mlp")
    assert not repo.compress("m2", cfg=CodecConfig(t_thr=0.05)).accepted
    r = repo.compress("m2", cfg=CodecConfig(t_thr=0.5))
    assert r.accepted and r.metric_drop["acc"] == pytest.approx(0.1)
    assert {ref.kind for _, ref in repo.load_model("m2").param_items()} == {"delta"}


def test_hook_env_names_hook(parent_dir, tmp_path):
    manifest, _ = parent_dir
    log = tmp_path / "log"
    run_creation(stub("named", "creation", "logged", str(log), "{output}", "{parents}"), [manifest], tmp_path / "o")
    assert log.read_text() == "named\n"
