import json
import os
import tempfile

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from modelvc import (CodecConfig, CycleError, FormatVersionError, IntegrityError, LineageGraph, LockError,
                     NodeNameError, Repository, RepositoryExistsError, RepositoryNotFound, SelectorError,
                     TypeMismatchError)
from modelvc.lineage import VERSIONING, load, save

from conftest import mlp, perturb, stub


def small_graph(names="abcd", model_type="t"):
    g = LineageGraph()
    for n in names:
        g.new_node(n, model_type)
    return g


def test_add_edge_mirrors_adjacency():
    g = small_graph("ab")
    g.add_edge("a", "b")
    assert g.node("b").prov_parents == ["a"] and g.node("a").prov_children == ["b"]
    assert g.add_edge("a", "b") is False
    assert g.audit() == []


def test_cycles_rejected():
    g = small_graph("abc")
    g.add_edge("a", "b")
    with pytest.raises(CycleError):
        g.add_edge("b", "a")
    g.add_edge("b", "c")
    with pytest.raises(CycleError):
        g.add_edge("c", "a")
    with pytest.raises(CycleError):
        g.add_edge("a", "a")


def test_version_edges():
    g = small_graph("ab")
    g.new_node("x", "other")
    with pytest.raises(TypeMismatchError):
        g.add_version_edge("a", "x")
    g.add_version_edge("a", "b")
    assert g.node("b").ver_parent == "a"
    with pytest.raises(CycleError):
        g.add_version_edge("b", "a")
    g2 = small_graph("abc")
    g2.add_version_edge("a", "b")
    with pytest.raises(IntegrityError):
        g2.add_version_edge("c", "b")


def test_missing_nodes_and_duplicates():
    g = small_graph("ab")
    with pytest.raises(NodeNameError):
        g.add_edge("a", "zz")
    with pytest.raises(NodeNameError):
        g.new_node("a", "t")
    with pytest.raises(NodeNameError):
        g.remove_edge("a", "b")
    with pytest.raises(NodeNameError):
        g.remove_edge("a", "b", VERSIONING)


def test_get_next_version():
    g = small_graph(["v1", "v2", "v3"])
    assert g.get_next_version("v1") is None
    g.add_version_edge("v1", "v2")
    g.add_version_edge("v2", "v3")
    assert g.get_next_version("v1") == "v2"
    assert g.first_version("v3") == "v1"
    g.new_node("v2b", "t")
    g.add_version_edge("v1", "v2b")          # a branch, created later
    assert g.get_next_version("v1") == "v2b"


def test_removal_set_chain_and_diamond():
    g = small_graph("abc")
    g.add_edge("a", "b")
    g.add_edge("b", "c")
    assert g.removal_set("b") == ["b", "c"]
    d = small_graph("abcd")
    for x, y in [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")]:
        d.add_edge(x, y)
    assert d.removal_set("b") == ["b"]


def test_remove_node_in_repository(repo):
    m = mlp(seed=1)
    repo.add_node(m, "a")
    repo.add_node(perturb(m, 1), "b", parents=["a"])
    repo.add_node(perturb(m, 2), "c", parents=["b"])
    assert repo.remove_node("b") == ["b", "c"]
    assert repo.node_names() == ["a"]
    assert repo.fsck().ok
    repo.gc()
    assert len(repo.objects.keys()) == len(list(m.param_items()))
    with pytest.raises(NodeNameError):
        repo.remove_node("b")


def test_selectors(repo):
    repo.add_node(mlp(), "a")
    hook = stub("acc", "test", "metric", "1.0")
    with pytest.raises(SelectorError):
        repo.register_test_function(hook, "acc")
    with pytest.raises(SelectorError):
        repo.register_test_function(hook, "acc", x="a", model_type="mlp")
    repo.register_test_function(hook, "acc", model_type="mlp")
    repo.add_node(mlp(seed=5), "later")
    assert list(repo.tests_for("later")) == ["acc"]       # type-level applies to future nodes
    repo.register_test_function(hook, "own", x="a")
    assert list(repo.tests_for("a")) == ["acc", "own"]
    repo.deregister_test_function("acc", model_type="mlp")
    assert list(repo.tests_for("later")) == []
    with pytest.raises(NodeNameError):
        repo.deregister_test_function("acc", model_type="mlp")


def test_save_load_identity(tmp_path):
    g = small_graph("abc")
    g.add_edge("a", "b")
    g.add_version_edge("b", "c")
    g.hooks["h"] = stub("h", "creation", "copy")
    g.node("a").creation_hook = "h"
    os.makedirs(tmp_path / "r")
    save(g, tmp_path / "r")
    again = load(tmp_path / "r")
    assert again.to_bytes() == g.to_bytes()
    assert again.nodes == g.nodes and again.hooks == g.hooks


def test_format_version_skew(tmp_path):
    g = small_graph("a")
    doc = json.loads(g.to_bytes())
    doc["format_version"] = 99
    with pytest.raises(FormatVersionError):
        LineageGraph.from_bytes(json.dumps(doc).encode())


def test_init_twice_and_discover(tmp_path, monkeypatch):
    Repository.init(tmp_path)
    with pytest.raises(RepositoryExistsError):
        Repository.init(tmp_path)
    sub = tmp_path / "x" / "y"
    sub.mkdir(parents=True)
    monkeypatch.delenv("MODELVC_DIR", raising=False)
    assert Repository.discover(sub).path == str(tmp_path / ".modelvc")
    with pytest.raises(RepositoryNotFound):
        Repository.discover(tempfile.mkdtemp())
    monkeypatch.setenv("MODELVC_DIR", str(tmp_path / ".modelvc"))
    assert Repository.discover("/").path == str(tmp_path / ".modelvc")


def test_lock_between_handles(repo):
    other = Repository.open(repo.path)
    with repo.locked():
        with pytest.raises(LockError):
            other.add_node(mlp(), "a")
    other.add_node(mlp(), "a")
    assert repo.node_names() == ["a"]      # first handle sees the commit


def test_failed_transaction_rolls_back(repo):
    repo.add_node(mlp(), "a")
    before = repo.graph.to_bytes()
    with pytest.raises(NodeNameError):
        repo.add_node(mlp(seed=3), "b", parents=["a", "ghost"])
    assert repo.graph.to_bytes() == before
    assert repo.fsck().ok


def test_codec_config_persisted(tmp_path):
    r = Repository.init(tmp_path, CodecConfig(epsilon=1e-3, backend="rle"))
    assert Repository.open(tmp_path).codec == CodecConfig(epsilon=1e-3, backend="rle")
    r.set_codec(CodecConfig(t_thr=0.25))
    assert Repository.open(r.path).codec.t_thr == 0.25


def test_compress_and_refcounts(repo):
    m = mlp(seed=2, widths=(32, 32))
    repo.add_node(m, "a")
    repo.add_node(perturb(m, 4, sigma=1e-5), "b", parents=["a"])
    r = repo.compress("b")
    assert r.accepted
    assert {ref.kind for _, ref in repo.load_model("b").param_items()} == {"delta"}
    assert not repo.compress("a").accepted                 # roots stay as they are
    assert repo.fsck().ok
    got = repo.materialize("b")
    want = dict(perturb(m, 4, sigma=1e-5).param_items())
    for p, ref in got.param_items():
        assert np.abs(ref.tensor.to_array() - want[p].tensor.to_array()).max() <= np.log1p(1e-4)
    # removing the parent keeps its tensors alive while the delta records need them
    repo.remove_edge("a", "b")
    repo.remove_node("a")
    repo.gc()
    assert repo.fsck().ok
    assert repo.materialize("b").canonical() == got.canonical()


OPS = st.lists(st.tuples(st.sampled_from(["add", "edge", "vedge", "remove", "compress", "redge"]),
                         st.integers(0, 5), st.integers(0, 5)), max_size=14)


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(OPS)
def test_property_random_mutations_keep_invariants(ops):
    with tempfile.TemporaryDirectory() as d:
        repo = Repository.init(d)
        base = mlp(seed=0, widths=(6, 6))
        count = 0
        for op, i, j in ops:
            names = repo.node_names()
            try:
                if op == "add" or not names:
                    count += 1
                    model = perturb(base, count, sigma=1e-4 if i % 2 else 1.0)
                    repo.add_node(model, f"n{count}", parents=[names[j % len(names)]] if names and i % 3 else [])
                    continue
                x, y = names[i % len(names)], names[j % len(names)]
                if op == "edge":
                    repo.add_edge(x, y)
                elif op == "vedge":
                    repo.add_version_edge(x, y)
                elif op == "remove":
                    repo.remove_node(x)
                elif op == "compress":
                    repo.compress(x, run_tests=False)
                elif op == "redge":
                    repo.remove_edge(x, y)
            except (CycleError, NodeNameError, IntegrityError):
                pass
            g = repo.graph
            assert g.audit() == []
            expected = repo.rebuild_refcounts()
            for kind, counts in expected.items():
                assert {k: v for k, v in g.refcounts[kind].items() if v} == dict(counts)
        repo.gc()
        assert repo.fsck().ok
        assert LineageGraph.from_bytes(repo.graph.to_bytes()).to_bytes() == repo.graph.to_bytes()
