"""Three-way merge checks and test bisection.

Two people edit copies of the same model. Editing the same layer is a
conflict; editing layers that feed each other may be one; editing unrelated
layers merges automatically. Then a version chain that degrades at some
point is searched with a registered test.
"""

import numpy as np

from modelvc import Repository, build_model
from modelvc.ops import bisect, merge

from _common import hook, nudge, workdir


def two_branch_model():
    rng = np.random.default_rng(0)
    layers = [(x, "linear", {}, {"w": rng.standard_normal((16, 16)).astype(np.float32)})
              for x in ("enc", "mid", "head", "aux")]
    return build_model("net", "net", layers, [("enc", "mid"), ("mid", "head")])   # aux is separate


repo = Repository.init(workdir())
anc = two_branch_model()
repo.add_node(anc, "anc")
for seed, (name, layer) in enumerate((("alice", "head"), ("bob", "head"), ("carol", "enc"), ("dave", "aux"))):
    repo.add_node(nudge(anc, seed, 0.1, {layer}), name, parents=["anc"])

for a, b in (("alice", "bob"), ("alice", "carol"), ("alice", "dave")):
    v = merge(repo, a, b, run_tests_on_candidate=False)
    extra = v.conflicting_layers or v.dependency_witness or ""
    print(f"merge {a} + {b}: {v.outcome} {extra}")

# bisection: weights drift upward each version until the test starts failing
repo.register_test_function(hook("acc", "test", "accuracy", "{model}"), "accuracy", model_type="chain")
prev = None
for i in range(12):
    m = build_model("c", "chain", [("w", "linear", {}, {"w": np.full(64, 0.2 * i, np.float32)})])
    repo.add_node(m, f"v{i}")
    if prev:
        repo.add_version_edge(prev, f"v{i}")
    prev = f"v{i}"
res = bisect(repo, "v0", "accuracy")
print(f"first failing version: {res.node} after {res.runs} test runs (chain of 12)")
