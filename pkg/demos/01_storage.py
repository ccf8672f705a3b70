"""Deduplication and delta compression on a small family of models.

A base classifier is fine-tuned twice; one fine-tune only touches the head,
the other touches everything with tiny updates. Shared tensors are stored
once, and the second child is then stored as a quantized delta.
"""

from modelvc import Repository

from _common import nudge, toy_model, workdir

repo = Repository.init(workdir())
base = toy_model("base", seed=0)
raw_one = sum(ref.nbytes for _, ref in base.param_items())

repo.add_node(base, "base")
repo.add_node(nudge(base, 1, 1e-2, layers={"fc2"}), "head-tuned", parents=["base"])
repo.add_node(nudge(base, 2, 1e-5), "full-tuned", parents=["base"])
print(f"raw parameters: 3 models x {raw_one} B = {3 * raw_one} B")
print(f"stored after dedup: {repo.stored_bytes()} B")

result = repo.compress("full-tuned")
print(f"compress full-tuned: accepted={result.accepted} saving={result.storage_saving:.1f}x")
repo.gc()
print(f"stored after delta compression and gc: {repo.stored_bytes()} B")

kinds = sorted({ref.kind for _, ref in repo.load_model("full-tuned").param_items()})
print("full-tuned params are now:", ", ".join(kinds))
report = repo.fsck()
print("fsck:", "ok" if report.ok else report.errors)
