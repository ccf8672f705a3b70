"""Propagating a new version of a base model to everything derived from it.

Two task models are derived from a base through creation hooks; a third
model was tuned by hand and has no hook, so it is left alone. When the base
gets a new version, the cascade rebuilds the hooked descendants as new
versions and never touches the old ones.
"""

from modelvc import Repository
from modelvc.ops import run_update_cascade, version_chain

from _common import hook, nudge, toy_model, workdir

repo = Repository.init(workdir())
repo.register_hook(hook("tune-a", "creation", "finetune", "1", "{output}", "{parents}"))
repo.register_hook(hook("tune-b", "creation", "finetune", "2", "{output}", "{parents}"))

base = toy_model("base", seed=0)
repo.add_node(base, "base")
repo.add_node(nudge(base, 1, 1e-2, {"fc2"}), "task-a", "tune-a", parents=["base"])
repo.add_node(nudge(base, 2, 1e-2, {"fc2"}), "task-b", "tune-b", parents=["base"])
repo.add_node(nudge(base, 3, 1e-2), "manual", parents=["base"])

repo.add_node(nudge(base, 9, 1e-3), "base-v2")
report = run_update_cascade(repo, "base", "base-v2")

print("rebuilt:", report.created)
print("no creation hook:", report.hookless)
for old, new in report.mapping.items():
    node = repo.node(new)
    print(f"  {new}: version of {node.ver_parent}, derived from {node.prov_parents}")
print("version chain of task-a:", " -> ".join(version_chain(repo, "task-a")))
