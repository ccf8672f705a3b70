"""Recovering lineage from an unannotated pile of checkpoints.

Two unrelated architectures each spawn a few fine-tunes. Shuffled together
(parents still before children), auto_construct picks every parent by the
smallest contextual then structural divergence.
"""

from modelvc.autoconstruct import auto_construct

from _common import nudge, toy_model

pool = []
for family, widths in (("vision", (64,) + (48,) * 8 + (10,)), ("speech", (40,) + (32,) * 10 + (30,))):
    root = toy_model(f"{family}", seed=len(family), widths=widths)
    pool.append((family, root))
    layers = [f"fc{i}" for i in range(len(widths) - 1)]
    child = nudge(root, 1, 1e-3, {layers[-1]})
    pool.append((f"{family}-ft", child))
    pool.append((f"{family}-ft-ft", nudge(child, 2, 1e-3, {layers[-4]})))
    pool.append((f"{family}-other", nudge(root, 3, 1e-3, {layers[0]})))

order = [pool[0], pool[4], pool[1], pool[5], pool[3], pool[2], pool[7], pool[6]]
graph, placements = auto_construct(order)
for p in placements:
    if p.is_root:
        print(f"{p.name:16s} root")
    else:
        s = p.best
        print(f"{p.name:16s} <- {p.parent:12s} d_contextual={float(s.d_contextual):.3f} "
              f"d_structural={float(s.d_structural):.3f}")
