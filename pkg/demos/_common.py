import os
import sys
import tempfile

import numpy as np

from modelvc import HookSpec, build_model

HOOKS = os.path.join(os.path.dirname(os.path.abspath(__file__)), "demo_hooks.py")


def hook(hook_id, kind, *args):
    return HookSpec(hook_id, kind, (sys.executable, HOOKS, *args))


def toy_model(name, seed, widths=(64, 128, 128, 10), model_type="classifier"):
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        layers.append((f"fc{i}", "linear", {"in": a, "out": b},
                       {"w": (rng.standard_normal((a, b)) / np.sqrt(a)).astype(np.float32),
                        "b": np.zeros(b, np.float32)}))
    return build_model(name, model_type, layers, [(f"fc{i}", f"fc{i + 1}") for i in range(len(layers) - 1)])


def nudge(m, seed, sigma, layers=None):
    from modelvc import ParamRef
    rng = np.random.default_rng(seed)
    new = {}
    for path, ref in m.param_items():
        if layers is None or path.split("/")[0] in layers:
            a = ref.tensor.to_array()
            new[path] = ParamRef.inline((a + rng.normal(0, sigma, a.shape)).astype(a.dtype))
    return m.replace_params(new)


def workdir():
    return tempfile.mkdtemp(prefix="modelvc-demo-")
