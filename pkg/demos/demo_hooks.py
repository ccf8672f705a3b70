"""Toy creation and test functions used by the demos.

    python demo_hooks.py copy OUTPUT PARENT...
    python demo_hooks.py finetune SEED OUTPUT PARENT...   nudge the last layer
    python demo_hooks.py accuracy MODEL                   fake accuracy from weights
"""

import sys

import numpy as np

from modelvc.model import ParamRef, read_model_dir, write_model_dir


def copy(output, *parents):
    write_model_dir(output, read_model_dir(parents[0]))


def finetune(seed, output, *parents):
    m = read_model_dir(parents[0])
    rng = np.random.default_rng(int(seed))
    items = list(m.param_items())
    path, ref = items[-2]              # last layer weight
    w = ref.tensor.to_array()
    write_model_dir(output, m.replace_params({path: ParamRef.inline((w + rng.normal(0, 1e-2, w.shape)).astype(w.dtype))}))


def accuracy(model):
    m = read_model_dir(model)
    w = np.concatenate([r.tensor.to_array().ravel() for _, r in m.param_items()])
    score = 100.0 * float(np.mean(np.abs(w) < 1.0))   # stand-in metric
    print(f"{score:.3f}")
    sys.exit(0 if score > 50 else 1)


if __name__ == "__main__":
    action, *args = sys.argv[1:]
    {"copy": copy, "finetune": finetune, "accuracy": accuracy}[action](*args)
