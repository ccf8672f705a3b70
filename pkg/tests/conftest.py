import os
import sys

import numpy as np
import pytest

from modelvc import HookSpec, Repository, build_model

STUB = os.path.join(os.path.dirname(__file__), "stub_hooks.py")


def stub(hook_id, kind, action, *args, **kw):
    """HookSpec running one action of stub_hooks.py with the current python."""
    return HookSpec(hook_id, kind, (sys.executable, STUB, action, *args), **kw)


def mlp(name="m", seed=0, widths=(8, 8, 4), model_type="mlp", scale=1.0):
    """Chain of linear layers l0 -> l1 -> ... with random f32 weights."""
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        layers.append((f"l{i}", "linear", {"in": a, "out": b},
                       {"w": (rng.standard_normal((a, b)) * scale).astype(np.float32),
                        "b": np.zeros(b, np.float32)}))
    edges = [(f"l{i}", f"l{i + 1}") for i in range(len(layers) - 1)]
    return build_model(name, model_type, layers, edges)


def perturb(m, seed, sigma=1e-3, layers=None, name=None):
    """Copy of ``m`` with noise added to the params of ``layers`` (all by default)."""
    from modelvc import ParamRef
    rng = np.random.default_rng(seed)
    new = {}
    for path, ref in m.param_items():
        if layers is None or path.split("/")[0] in layers:
            a = ref.tensor.to_array()
            new[path] = ParamRef.inline((a + rng.standard_normal(a.shape) * sigma).astype(a.dtype))
    out = m.replace_params(new)
    if name:
        from dataclasses import replace
        out = replace(out, model_name=name)
    return out


@pytest.fixture
def repo(tmp_path):
    return Repository.init(tmp_path / "work")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    n, title = marker.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    ok, _, details = item.config._criteria.get(n, (True, title, ""))
    joined = "; ".join(d for d in (details, detail) if d)
    item.config._criteria[n] = (ok and rep.passed, title, joined)


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(config._criteria):
        ok, title, detail = config._criteria[n]
        line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
