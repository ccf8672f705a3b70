"""Command-line front end.

Exit codes::

    0  success (merge: no conflict)
    1  operation failed, tests failed, bisect found nothing, merge: possible conflict
    2  usage error, merge: conflict
    3  no repository found
    4  repository locked by another process
    5  fsck found problems

Errors go to stderr as ``error: <code>: <message>``. ``--porcelain`` switches
read commands to tab-separated records.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import ops
from .autoconstruct import DEFAULT_TAU, IndexCache, auto_add
from .deltacodec import BACKENDS, CodecConfig
from .diff import MODES, STRUCTURAL, diff_report, divergence, module_diff
from .errors import LockError, ModelVCError, RepositoryNotFound
from .hooks import HOOK_KINDS, HookSpec
from .lineage import PROVENANCE, VERSIONING, Repository
from .model import read_model_dir

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NO_REPO, EXIT_LOCKED, EXIT_FSCK = 0, 1, 2, 3, 4, 5


class Context:
    def __init__(self, args):
        self.args = args
        self.porcelain = args.porcelain
        self._repo = None

    @property
    def repo(self) -> Repository:
        if self._repo is None:
            self._repo = Repository.open(self.args.repo) if self.args.repo else Repository.discover()
        return self._repo

    def out(self, *fields):
        print("\t".join(str(f) for f in fields) if self.porcelain else " ".join(str(f) for f in fields))


def _model_arg(ctx, ref):
    """A node name, or a path to a model directory / manifest.

    Node names win over paths so a stray directory cannot shadow a node.
    """
    if not os.path.exists(ref):
        return ctx.repo.materialize(ref)
    try:
        if ref in ctx.repo.graph:
            return ctx.repo.materialize(ref)
    except RepositoryNotFound:
        pass
    return read_model_dir(ref)


# -- commands -----------------------------------------------------------------

def cmd_init(ctx, a):
    cfg = CodecConfig(a.epsilon, a.t_thr, a.backend, a.max_chain_depth)
    repo = Repository.init(a.path, cfg)
    ctx.out("initialized", repo.path)


def cmd_add_node(ctx, a):
    model = read_model_dir(a.model)
    node = ctx.repo.add_node(model, a.name, a.creation_hook, a.parent or ())
    ctx.out("added", node.name, node.model_ref)


def cmd_add_edge(ctx, a):
    ctx.repo.add_edge(a.x, a.y)


def cmd_add_version_edge(ctx, a):
    ctx.repo.add_version_edge(a.x, a.y)


def cmd_remove_node(ctx, a):
    for name in ctx.repo.remove_node(a.x):
        ctx.out("removed", name)


def cmd_remove_edge(ctx, a):
    ctx.repo.remove_edge(a.x, a.y, VERSIONING if a.versioning else PROVENANCE)


def cmd_register_hook(ctx, a):
    command = list(a.hook_argv)
    repo = ctx.repo
    with repo.transaction():
        if a.script:
            command = [repo.install_hook_script(a.hook_id, a.script), *command]
        if not command:
            raise ValueError("register-hook needs a command or --script")
        spec = repo.register_hook(HookSpec(a.hook_id, a.kind, tuple(command), a.timeout, a.mtl_group,
                                           tuple(a.shared or ())))
        if a.kind == "creation" and a.node:
            repo.register_creation_function(a.node, spec.hook_id)
        if a.kind == "test" and a.test_name:
            repo.register_test_function(spec.hook_id, a.test_name, a.node, a.model_type)
    ctx.out("hook", spec.hook_id, " ".join(spec.command))


def cmd_deregister_test(ctx, a):
    ctx.repo.deregister_test_function(a.name, a.node, a.model_type)


def _log_line(ctx, g, name, prev=None):
    n = g.node(name)
    if ctx.porcelain:
        return "\t".join([name, n.model_type, n.ver_parent or "-", ",".join(n.prov_parents) or "-",
                          n.model_ref or "-"])
    parts = [f"{name} [{n.model_type}]"]
    if prev is not None:
        parts.append(f"version of {prev}")
    if n.prov_parents:
        parts.append("derived from " + ", ".join(n.prov_parents))
    if n.pending:
        parts.append("(pending)")
    return "  ".join(parts)


def cmd_log(ctx, a):
    repo = ctx.repo
    g = repo.graph
    if a.node:
        chain = ops.version_chain(repo, a.node)
        for i, name in enumerate(chain):
            print(_log_line(ctx, g, name, chain[i - 1] if i else None))
    else:
        for name in repo.node_names():
            print(_log_line(ctx, g, name, g.node(name).ver_parent))


def cmd_show(ctx, a):
    repo = ctx.repo
    n = repo.node(a.node)
    rows = [("name", n.name), ("model_type", n.model_type), ("model_ref", n.model_ref or "-"),
            ("creation_hook", n.creation_hook or "-"),
            ("tests", ",".join(sorted(repo.tests_for(a.node))) or "-"),
            ("prov_parents", ",".join(n.prov_parents) or "-"),
            ("prov_children", ",".join(n.prov_children) or "-"),
            ("ver_parent", n.ver_parent or "-"), ("ver_children", ",".join(n.ver_children) or "-")]
    if not n.pending:
        m = repo.load_model(a.node)
        rows.append(("layers", len(m.layers)))
        rows.append(("edges", len(m.edges)))
        for path, ref in m.param_items():
            rows.append(("param", f"{path} {ref.kind} {ref.dtype}{list(ref.shape)} {ref.key}"))
    for k, v in rows:
        if ctx.porcelain:
            print(f"{k}\t{v}")
        else:
            print(f"{k:>14}: {v}")


def cmd_diff(ctx, a):
    m1, m2 = _model_arg(ctx, a.a), _model_arg(ctx, a.b)
    result = module_diff(m1, m2, a.mode)
    score = divergence(m1, m2)
    if a.json:
        doc = result.to_dict()
        doc["d_structural"], doc["d_contextual"] = score.as_floats()
        print(json.dumps(doc, sort_keys=True))
    elif ctx.porcelain:
        for x, y in result.matches_n:
            print(f"match_n\t{x}\t{y}")
        for n in sorted(result.del_n):
            print(f"del_n\t{n}")
        for n in sorted(result.add_n):
            print(f"add_n\t{n}")
        for e in sorted(result.del_e):
            print(f"del_e\t{e[0]}\t{e[1]}")
        for e in sorted(result.add_e):
            print(f"add_e\t{e[0]}\t{e[1]}")
        print(f"d_structural\t{score.d_structural}")
        print(f"d_contextual\t{score.d_contextual}")
    else:
        sys.stdout.write(diff_report(m1, m2, a.mode, result=result))
        print(f"divergence: structural {float(score.d_structural):.4f}, "
              f"contextual {float(score.d_contextual):.4f}")


def cmd_auto_add(ctx, a):
    repo = ctx.repo
    cache = IndexCache(lambda ref: ref.content_key() or repo.resolve(ref).content_key())
    for path in a.models:
        model = read_model_dir(path)
        name = a.name if a.name and len(a.models) == 1 else model.model_name
        p = auto_add(repo, model, name, a.tau, cache)
        best = p.best
        ctx.out(p.name, p.parent or "(root)",
                *(f"{float(best.d_contextual):.4f} {float(best.d_structural):.4f}".split() if best else ["-", "-"]))


def cmd_compress(ctx, a):
    repo = ctx.repo
    cfg = repo.codec
    cfg = CodecConfig(a.epsilon if a.epsilon is not None else cfg.epsilon,
                      a.t_thr if a.t_thr is not None else cfg.t_thr,
                      a.backend or cfg.backend, cfg.max_chain_depth)
    names = repo.node_names() if a.all else a.nodes
    status = EXIT_OK
    for name in names:
        if repo.node(name).pending:
            continue
        r = repo.compress(name, a.base, cfg, run_tests=not a.no_tests)
        if r.accepted:
            ctx.out(name, "accepted", f"{r.storage_saving:.3f}")
        else:
            ctx.out(name, "rejected", f"{r.storage_saving:.3f}", r.reason)
        if not r.accepted and not a.all:
            status = EXIT_FAIL
    return status


def cmd_gc(ctx, a):
    ctx.out("removed", ctx.repo.gc())


def _iterate(ctx, a):
    repo = ctx.repo
    if not a.node:
        return repo.node_names()
    kind = a.traversal
    if kind == "version_chain":
        return ops.version_chain(repo, a.node)
    return list(ops.traversal(repo, ops.Traversal(kind, a.node)))


def cmd_test(ctx, a):
    results = ops.run_tests(ctx.repo, _iterate(ctx, a), a.pattern)
    status = EXIT_OK
    for name, outcomes in results.items():
        for tname, o in outcomes.items():
            ctx.out(name, tname, "pass" if o.passed else "fail", "-" if o.metric is None else o.metric)
            if not o.passed:
                status = EXIT_FAIL
    return status


def cmd_run(ctx, a):
    for name, value in ops.run_function(ctx.repo, _iterate(ctx, a), a.function).items():
        ctx.out(name, "-" if value is None else repr(value))


def cmd_bisect(ctx, a):
    r = ops.bisect(ctx.repo, a.node, a.test)
    ctx.out("first-failure", r.node, r.runs)


def cmd_update(ctx, a):
    repo = ctx.repo
    if a.model:
        repo.add_node(read_model_dir(a.model), a.m_prime)
        repo.add_version_edge(a.m, a.m_prime)
    skip, stop = set(a.skip or ()), set(a.terminate or ())
    report = ops.run_update_cascade(repo, a.m, a.m_prime, skip.__contains__, stop.__contains__)
    for name in report.created:
        ctx.out("created", name, repo.node(name).meta.get("cascade_of", "-"))
    for name in report.hookless:
        ctx.out("no-hook", name)
    for name, msg in sorted(report.failed.items()):
        ctx.out("failed", name, msg)
    for name in report.blocked:
        ctx.out("blocked", name)
    return EXIT_FAIL if report.failed or report.blocked else EXIT_OK


def cmd_merge(ctx, a):
    v = ops.merge(ctx.repo, a.x, a.y, a.ancestor, a.strict, commit_as=a.commit)
    ctx.out("outcome", v.outcome)
    if v.conflicting_layers:
        ctx.out("conflicting", *sorted(v.conflicting_layers))
    if v.dependency_witness:
        ctx.out("witness", *v.dependency_witness)
    for tname, o in v.test_results.items():
        ctx.out("test", tname, "pass" if o.passed else "fail")
    return v.exit_code


def cmd_fsck(ctx, a):
    report = ctx.repo.fsck(deep=not a.shallow)
    for w in report.warnings:
        ctx.out("warning", w)
    for e in report.errors:
        ctx.out("error", e)
    if report.ok:
        ctx.out("ok", report.checked.get("params", 0))
        return EXIT_OK
    return EXIT_FSCK


# -- parser -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="modelvc", description=__doc__.split("\n\n")[0],
        epilog="exit codes: 0 ok | 1 failed / possible conflict | 2 usage / conflict | "
               "3 no repository | 4 locked | 5 fsck failure.  "
               "MODELVC_DIR overrides repository discovery.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repo", help="repository path (default: $MODELVC_DIR or upward search for .modelvc)")
    p.add_argument("--porcelain", action="store_true", help="tab-separated machine-readable output")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("init", cmd_init, "create a repository in PATH (default .)")
    sp.add_argument("path", nargs="?", default=".")
    sp.add_argument("--epsilon", type=float, default=1e-4)
    sp.add_argument("--t-thr", type=float, default=0.0)
    sp.add_argument("--backend", choices=BACKENDS, default="dict_lossless")
    sp.add_argument("--max-chain-depth", type=int, default=32)

    sp = add("add-node", cmd_add_node, "store the model directory MODEL as node NAME")
    sp.add_argument("name")
    sp.add_argument("model")
    sp.add_argument("--parent", action="append", help="provenance parent (repeatable)")
    sp.add_argument("--creation-hook")

    for name, fn, what in (("add-edge", cmd_add_edge, "provenance"),
                           ("add-version-edge", cmd_add_version_edge, "versioning")):
        sp = add(name, fn, f"add a {what} edge X -> Y")
        sp.add_argument("x")
        sp.add_argument("y")

    sp = add("remove-node", cmd_remove_node, "remove X and descendants only reachable through it")
    sp.add_argument("x")

    sp = add("remove-edge", cmd_remove_edge, "remove the edge X -> Y")
    sp.add_argument("x")
    sp.add_argument("y")
    sp.add_argument("--versioning", action="store_true", help="remove a version edge")

    sp = add("register-hook", cmd_register_hook,
             "register a hook: register-hook ID --kind K [options] -- COMMAND...; "
             "COMMAND may use {parents} {output} {model} {workdir}")
    sp.add_argument("hook_id")
    sp.add_argument("--kind", choices=HOOK_KINDS, required=True)
    sp.add_argument("--timeout", type=float, default=3600.0)
    sp.add_argument("--mtl-group")
    sp.add_argument("--shared", action="append", help="param path shared across the MTL group")
    sp.add_argument("--script", help="copy this file under hooks/ and run it")
    sp.add_argument("--node", help="attach to this node")
    sp.add_argument("--model-type", help="attach a test hook to every node of this type")
    sp.add_argument("--test-name", help="name to register a test hook under")

    sp = add("deregister-test", cmd_deregister_test, "remove a registered test")
    sp.add_argument("name")
    sp.add_argument("--node")
    sp.add_argument("--model-type")

    sp = add("log", cmd_log, "version chain of NODE, oldest first (all nodes without NODE)")
    sp.add_argument("node", nargs="?")

    sp = add("show", cmd_show, "node metadata and parameter refs")
    sp.add_argument("node")

    sp = add("diff", cmd_diff, "diff two nodes or model directories")
    sp.add_argument("a")
    sp.add_argument("b")
    sp.add_argument("--mode", choices=MODES, default=STRUCTURAL)
    sp.add_argument("--json", action="store_true", help="print the DiffResult as JSON")

    sp = add("auto-add", cmd_auto_add, "insert model directories, choosing parents automatically")
    sp.add_argument("models", nargs="+")
    sp.add_argument("--tau", type=float, default=DEFAULT_TAU)
    sp.add_argument("--name", help="node name (single model only)")

    sp = add("compress", cmd_compress, "delta-compress nodes against their parent")
    sp.add_argument("nodes", nargs="*")
    sp.add_argument("--all", action="store_true")
    sp.add_argument("--base", help="compress against this node instead of the parent")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--t-thr", type=float)
    sp.add_argument("--backend", choices=BACKENDS)
    sp.add_argument("--no-tests", action="store_true", help="skip the accuracy check")

    add("gc", cmd_gc, "delete unreferenced objects, deltas and manifests")

    for name, fn, help_ in (("test", cmd_test, "run registered tests"),
                            ("run", cmd_run, "run a diagnostic over nodes")):
        sp = add(name, fn, help_)
        sp.add_argument("node", nargs="?", help="start node (default: every node)")
        sp.add_argument("--traversal", choices=ops.TRAVERSALS, default="bfs")
        if name == "test":
            sp.add_argument("--pattern", help="regex over test names")
        else:
            sp.add_argument("--function", choices=sorted(ops.DIAGNOSTICS), required=True)

    sp = add("bisect", cmd_bisect, "first version in NODE's chain failing TEST")
    sp.add_argument("node")
    sp.add_argument("test")

    sp = add("update", cmd_update, "propagate the new version M_PRIME of M to M's descendants")
    sp.add_argument("m")
    sp.add_argument("m_prime")
    sp.add_argument("--model", help="model directory to add as M_PRIME first")
    sp.add_argument("--skip", action="append")
    sp.add_argument("--terminate", action="append")

    sp = add("merge", cmd_merge, "three-way merge check of X and Y")
    sp.add_argument("x")
    sp.add_argument("y")
    sp.add_argument("--ancestor")
    sp.add_argument("--strict", action="store_true", help="dependency means a common descendant")
    sp.add_argument("--commit", metavar="NAME", help="store a conflict-free merge as NAME")

    sp = add("fsck", cmd_fsck, "verify hashes, references, adjacency and reference counts")
    sp.add_argument("--shallow", action="store_true", help="skip decoding every parameter")
    return p


def main(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    hook_argv = []
    if "--" in argv:       # everything after -- is a hook command
        cut = argv.index("--")
        argv, hook_argv = argv[:cut], argv[cut + 1:]
    try:
        args = parser.parse_args(argv)
        args.hook_argv = hook_argv
        if hook_argv and args.command != "register-hook":
            parser.error("only register-hook takes a command after --")
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    ctx = Context(args)
    try:
        status = args.fn(ctx, args)
    except RepositoryNotFound as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return EXIT_NO_REPO
    except LockError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return EXIT_LOCKED
    except ModelVCError as e:
        print(f"error: {e.code}: {e}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())
