"""Higher-level operations over a lineage graph.

Traversals, batch test and diagnostic runs, test bisection along a version
chain, the two-phase update cascade and the three-way merge check.
"""

from __future__ import annotations

import heapq
import logging
import math
import os
import re
import tempfile
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .deltacodec import lcs_mapping
from .diff import STRUCTURAL, module_diff
from .errors import (AncestryError, HookError, IntegrityError, NotFoundError, PatternError,
                     TypeMismatchError)
from .hooks import merged_creation, run_creation, run_test
from .lineage import PROVENANCE, VERSIONING, LineageGraph
from .model import LayerNode, ModelGraph, serialize_model, write_model_dir

log = logging.getLogger(__name__)

TRAVERSALS = ("bfs", "dfs", "version_chain", "all_parents_first")
EDGE_FILTERS = (PROVENANCE, VERSIONING, "both")


def _graph(g) -> LineageGraph:
    if isinstance(g, LineageGraph):
        return g
    g.refresh()
    return g.graph


def _children(g: LineageGraph, name, edge_filter):
    n = g.node(name)
    if edge_filter == PROVENANCE:
        out = n.prov_children
    elif edge_filter == VERSIONING:
        out = n.ver_children
    elif edge_filter == "both":
        out = set(n.prov_children) | set(n.ver_children)
    else:
        raise ValueError(f"unknown edge filter {edge_filter!r}")
    return sorted(out)


@dataclass
class Traversal:
    kind: str
    start: str
    edge_filter: str = PROVENANCE
    skip_fn: object = None
    terminate_fn: object = None
    group_fn: object = None      # all_parents_first only: node -> group id or None


def traversal(g, spec: Traversal):
    """Iterate node names (or tuples of names for grouped nodes)."""
    graph = _graph(g)
    graph.node(spec.start)
    skip = spec.skip_fn or (lambda name: False)
    stop = spec.terminate_fn or (lambda name: False)
    if spec.kind == "bfs":
        return _bfs(graph, spec.start, spec.edge_filter, skip, stop)
    if spec.kind == "dfs":
        return _dfs(graph, spec.start, spec.edge_filter, skip, stop)
    if spec.kind == "version_chain":
        return (n for n in version_chain(graph, spec.start) if not skip(n))
    if spec.kind == "all_parents_first":
        return all_parents_first(graph, spec.start, skip, stop, spec.group_fn)
    raise ValueError(f"unknown traversal {spec.kind!r}")


def _bfs(g, start, edge_filter, skip, stop):
    seen = {start}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if not skip(cur):
            yield cur
        if stop(cur):
            continue
        for c in _children(g, cur, edge_filter):
            if c not in seen:
                seen.add(c)
                queue.append(c)


def _dfs(g, start, edge_filter, skip, stop):
    seen = set()
    stack = [start]
    while stack:
        cur = stack.pop()
        if cur in seen:
            continue
        seen.add(cur)
        if not skip(cur):
            yield cur
        if not stop(cur):
            stack.extend(reversed([c for c in _children(g, cur, edge_filter) if c not in seen]))


def bfs(g, start, edge_filter=PROVENANCE, skip_fn=None, terminate_fn=None):
    return list(traversal(g, Traversal("bfs", start, edge_filter, skip_fn, terminate_fn)))


def dfs(g, start, edge_filter=PROVENANCE, skip_fn=None, terminate_fn=None):
    return list(traversal(g, Traversal("dfs", start, edge_filter, skip_fn, terminate_fn)))


def version_chain(g, start) -> list:
    """Oldest-first chain through ``start``: its version ancestors, ``start``,
    then the latest next version at each step."""
    graph = _graph(g)
    chain = [start]
    while (parent := graph.node(chain[0]).ver_parent) is not None:
        chain.insert(0, parent)
    cur = start
    while (cur := graph.get_next_version(cur)) is not None:
        chain.append(cur)
    return chain


def all_parents_first(g, start, skip_fn=None, terminate_fn=None, group_fn=None):
    """Provenance descendants of ``start`` (a name or a list of names,
    inclusive), each after all of its parents inside that set. ``terminate_fn`` prunes a node's subtree;
    ``skip_fn`` hides a node but keeps walking through it. When ``group_fn``
    maps nodes to group ids, members of a group come out together as a tuple
    once every member is ready."""
    graph = _graph(g)
    skip = skip_fn or (lambda name: False)
    stop = terminate_fn or (lambda name: False)
    group_of = group_fn or (lambda name: None)
    starts = [start] if isinstance(start, str) else sorted(set(start))
    for s in starts:
        graph.node(s)
    reach = []
    seen = set(starts)
    queue = deque(starts)
    while queue:
        cur = queue.popleft()
        reach.append(cur)
        if stop(cur):
            continue
        for c in sorted(graph.node(cur).prov_children):
            if c not in seen:
                seen.add(c)
                queue.append(c)
    indeg = {n: sum(1 for p in graph.node(n).prov_parents if p in seen) for n in reach}
    groups: dict = {}
    for n in reach:
        gid = group_of(n)
        if gid is not None:
            groups.setdefault(gid, set()).add(n)
    ready = [n for n in reach if indeg[n] == 0]
    heapq.heapify(ready)
    done = set()
    while ready:
        batch = None
        for cand in sorted(ready):
            gid = group_of(cand)
            members = groups.get(gid, {cand}) if gid is not None else {cand}
            if all(m in ready for m in members):
                batch = sorted(members)
                break
        if batch is None:  # a group member depends on another member
            batch = [heapq.heappop(ready)]
        else:
            ready = [n for n in ready if n not in batch]
            heapq.heapify(ready)
        visible = [n for n in batch if not skip(n)]
        if len(visible) == 1:
            yield visible[0]
        elif visible:
            yield tuple(visible)
        for n in batch:
            done.add(n)
            if stop(n):
                continue
            for c in graph.node(n).prov_children:
                if c in indeg and c not in done:
                    indeg[c] -= 1
                    if indeg[c] == 0:
                        heapq.heappush(ready, c)


# -- tests and diagnostics ----------------------------------------------------

def run_tests(repo, nodes, name_pattern=None) -> dict:
    """``{node: {test name: TestOutcome}}`` for every registered test whose
    name matches ``name_pattern`` (``re.search``)."""
    try:
        pattern = re.compile(name_pattern) if name_pattern else None
    except re.error as e:
        raise PatternError(f"bad test name pattern {name_pattern!r}: {e}") from None
    results = {}
    for name in _flatten(nodes):
        tests = {t: h for t, h in repo.tests_for(name).items() if pattern is None or pattern.search(t)}
        if not tests or repo.node(name).pending:
            results[name] = {}
            continue
        with tempfile.TemporaryDirectory(prefix="modelvc-test-") as d:
            manifest = repo.export(name, d)
            results[name] = {t: run_test(h, manifest) for t, h in tests.items()}
    return results


def _flatten(nodes):
    for n in nodes:
        if isinstance(n, tuple):
            yield from n
        else:
            yield n


def l2_norm(repo, name):
    m = repo.materialize(name)
    total = sum(float(np.sum(np.square(r.tensor.to_array(), dtype=np.float64))) for _, r in m.param_items())
    return math.sqrt(total)


def sparsity(repo, name):
    m = repo.materialize(name)
    zeros = total = 0
    for _, r in m.param_items():
        a = r.tensor.to_array()
        zeros += int(np.count_nonzero(a == 0))
        total += a.size
    return zeros / total if total else 0.0


def delta_norm(repo, name):
    """L2 norm of the difference to the first provenance parent over the
    LCS-mapped parameters; None for roots."""
    node = repo.node(name)
    if not node.prov_parents:
        return None
    child = repo.materialize(name)
    parent = repo.materialize(node.prov_parents[0])
    pp, cp = dict(parent.param_items()), dict(child.param_items())
    total = 0.0
    for a, b in lcs_mapping(parent, child):
        d = cp[b].tensor.to_array().astype(np.float64) - pp[a].tensor.to_array().astype(np.float64)
        total += float(np.sum(d * d))
    return math.sqrt(total)


DIAGNOSTICS = {"l2_norm": l2_norm, "sparsity": sparsity, "delta_norm": delta_norm}


def run_function(repo, nodes, diagnostic) -> dict:
    fn = DIAGNOSTICS[diagnostic] if isinstance(diagnostic, str) else diagnostic
    return {name: fn(repo, name) for name in _flatten(nodes)}


# -- bisection ---------------------------------------------------------------

def bisect_search(chain):
    """Generator: yields the next node to test and expects ``send(failed)``.
    Returns (StopIteration.value) the index of the first failure, or
    ``len(chain)`` when nothing fails. Costs ceil(log2(n + 1)) tests."""
    lo, hi = 0, len(chain)
    while lo < hi:
        mid = (lo + hi) // 2
        failed = yield chain[mid]
        if failed:
            hi = mid
        else:
            lo = mid + 1
    return lo


@dataclass
class BisectResult:
    node: str
    index: int
    runs: int
    tested: list


def bisect(repo, chain, test_name=None, runner=None) -> BisectResult:
    """First failing node of a monotone chain.

    ``chain`` is a list of node names or a single node whose version chain is
    used. ``runner(name) -> failed`` overrides running the registered test.
    """
    if isinstance(chain, str):
        chain = version_chain(repo, chain)
    chain = list(chain)
    if runner is None:
        if test_name is None:
            raise ValueError("bisect needs a test name or a runner")

        def runner(name):
            tests = repo.tests_for(name)
            if test_name not in tests:
                raise NotFoundError(f"no test {test_name!r} registered for {name}")
            return not run_tests(repo, [name], f"^{re.escape(test_name)}$")[name][test_name].passed
    tested = []
    search = bisect_search(chain)
    try:
        node = next(search)
        while True:
            tested.append(node)
            node = search.send(bool(runner(node)))
    except StopIteration as stop:
        index = stop.value
    if index >= len(chain):
        raise NotFoundError("no node of the chain fails")
    return BisectResult(chain[index], index, len(tested), tested)


# -- update cascade ----------------------------------------------------------

@dataclass
class CascadeReport:
    created: list = field(default_factory=list)      # new version names, in build order
    mapping: dict = field(default_factory=dict)      # old name -> new version name
    hookless: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    failed: dict = field(default_factory=dict)       # new name -> error message
    blocked: list = field(default_factory=list)


def _next_name(graph: LineageGraph, x):
    base = x.split("@", 1)[0]
    k = 2
    while f"{base}@{k}" in graph.nodes:
        k += 1
    return f"{base}@{k}"


def run_update_cascade(repo, m, m_prime, skip_fn=None, terminate_fn=None, name_fn=None) -> CascadeReport:
    """Rebuild every hooked descendant of ``m`` on top of the new version
    ``m_prime``. Existing models are never modified; each rebuilt node gets a
    new version node. Returns what was created, skipped and what failed."""
    report = CascadeReport()
    skip = skip_fn or (lambda name: False)
    user_stop = terminate_fn or (lambda name: False)

    # Phase 1: placeholders, provenance edges and version edges.
    with repo.transaction():
        g = repo.graph
        g.node(m)
        g.node(m_prime)
        if g.node(m_prime).ver_parent != m:
            g.add_version_edge(m, m_prime)
        mapping = {m: m_prime}

        def stop(name):
            if name == m:
                return user_stop(name)
            return user_stop(name) or g.node(name).creation_hook is None

        for x in all_parents_first(g, m, lambda n: n == m or skip(n), stop):
            node = g.node(x)
            if node.creation_hook is None:
                log.warning("node %s has no creation hook; not updated", x)
                report.hookless.append(x)
                continue
            new = name_fn(x) if name_fn else _next_name(g, x)
            parents = [mapping.get(p) or g.get_next_version(p) or p for p in node.prov_parents]
            g.new_node(new, node.model_type, None, node.creation_hook)
            g.node(new).meta["cascade_of"] = x
            for p in parents:
                g.add_edge(p, new)
            g.add_version_edge(x, new)
            mapping[x] = new
        report.skipped = [n for n in g.descendants(m) if skip(n)]
    report.mapping = {k: v for k, v in mapping.items() if k != m}
    placeholders = set(report.mapping.values())

    # Phase 2: build placeholders once all their parents exist.
    g = repo.graph

    def group_of(name):
        node = g.node(name)
        if node.creation_hook is None:
            return None
        return g.hooks[node.creation_hook].mtl_group

    bad = set()
    units = all_parents_first(g, [m_prime, *placeholders], lambda n: n not in placeholders, None, group_of)
    for unit in units:
        unit = list(unit) if isinstance(unit, tuple) else [unit]
        if any(p in bad or g.node(p).pending for n in unit for p in g.node(n).prov_parents):
            report.blocked.extend(unit)
            bad.update(unit)
            continue
        try:
            _build(repo, unit)
            report.created.extend(unit)
        except (HookError, IntegrityError, TypeMismatchError) as e:
            log.warning("cascade build of %s failed: %s", ", ".join(unit), e)
            for n in unit:
                report.failed[n] = str(e)
            bad.update(unit)
        g = repo.graph

    if bad:
        with repo.transaction():
            for n in sorted(bad, key=lambda n: -repo.graph.node(n).created):
                if repo.graph.node(n).pending:
                    repo.graph.detach(n)
        report.mapping = {k: v for k, v in report.mapping.items() if v not in bad}
    return report


def _ordered_parents(g, unit):
    out = []
    for n in unit:
        for p in g.node(n).prov_parents:
            if p not in out:
                out.append(p)
    return out


def _build(repo, unit):
    g = repo.graph
    with tempfile.TemporaryDirectory(prefix="modelvc-cascade-") as d:
        parents = _ordered_parents(g, unit)
        manifests = [repo.export(p, os.path.join(d, "parents", str(i))) for i, p in enumerate(parents)]
        hooks = [g.hooks[g.node(n).creation_hook] for n in unit]
        if len(unit) == 1:
            models = [run_creation(hooks[0], manifests, os.path.join(d, "out"))]
        else:
            models = merged_creation(hooks, manifests, os.path.join(d, "out"))
        with repo.transaction():
            for n, model in zip(unit, models):
                repo.set_model(n, model)


# -- merge --------------------------------------------------------------------

CONFLICT = "conflict"
POSSIBLE_CONFLICT = "possible_conflict"
NO_CONFLICT = "no_conflict"


@dataclass
class MergeVerdict:
    outcome: str
    conflicting_layers: set = field(default_factory=set)
    dependency_witness: list | None = None
    merged_model: ModelGraph | None = None
    candidate: ModelGraph | None = None
    changed: tuple = (frozenset(), frozenset())
    test_results: dict = field(default_factory=dict)

    @property
    def exit_code(self):
        return {NO_CONFLICT: 0, POSSIBLE_CONFLICT: 1, CONFLICT: 2}[self.outcome]


def _key(ref):
    return ref.content_key() if ref.content_key() is not None else f"delta:{ref.key}"


def changed_layers(ancestor: ModelGraph, m: ModelGraph, result=None):
    """Layer ids (ancestor ids for surviving layers) a user touched: deleted
    and added layers, matched layers whose params differ and matched layers
    whose incoming or outgoing edges changed."""
    result = result or module_diff(ancestor, m, STRUCTURAL)
    back = {b: a for a, b in result.matches_n}
    la, lm = ancestor.layer_map(), m.layer_map()
    changed = set(result.del_n) | set(result.add_n)
    for a, b in result.matches_n:
        pa, pb = la[a].params, lm[b].params
        if list(pa) != list(pb) or any(_key(pa[k]) != _key(pb[k]) for k in pa):
            changed.add(a)
    for u, v in result.del_e:
        changed.update((u, v))
    for u, v in result.add_e:
        changed.update(back.get(x, x) for x in (u, v))
    return changed, result


def _union_edges(ancestor, users):
    edges = set(ancestor.edges)
    for m, result in users:
        back = {b: a for a, b in result.matches_n}
        edges |= {(back.get(u, u), back.get(v, v)) for u, v in m.edges}
    return edges


def _find_path(edges, sources, targets):
    adj: dict = {}
    for u, v in sorted(edges):
        adj.setdefault(u, []).append(v)
    for s in sorted(sources):
        prev = {s: None}
        stack = [s]
        while stack:
            cur = stack.pop()
            if cur in targets and cur != s:
                path = [cur]
                while prev[path[-1]] is not None:
                    path.append(prev[path[-1]])
                return path[::-1]
            for nxt in adj.get(cur, ()):
                if nxt not in prev:
                    prev[nxt] = cur
                    stack.append(nxt)
    return None


def _common_descendant(edges, c1, c2):
    adj: dict = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)

    def reach(srcs):
        seen = set(srcs)
        stack = list(srcs)
        while stack:
            for nxt in adj.get(stack.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return seen
    common = reach(c1) & reach(c2)
    return sorted(common)[:1] or None


def _apply_changes(base: ModelGraph, ancestor: ModelGraph, m: ModelGraph, result) -> ModelGraph:
    """Replay one user's changes (relative to ``ancestor``) on ``base``."""
    back = {b: a for a, b in result.matches_n}
    lm = m.layer_map()
    la = ancestor.layer_map()
    layers = base.layer_map()
    for a in result.del_n:
        layers.pop(a, None)
    for a, b in result.matches_n:
        pa, pb = la[a].params, lm[b].params
        if a in layers and (list(pa) != list(pb) or any(_key(pa[k]) != _key(pb[k]) for k in pa)):
            layers[a] = LayerNode(a, la[a].op_type, la[a].attributes, lm[b].params)
    for b in sorted(result.add_n):
        layers[b] = lm[b]
    edges = [e for e in base.edges if e not in result.del_e and e[0] in layers and e[1] in layers]
    edges += [(back.get(u, u), back.get(v, v)) for u, v in sorted(result.add_e)]
    return ModelGraph(base.model_name, base.model_type, tuple(layers.values()), tuple(dict.fromkeys(edges)))


def merge_models(m1: ModelGraph, m2: ModelGraph, ancestor: ModelGraph, strict=False) -> MergeVerdict:
    c1, d1 = changed_layers(ancestor, m1)
    c2, d2 = changed_layers(ancestor, m2)
    changed = (frozenset(c1), frozenset(c2))
    both = c1 & c2
    if both:
        return MergeVerdict(CONFLICT, set(both), changed=changed)
    merged_1 = _apply_changes(_apply_changes(ancestor, ancestor, m1, d1), ancestor, m2, d2)
    merged_2 = _apply_changes(_apply_changes(ancestor, ancestor, m2, d2), ancestor, m1, d1)
    if serialize_model(merged_1)[0] != serialize_model(merged_2)[0]:
        raise IntegrityError("merge is order dependent")
    edges = _union_edges(ancestor, [(m1, d1), (m2, d2)])
    if strict:
        witness = _common_descendant(edges, c1, c2)
    else:
        witness = _find_path(edges, c1, c2) or _find_path(edges, c2, c1)
    if witness:
        return MergeVerdict(POSSIBLE_CONFLICT, set(), witness, None, merged_1, changed)
    return MergeVerdict(NO_CONFLICT, set(), None, merged_1, merged_1, changed)


def ancestors(g, name) -> set:
    """Lineage ancestors through provenance and version edges (inclusive)."""
    graph = _graph(g)
    out = {name}
    stack = [name]
    while stack:
        n = graph.node(stack.pop())
        for p in [*n.prov_parents, *([n.ver_parent] if n.ver_parent else [])]:
            if p not in out:
                out.add(p)
                stack.append(p)
    return out


def closest_common_ancestor(g, a, b):
    graph = _graph(g)
    common = ancestors(graph, a) & ancestors(graph, b)
    if not common:
        raise AncestryError(f"{a} and {b} have no common ancestor")
    closest = [c for c in common if not any(c != o and c in ancestors(graph, o) for o in common)]
    return max(closest, key=lambda c: graph.node(c).created)


def merge(repo, n1, n2, ancestor=None, strict=False, run_tests_on_candidate=True,
          commit_as=None) -> MergeVerdict:
    graph = _graph(repo)
    if ancestor is None:
        ancestor = closest_common_ancestor(graph, n1, n2)
    elif ancestor not in ancestors(graph, n1) or ancestor not in ancestors(graph, n2):
        raise AncestryError(f"{ancestor} is not a common ancestor of {n1} and {n2}")
    verdict = merge_models(repo.materialize(n1), repo.materialize(n2), repo.materialize(ancestor), strict)
    if verdict.outcome == POSSIBLE_CONFLICT and run_tests_on_candidate:
        tests = {**repo.tests_for(n1), **repo.tests_for(n2)}
        if tests:
            with tempfile.TemporaryDirectory(prefix="modelvc-merge-") as d:
                manifest = write_model_dir(d, verdict.candidate, repo.resolve)
                verdict.test_results = {t: run_test(h, manifest) for t, h in sorted(tests.items())}
    if verdict.outcome == NO_CONFLICT and commit_as:
        repo.add_node(verdict.merged_model, commit_as, parents=[n1, n2])
    return verdict

