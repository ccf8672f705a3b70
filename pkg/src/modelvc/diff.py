"""Structural and contextual diffs between model DAGs.

Layers are compared through signatures: a structural signature hashes the op
type, the sorted attributes and the (shape, dtype) of every parameter; a
contextual signature additionally hashes each parameter's content key, so two
layers match contextually only when their values are bit-identical.

Matching is hash-table driven. Edges are bucketed by the signatures of their
end points and matched greedily bucket by bucket; nodes not covered by a
matched edge are then paired within their signature bucket in topological
order. Those candidate matches are then reconciled into a largest matching
that is monotone in both topological orders (inverse matches such as the
second A of A-B-A-C against A-B-C-A are dropped), preferring candidates, and
an edge counts as matched when both end points map onto an edge of the other
model.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .model import LayerNode, ModelGraph, topological_order

STRUCTURAL = "structural"
CONTEXTUAL = "contextual"
MODES = (STRUCTURAL, CONTEXTUAL)


def default_key_of(ref):
    key = ref.content_key()
    if key is None:
        raise ValueError("contextual diff of a delta param needs a key resolver")
    return key


def node_signature(layer: LayerNode, mode: str = STRUCTURAL, key_of=default_key_of) -> str:
    if mode not in MODES:
        raise ValueError(f"unknown diff mode {mode!r}")
    params = [[list(ref.shape), ref.dtype] for ref in layer.params.values()]
    payload = [layer.op_type, layer.attributes, params]
    if mode == CONTEXTUAL:
        payload.append([key_of(ref) for ref in layer.params.values()])
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class DiffIndex:
    """Per-model hash tables; build once and reuse across many diffs."""

    model: ModelGraph
    mode: str
    order: list
    pos: dict
    sig: dict
    nodes: dict          # signature -> layer ids in topological order
    edges: dict          # (sig_src, sig_dst) -> edges in topological order
    edge_list: list


def index_model(m: ModelGraph, mode: str = STRUCTURAL, key_of=default_key_of) -> DiffIndex:
    order = topological_order(m)
    pos = {lid: i for i, lid in enumerate(order)}
    layers = m.layer_map()
    sig = {lid: node_signature(layers[lid], mode, key_of) for lid in order}
    nodes: dict = {}
    for lid in order:
        nodes.setdefault(sig[lid], []).append(lid)
    edge_list = sorted(m.edges, key=lambda e: (pos[e[0]], pos[e[1]]))
    edges: dict = {}
    for e in edge_list:
        edges.setdefault((sig[e[0]], sig[e[1]]), []).append(e)
    return DiffIndex(m, mode, order, pos, sig, nodes, edges, edge_list)


@dataclass
class DiffResult:
    mode: str
    matches_n: list = field(default_factory=list)
    matches_e: list = field(default_factory=list)
    add_n: set = field(default_factory=set)
    del_n: set = field(default_factory=set)
    add_e: set = field(default_factory=set)
    del_e: set = field(default_factory=set)

    def is_empty(self):
        return not (self.add_n or self.del_n or self.add_e or self.del_e)

    @property
    def edges_diff(self):
        return len(self.add_e) + len(self.del_e)

    def node_map(self):
        return dict(self.matches_n)

    def to_dict(self):
        return {
            "mode": self.mode,
            "matches_n": [list(p) for p in self.matches_n],
            "matches_e": [[list(a), list(b)] for a, b in self.matches_e],
            "add_n": sorted(self.add_n),
            "del_n": sorted(self.del_n),
            "add_e": sorted(list(e) for e in self.add_e),
            "del_e": sorted(list(e) for e in self.del_e),
        }


def _as_index(m, mode, key_of):
    if isinstance(m, DiffIndex):
        if m.mode != mode:
            raise ValueError(f"index built for {m.mode} diff, asked for {mode}")
        return m
    return index_model(m, mode, key_of)


def _reconcile(a: DiffIndex, b: DiffIndex, candidates: dict) -> list:
    """Largest order-consistent matching of equal-signature layers.

    Among all maximum matchings it keeps as many ``candidates`` (the hash-table
    matches) as possible, so when the candidates contain a maximum monotone
    subset this is exactly that subset. Weighted LCS over the two topological
    orders.
    """
    n, m = len(a.order), len(b.order)
    if not n or not m:
        return []
    big = min(n, m) + 1
    sb = [b.sig[v] for v in b.order]
    weights = [[big if su == sv else 0 for sv in sb] for su in (a.sig[u] for u in a.order)]
    bpos = b.pos
    for u, v in candidates.items():
        row = weights[a.pos[u]]
        if row[bpos[v]]:
            row[bpos[v]] += 1
    if n * m <= 4096:
        table = _weighted_lcs_lists(weights, n, m)
    else:
        table = _weighted_lcs_numpy(np.array(weights, dtype=np.int64), n, m)
    pairs = []
    i, j = n, m
    while i and j:
        w = weights[i - 1][j - 1]
        if w and table[i][j] == table[i - 1][j - 1] + w:
            pairs.append((a.order[i - 1], b.order[j - 1]))
            i, j = i - 1, j - 1
        elif table[i][j] == table[i - 1][j]:
            i -= 1
        else:
            j -= 1
    return pairs[::-1]


def _weighted_lcs_lists(weights, n, m):
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n):
        prev, row, wrow = table[i], table[i + 1], weights[i]
        for j in range(m):
            best = prev[j + 1] if prev[j + 1] > row[j] else row[j]
            w = wrow[j]
            if w and prev[j] + w > best:
                best = prev[j] + w
            row[j + 1] = best
    return table


def _weighted_lcs_numpy(weights, n, m):
    table = np.zeros((n + 1, m + 1), dtype=np.int64)
    for i in range(n):
        prev = table[i]
        diag = np.where(weights[i] > 0, prev[:-1] + weights[i], -1)
        table[i + 1, 1:] = np.maximum.accumulate(np.maximum(prev[1:], diag))
    return table


def _candidate_matches(a: DiffIndex, b: DiffIndex) -> dict:
    match1: dict = {}
    match2: dict = {}

    def compatible(n1, n2):
        # both unmatched, or already matched to each other
        got = match1.get(n1)
        if got is None:
            return n2 not in match2
        return got == n2

    for h in sorted(a.edges):
        remaining = list(b.edges.get(h, ()))
        if not remaining:
            continue
        for e1 in a.edges[h]:
            for i, e2 in enumerate(remaining):
                if compatible(e1[0], e2[0]) and compatible(e1[1], e2[1]):
                    match1[e1[0]], match1[e1[1]] = e2[0], e2[1]
                    match2[e2[0]], match2[e2[1]] = e1[0], e1[1]
                    del remaining[i]
                    break

    for h in sorted(a.nodes):
        ns1 = [n for n in a.nodes[h] if n not in match1]
        ns2 = [n for n in b.nodes.get(h, ()) if n not in match2]
        for n1, n2 in zip(ns1, ns2):
            match1[n1] = n2
            match2[n2] = n1
    return match1


def _one_way(a: DiffIndex, b: DiffIndex) -> DiffResult:
    matches_n = _reconcile(a, b, _candidate_matches(a, b))
    fwd = dict(matches_n)
    e2_all = set(b.edge_list)
    matches_e = [(e1, (fwd[e1[0]], fwd[e1[1]])) for e1 in a.edge_list
                 if e1[0] in fwd and e1[1] in fwd and (fwd[e1[0]], fwd[e1[1]]) in e2_all]
    matched_right = set(fwd.values())
    e1_matched = {e1 for e1, _ in matches_e}
    e2_matched = {e2 for _, e2 in matches_e}
    return DiffResult(
        mode=a.mode,
        matches_n=matches_n,
        matches_e=matches_e,
        add_n={n for n in b.order if n not in matched_right},
        del_n={n for n in a.order if n not in fwd},
        add_e={e for e in b.edge_list if e not in e2_matched},
        del_e={e for e in a.edge_list if e not in e1_matched},
    )


def module_diff(m1, m2, mode: str = STRUCTURAL, key_of=default_key_of) -> DiffResult:
    """Nodes and edges to delete from ``m1`` and add to reach ``m2``.

    ``m1``/``m2`` may be ModelGraphs or prebuilt :class:`DiffIndex` objects.
    The matching is computed in both directions and the one preserving more
    edges wins, which makes match counts independent of argument order.
    """
    a = _as_index(m1, mode, key_of)
    b = _as_index(m2, mode, key_of)
    fwd = _one_way(a, b)
    rev = _one_way(b, a)
    if len(rev.matches_e) <= len(fwd.matches_e):
        return fwd
    pos = a.pos
    return DiffResult(
        mode=mode,
        matches_n=sorted(((y, x) for x, y in rev.matches_n), key=lambda p: pos[p[0]]),
        matches_e=sorted(((y, x) for x, y in rev.matches_e), key=lambda p: (pos[p[0][0]], pos[p[0][1]])),
        add_n=rev.del_n, del_n=rev.add_n, add_e=rev.del_e, del_e=rev.add_e,
    )


@dataclass(frozen=True)
class DivergenceScore:
    d_structural: Fraction
    d_contextual: Fraction

    def as_floats(self):
        return float(self.d_structural), float(self.d_contextual)


def score(a: DiffIndex, b: DiffIndex, result: DiffResult | None = None) -> Fraction:
    """Unmatched edges over total edges; edgeless pairs compare node multisets."""
    total = len(a.edge_list) + len(b.edge_list)
    if total == 0:
        same = Counter(a.sig.values()) == Counter(b.sig.values())
        return Fraction(0) if same else Fraction(1)
    if result is None:
        result = module_diff(a, b, a.mode)
    return Fraction(result.edges_diff, total)


def divergence(m1, m2, key_of=default_key_of, indexes=None) -> DivergenceScore:
    """Both divergence scores; ``indexes`` may supply prebuilt
    ``((s1, c1), (s2, c2))`` structural/contextual index pairs."""
    if indexes is None:
        indexes = ((index_model(m1, STRUCTURAL, key_of), index_model(m1, CONTEXTUAL, key_of)),
                   (index_model(m2, STRUCTURAL, key_of), index_model(m2, CONTEXTUAL, key_of)))
    (s1, c1), (s2, c2) = indexes
    return DivergenceScore(score(s1, s2), score(c1, c2))


def changed_params(m1: ModelGraph, m2: ModelGraph, matches, key_of=default_key_of):
    """Per matched layer pair, the param names whose values differ."""
    l1, l2 = m1.layer_map(), m2.layer_map()
    out = {}
    for n1, n2 in matches:
        p1, p2 = l1[n1].params, l2[n2].params
        names = [name for name in p1 if name not in p2 or key_of(p1[name]) != key_of(p2[name])]
        names += [name for name in p2 if name not in p1]
        if names:
            out[(n1, n2)] = names
    return out


def diff_report(m1: ModelGraph, m2: ModelGraph, mode: str = STRUCTURAL, key_of=default_key_of,
                result: DiffResult | None = None) -> str:
    if result is None:
        result = module_diff(m1, m2, mode, key_of)
    l1, l2 = m1.layer_map(), m2.layer_map()
    lines = [f"diff {m1.model_name} -> {m2.model_name} ({result.mode})"]
    for n in sorted(result.del_n):
        lines.append(f"- layer {n} ({l1[n].op_type})")
    for n in sorted(result.add_n):
        lines.append(f"+ layer {n} ({l2[n].op_type})")
    for e in sorted(result.del_e):
        lines.append(f"- edge {e[0]} -> {e[1]}")
    for e in sorted(result.add_e):
        lines.append(f"+ edge {e[0]} -> {e[1]}")
    for (n1, n2), names in sorted(changed_params(m1, m2, result.matches_n, key_of).items()):
        label = n1 if n1 == n2 else f"{n1} ~ {n2}"
        lines.append(f"~ layer {label}: params {', '.join(names)} changed")
    if len(lines) == 1:
        lines.append("(no changes)")
    return "\n".join(lines) + "\n"


def apply_diff(m1: ModelGraph, m2: ModelGraph, result: DiffResult) -> ModelGraph:
    """Patch ``m1`` with ``result``: drop deleted nodes/edges, add m2's new
    ones. Matched layers keep m1's content under m2's layer ids."""
    rename = dict(result.matches_n)
    l1, l2 = m1.layer_map(), m2.layer_map()
    layers = [LayerNode(rename[n], l1[n].op_type, l1[n].attributes, l1[n].params)
              for n in l1 if n in rename]
    layers += [l2[n] for n in l2 if n in result.add_n]
    edges = [(rename[a], rename[b]) for a, b in m1.edges
             if (a, b) not in result.del_e and a in rename and b in rename]
    edges += [e for e in m2.edges if e in result.add_e]
    return ModelGraph(m2.model_name, m2.model_type, tuple(layers), tuple(dict.fromkeys(edges)))
